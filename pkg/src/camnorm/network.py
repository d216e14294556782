"""Layers with explicit backward passes, the baseline model and checkpoints.

The backbone is ``Affine -> Norm -> ReLU -> ... -> Affine -> Norm``; the last
Norm is the bottleneck whose output is the retrieval feature. Each Norm layer
is either ``bn`` (one group per batch, running statistics for inference) or
``cbn`` (one group per camera, statistics supplied at inference).
"""

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, SingletonGroupError, StatsMissingError
from .numerics import DTYPE, affine, as_tensor, reduce_moments

NORM_KINDS = ("bn", "cbn")
CHECKPOINT_FORMAT = "camnorm-checkpoint/1"


class Affine:
    def __init__(self, W, b):
        self.W = as_tensor(W)
        self.b = as_tensor(b)

    @property
    def in_dim(self):
        return self.W.shape[0]

    @property
    def out_dim(self):
        return self.W.shape[1]

    def forward(self, x):
        return affine(x, self.W, self.b), x

    def backward(self, x, dy):
        if dy.shape != (x.shape[0], self.out_dim):
            raise DimensionError(f"affine backward: dy{dy.shape} vs expected {(x.shape[0], self.out_dim)}")
        return dy @ self.W.T, {"W": x.T @ dy, "b": dy.sum(axis=0)}


class ReLU:
    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, x, dy):
        return dy * (x > 0), {}


class Norm:
    """Normalization parameters: gamma, beta, eps, kind and (BN only) running stats."""

    def __init__(self, dim, kind="cbn", eps=1e-5, momentum=0.1):
        if kind not in NORM_KINDS:
            raise ConfigError(f"norm kind must be one of {NORM_KINDS}, got {kind!r}")
        if eps <= 0:
            raise ConfigError("eps must be positive")
        self.kind = kind
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = np.ones(dim, dtype=DTYPE)
        self.beta = np.zeros(dim, dtype=DTYPE)
        self.running_mean = np.zeros(dim, dtype=DTYPE)
        self.running_var = np.ones(dim, dtype=DTYPE)

    @property
    def dim(self):
        return len(self.gamma)


def _check_width(x, p):
    if x.ndim != 2 or x.shape[1] != p.dim:
        raise DimensionError(f"norm layer of width {p.dim} got input of shape {tuple(x.shape)}")


def _group_forward(x, gamma, beta, eps):
    mean, var = reduce_moments(x)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, xhat, inv_std, mean, var


def cbn_forward_train(x, cameras, p):
    """Standardize each camera group with its own mini-batch moments.

    Returns ``(y, cache)``; the cache keeps per-group indices, the normalized
    pre-affine activations and the group moments.
    """
    x = as_tensor(x)
    _check_width(x, p)
    cameras = np.asarray(cameras)
    if cameras.shape != (x.shape[0],):
        raise DimensionError(f"{len(cameras)} camera tags for a batch of {x.shape[0]}")
    y = np.empty_like(x)
    groups = []
    for cam in np.unique(cameras):
        idx = np.flatnonzero(cameras == cam)
        if len(idx) < 2:
            raise SingletonGroupError(f"camera {int(cam)} has a single sample in this batch")
        out, xhat, inv_std, mean, var = _group_forward(x[idx], p.gamma, p.beta, p.eps)
        y[idx] = out
        groups.append({"camera": int(cam), "idx": idx, "xhat": xhat, "inv_std": inv_std,
                       "mean": mean, "var": var})
    return y, {"groups": groups, "gamma": p.gamma.copy(), "shape": x.shape}


def cbn_backward(cache, dy):
    dy = as_tensor(dy)
    if dy.shape != cache["shape"]:
        raise DimensionError(f"cotangent shape {dy.shape} does not match cached batch {cache['shape']}")
    gamma = cache["gamma"]
    dx = np.empty_like(dy)
    dgamma = np.zeros_like(gamma)
    dbeta = np.zeros_like(gamma)
    for g in cache["groups"]:
        d = dy[g["idx"]]
        xhat = g["xhat"]
        m = len(g["idx"])
        sum_d = d.sum(axis=0)
        sum_dx = (d * xhat).sum(axis=0)
        dx[g["idx"]] = (gamma * g["inv_std"] / m) * (m * d - sum_d - xhat * sum_dx)
        dgamma += sum_dx
        dbeta += sum_d
    return dx, dgamma, dbeta


def bn_forward_train(x, p, update_running=True):
    """Single-group batch normalization; optionally updates the running moments."""
    x = as_tensor(x)
    _check_width(x, p)
    if x.shape[0] < 2:
        raise SingletonGroupError("batch normalization needs at least 2 samples")
    y, cache = cbn_forward_train(x, np.zeros(x.shape[0], dtype=np.int64), p)
    if update_running:
        g = cache["groups"][0]
        p.running_mean = (1 - p.momentum) * p.running_mean + p.momentum * g["mean"]
        p.running_var = (1 - p.momentum) * p.running_var + p.momentum * g["var"]
    return y, cache


bn_backward = cbn_backward


def norm_forward_eval(x, mean, var, p):
    return p.gamma * (as_tensor(x) - mean) / np.sqrt(var + p.eps) + p.beta


# --------------------------------------------------------------------------
# heads

class LinearHead:
    kind = "single"

    def __init__(self, W, b):
        self.fc = Affine(W, b)

    @property
    def n_classes(self):
        return self.fc.out_dim

    def label_space(self):
        return self.n_classes


class PerCameraHead:
    """One classifier per camera, each over that camera's intra-camera labels."""

    kind = "per_camera"

    def __init__(self, classifiers):
        self.classifiers = dict(sorted(classifiers.items()))

    def label_space(self):
        return {str(c): fc.out_dim for c, fc in self.classifiers.items()}


def _he(rng, fan_in, fan_out):
    return rng.gaussian((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)


def build_head(spec, feat_dim, rng):
    """``spec`` is a class count (single head) or a camera -> count mapping."""
    if isinstance(spec, dict):
        return PerCameraHead({int(c): Affine(_he(rng, feat_dim, n), np.zeros(n))
                              for c, n in sorted((int(c), n) for c, n in spec.items())})
    n = int(spec)
    return LinearHead(_he(rng, feat_dim, n), np.zeros(n))


# --------------------------------------------------------------------------
# model

@dataclass
class ArchConfig:
    in_dim: int
    widths: tuple = (64, 64, 32)
    norms: tuple = ("cbn", "cbn", "cbn")
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.norms = tuple(str(k) for k in self.norms)
        if self.in_dim < 1 or not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError(f"invalid layer widths {self.in_dim} -> {self.widths}")
        if len(self.norms) != len(self.widths):
            raise ConfigError(f"{len(self.widths)} affine layers need {len(self.widths)} norm kinds, got {len(self.norms)}")
        for k in self.norms:
            if k not in NORM_KINDS:
                raise ConfigError(f"unknown norm kind {k!r}")

    @classmethod
    def with_norm(cls, in_dim, kind, widths=(64, 64, 32), **kw):
        return cls(in_dim, widths, (kind,) * len(widths), **kw)

    @classmethod
    def from_mask(cls, in_dim, mask, widths=(64, 64, 32), **kw):
        """``mask[i]`` truthy makes Norm layer ``i`` a CBN layer."""
        return cls(in_dim, widths, tuple("cbn" if m else "bn" for m in mask), **kw)

    def to_dict(self):
        return {"in_dim": self.in_dim, "widths": list(self.widths), "norms": list(self.norms),
                "eps": self.eps, "momentum": self.momentum}


@dataclass
class Model:
    arch: ArchConfig
    layers: list
    heads: dict = field(default_factory=dict)
    stats: object = None
    training: bool = True
    seed: int | None = None
    epoch: int = 0

    @property
    def feature_dim(self):
        return self.arch.widths[-1]

    def norm_layers(self):
        return [layer for layer in self.layers if isinstance(layer, Norm)]

    def backbone_parameters(self):
        """(name, array, decayed) for every trainable backbone tensor."""
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Affine):
                out += [(f"layers.{i}.W", layer.W, True), (f"layers.{i}.b", layer.b, False)]
            elif isinstance(layer, Norm):
                out += [(f"layers.{i}.gamma", layer.gamma, True), (f"layers.{i}.beta", layer.beta, True)]
        return out

    def head_parameters(self, name):
        head = self.heads[name]
        if isinstance(head, LinearHead):
            fcs = [("fc", head.fc)]
        else:
            fcs = [(str(c), fc) for c, fc in head.classifiers.items()]
        out = []
        for key, fc in fcs:
            out += [(f"heads.{name}.{key}.W", fc.W, True), (f"heads.{name}.{key}.b", fc.b, False)]
        return out

    def parameters(self):
        out = self.backbone_parameters()
        for name in self.heads:
            out += self.head_parameters(name)
        return out

    def buffers(self):
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Norm):
                out += [(f"layers.{i}.running_mean", layer.running_mean),
                        (f"layers.{i}.running_var", layer.running_var)]
        return out

    def state(self):
        """Ordered (name, array) pairs covering every stored tensor."""
        return [(n, a) for n, a, _ in self.parameters()] + self.buffers()

    def set_array(self, name, value):
        parts = name.split(".")
        if parts[0] == "layers":
            setattr(self.layers[int(parts[1])], parts[2], value)
        else:
            head = self.heads[parts[1]]
            fc = head.fc if parts[2] == "fc" else head.classifiers[int(parts[2])]
            setattr(fc, parts[3], value)

    def copy(self):
        return copy.deepcopy(self)


def model_build(arch, rng, heads=None):
    """Initialize a backbone for ``arch`` plus optional named heads.

    Affine weights are He-normal, biases zero, gamma one, beta zero.
    """
    layers = []
    prev = arch.in_dim
    last = len(arch.widths) - 1
    for i, (width, kind) in enumerate(zip(arch.widths, arch.norms)):
        layers.append(Affine(_he(rng, prev, width), np.zeros(width, dtype=DTYPE)))
        layers.append(Norm(width, kind, arch.eps, arch.momentum))
        if i != last:
            layers.append(ReLU())
        prev = width
    model = Model(arch, layers, seed=getattr(rng, "seed", None))
    for name, spec in (heads or {}).items():
        add_head(model, name, spec, rng)
    return model


def add_head(model, name, spec, rng):
    model.heads[name] = build_head(spec, model.feature_dim, rng)
    return model.heads[name]


def forward_train(model, x, cameras, update_running=True, pooled=False):
    """Train-mode forward through the backbone.

    With ``pooled=True`` every Norm layer treats the batch as one group
    (dataset-wide statistics). Returns ``(features, caches)``.
    """
    x = as_tensor(x)
    cameras = np.asarray(cameras)
    caches = []
    h = x
    for layer in model.layers:
        if isinstance(layer, Norm):
            if layer.kind == "bn" or pooled:
                h, cache = bn_forward_train(h, layer, update_running=update_running and layer.kind == "bn")
            else:
                h, cache = cbn_forward_train(h, cameras, layer)
        else:
            h, cache = layer.forward(h)
        caches.append(cache)
    return h, caches


def backward(model, caches, dfeat):
    """Backpropagate a feature cotangent; returns ``(dx, grads)`` keyed by parameter name."""
    grads = {}
    d = dfeat
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        if isinstance(layer, Norm):
            d, dgamma, dbeta = cbn_backward(caches[i], d)
            grads[f"layers.{i}.gamma"] = dgamma
            grads[f"layers.{i}.beta"] = dbeta
        else:
            d, g = layer.backward(caches[i], d)
            for k, v in g.items():
                grads[f"layers.{i}.{k}"] = v
    return d, grads


def forward_eval(model, x, camera, stats=None):
    """Inference-mode features for images from a single camera.

    Norm layer ``j`` uses the entry ``(j, camera)`` of ``stats`` (or of the
    injected table); BN layers fall back to their running moments.
    """
    if stats is None:
        stats = model.stats
    entries = {} if stats is None else stats.entries
    h = as_tensor(x)
    j = 0
    for layer in model.layers:
        if isinstance(layer, Norm):
            entry = entries.get((j, int(camera)))
            if entry is not None:
                mean, var = entry.mean, entry.var
            elif layer.kind == "bn":
                mean, var = layer.running_mean, layer.running_var
            else:
                raise StatsMissingError(f"no statistics for norm layer {j}, camera {int(camera)}")
            h = norm_forward_eval(h, mean, var, layer)
            j += 1
        else:
            h, _ = layer.forward(h)
    return h


# --------------------------------------------------------------------------
# checkpoints

def _head_header(head):
    if isinstance(head, LinearHead):
        return {"kind": "single", "n_classes": head.n_classes}
    return {"kind": "per_camera", "label_spaces": head.label_space()}


def save_checkpoint(model, path, extra=None):
    """Write a checkpoint: one JSON header line, then raw little-endian float64 payload.

    The payload is the concatenation of the tensors listed in
    ``header["tensors"]`` in that order, each flattened row-major.
    """
    state = model.state()
    header = {
        "format": CHECKPOINT_FORMAT,
        "arch": model.arch.to_dict(),
        "heads": {name: _head_header(h) for name, h in model.heads.items()},
        "seed": model.seed,
        "epoch": model.epoch,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in state],
    }
    if extra:
        header["meta"] = extra
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in state)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        head_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(head_line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad checkpoint header ({exc.msg})") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    arch = ArchConfig(**header["arch"])
    model = model_build(arch, _NullRng())
    for name, h in header["heads"].items():
        spec = h["n_classes"] if h["kind"] == "single" else {int(c): n for c, n in h["label_spaces"].items()}
        add_head(model, name, spec, _NullRng())
    data = np.frombuffer(payload, dtype="<f8")
    expected = sum(int(np.prod(t["shape"])) for t in header["tensors"])
    if len(data) != expected:
        raise FormatError(f"{path}: payload holds {len(data)} floats, header declares {expected}")
    offset = 0
    for t in header["tensors"]:
        size = int(np.prod(t["shape"]))
        model.set_array(t["name"], data[offset:offset + size].astype(DTYPE).reshape(t["shape"]))
        offset += size
    model.seed = header.get("seed")
    model.epoch = header.get("epoch", 0)
    return model, header


class _NullRng:
    seed = None

    def gaussian(self, shape):
        return np.zeros(shape, dtype=DTYPE)
