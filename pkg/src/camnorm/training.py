"""Losses, SGD, the training loop, classifier warm-up and incremental runs."""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .data import build_exemplar_memory, intra_label_spaces, mixed_replay_batches, pk_sample, relabel_intra_camera
from .errors import ConfigError, LabelError
from .network import LinearHead, PerCameraHead, add_head, backward, forward_train, model_build

log = logging.getLogger(__name__)

# Stage s of an incremental sequence sees its cameras shifted by s * CAMERA_STRIDE.
CAMERA_STRIDE = 1000


@dataclass
class TrainConfig:
    lr0: float = 0.01
    decay_epoch: int = 40
    decay_factor: float = 10.0
    epochs: int = 60
    momentum: float = 0.9
    weight_decay: float = 5e-4
    P: int = 16
    K: int = 4
    seed: int = 0
    supervision: str = "full"
    batches_per_epoch: int | None = None

    def __post_init__(self):
        self.validate()

    @classmethod
    def desk(cls, **overrides):
        """Shortened schedule used by the demos and acceptance runs."""
        base = dict(epochs=20, decay_epoch=14)
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if self.supervision not in ("full", "weak"):
            raise ConfigError(f"supervision must be 'full' or 'weak', got {self.supervision!r}")
        if self.epochs < 0 or self.lr0 <= 0 or self.decay_factor <= 0 or self.P < 1 or self.K < 1:
            raise ConfigError("training counts and rates must be positive")
        if self.epochs and not 0 < self.decay_epoch:
            raise ConfigError("decay_epoch must be positive")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("momentum must lie in [0, 1) and weight_decay must be non-negative")

    def to_dict(self):
        return asdict(self)


def lr_at(epoch, cfg):
    return cfg.lr0 if epoch < cfg.decay_epoch else cfg.lr0 / cfg.decay_factor


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise LabelError(f"{len(labels)} labels for {B} rows")
    if B and (labels.min() < 0 or labels.max() >= C):
        raise LabelError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[np.arange(B), labels].mean()
    d = np.exp(log_p)
    d[np.arange(B), labels] -= 1.0
    return float(loss), d / B


class SGD:
    """Momentum SGD with coupled weight decay.

    ``v <- m * v + (g + wd * p)``; ``p <- p - lr * v``. Parameters without a
    gradient in a step are left alone, velocity included.
    """

    def __init__(self, momentum=0.9, weight_decay=5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, params, grads, lr):
        for name, p, decayed in params:
            g = grads.get(name)
            if g is None:
                continue
            if decayed and self.weight_decay:
                g = g + self.weight_decay * p
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            p -= lr * v


def sgd_step(params, grads, lr, cfg, state=None):
    """One optimizer step; ``state`` carries momentum buffers between calls."""
    opt = state if state is not None else SGD(cfg.momentum, cfg.weight_decay)
    opt.step(params, grads, lr)
    return opt


# --------------------------------------------------------------------------
# heads and losses

def label_map(identities):
    ids = sorted(int(i) for i in set(np.asarray(identities).tolist()))
    return {k: j for j, k in enumerate(ids)}


def head_spec(ds, supervision):
    if supervision == "weak":
        return intra_label_spaces(ds)
    return len(ds.split_identities("train"))


def _linear_ce(fc, feats, labels, weight):
    logits = feats @ fc.W + fc.b
    loss, dlogits = cross_entropy(logits, labels)
    dlogits = dlogits * weight
    return loss * weight, dlogits @ fc.W.T, {"W": feats.T @ dlogits, "b": dlogits.sum(axis=0)}


def head_loss(model, name, feats, labels, cameras, total):
    """Cross-entropy of rows routed through head ``name``, scaled by ``len(rows)/total``.

    Returns ``(loss, dfeats, grads)``. A per-camera head averages its cameras'
    losses weighted by their sample counts.
    """
    head = model.heads[name]
    dfeats = np.zeros_like(feats)
    grads = {}
    loss = 0.0
    if isinstance(head, LinearHead):
        loss, dfeats, g = _linear_ce(head.fc, feats, labels, len(feats) / total)
        grads = {f"heads.{name}.fc.{k}": v for k, v in g.items()}
        return loss, dfeats, grads
    for cam in np.unique(cameras):
        idx = np.flatnonzero(cameras == cam)
        fc = head.classifiers.get(int(cam))
        if fc is None:
            raise LabelError(f"head {name!r} has no classifier for camera {int(cam)}")
        part, dpart, g = _linear_ce(fc, feats[idx], labels[idx], len(idx) / total)
        loss += part
        dfeats[idx] = dpart
        for k, v in g.items():
            grads[f"heads.{name}.{int(cam)}.{k}"] = v
    return loss, dfeats, grads


class _Source:
    """Rows of one dataset bound to the head that classifies them."""

    def __init__(self, ds, head, supervision):
        self.ds = ds
        self.head = head
        if supervision == "weak":
            self.labels = ds.intra_labels
        else:
            lm = label_map(ds.identities[ds.splits == "train"])
            self.labels = np.array([lm.get(int(i), -1) for i in ds.identities], dtype=np.int64)


def _batch_step(model, batch, sources, opt, lr, params):
    total = len(batch)
    x = np.empty((total, model.arch.in_dim))
    labels = np.empty(total, dtype=np.int64)
    for s, src in enumerate(sources):
        mask = batch.sources == s
        rows = batch.indices[mask]
        x[mask] = src.ds.features[rows]
        labels[mask] = src.labels[rows]
    feats, caches = forward_train(model, x, batch.cameras)
    dfeats = np.zeros_like(feats)
    grads = {}
    loss = 0.0
    for s, src in enumerate(sources):
        mask = np.flatnonzero(batch.sources == s)
        if len(mask) == 0:
            continue
        part, dpart, g = head_loss(model, src.head, feats[mask], labels[mask], batch.cameras[mask], total)
        loss += part
        dfeats[mask] += dpart
        grads.update(g)
    _, bgrads = backward(model, caches, dfeats)
    grads.update(bgrads)
    opt.step(params, grads, lr)
    return loss


def _default_head(model, ds):
    if len(model.heads) == 1:
        return next(iter(model.heads))
    if ds.name in model.heads:
        return ds.name
    raise ConfigError(f"cannot infer which head trains on {ds.name!r}")


def batches_per_epoch(ds, cfg):
    if cfg.batches_per_epoch:
        return cfg.batches_per_epoch
    return max(1, math.ceil(len(ds.split_indices("train")) / (cfg.P * cfg.K)))


def train(model, dataset, cfg, rng, head=None, memories=(), log_path=None):
    """Train ``model`` in place on the train split of ``dataset``.

    ``memories`` is a sequence of ``(ExemplarMemory, head_name)`` pairs; when
    given, batches come from :func:`mixed_replay_batches` and the old heads
    are updated by their exemplars. Returns ``(model, run_log)``.
    """
    head = head or _default_head(model, dataset)
    weak = cfg.supervision == "weak"
    if weak and memories:
        raise ConfigError("replay training is defined for full supervision only")
    if weak and not dataset.has_intra_labels:
        dataset = relabel_intra_camera(dataset)
    expected = PerCameraHead if weak else LinearHead
    if not isinstance(model.heads.get(head), expected):
        raise ConfigError(f"head {head!r} does not match {cfg.supervision} supervision")

    sources = [_Source(dataset, head, cfg.supervision)]
    sources += [_Source(mem.dataset, name, "full") for mem, name in memories]
    mem_list = [mem for mem, _ in memories]
    opt = SGD(cfg.momentum, cfg.weight_decay)
    params = model.parameters()
    n_batches = batches_per_epoch(dataset, cfg)
    by = "intra" if weak else "identity"
    run_log = []
    model.training = True
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        losses = []
        for _ in range(n_batches):
            if mem_list:
                batch = mixed_replay_batches(dataset, mem_list, cfg.P, cfg.K, rng)
            else:
                batch = pk_sample(dataset, cfg.P, cfg.K, rng, by=by)
            if len(batch) < 2:
                continue
            losses.append(_batch_step(model, batch, sources, opt, lr, params))
        record = {"epoch": epoch, "lr": lr, "mean_loss": float(np.mean(losses)) if losses else None,
                  "wall_ms": round((time.perf_counter() - t0) * 1000, 3)}
        run_log.append(record)
        model.epoch += 1
        log.debug("epoch %d lr %.4g loss %s", epoch, lr, record["mean_loss"])
    if log_path is not None:
        save_run_log(run_log, log_path)
    return model, run_log


def save_run_log(run_log, path):
    with open(path, "w") as fh:
        for rec in run_log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# warm-up

class WarmupState:
    """Loss-stability detector of the classifier warm-up.

    Keeps the latest ``window_size`` losses; once the window is full, a loss
    within ``tol`` of the window mean advances the counter, anything else
    resets it. Done when the counter reaches ``patience``.
    """

    def __init__(self, window_size=50, tol=0.1, patience=5):
        self.window_size = window_size
        self.tol = tol
        self.patience = patience
        self.losses = []
        self.n = 0
        self.iterations = 0

    def update(self, loss):
        self.iterations += 1
        self.losses.append(float(loss))
        del self.losses[:-self.window_size]
        full = len(self.losses) == self.window_size
        if full and abs(loss - float(np.mean(self.losses))) <= self.tol:
            self.n += 1
        else:
            self.n = 0
        return self.done

    @property
    def done(self):
        return self.n >= self.patience


def run_warmup(loss_fn, window_size=50, tol=0.1, patience=5, cap=None):
    """Drive ``loss_fn(iteration)`` until the loss is stable or ``cap`` is hit.

    Returns a summary dict with the iteration count and how the loop ended.
    """
    cap = 10 * window_size if cap is None else cap
    state = WarmupState(window_size, tol, patience)
    while not state.done and state.iterations < cap:
        state.update(loss_fn(state.iterations))
    info = {"iterations": state.iterations, "stopped_by": "stable" if state.done else "cap"}
    if not state.done:
        info["warning"] = f"warm-up loss did not stabilize within {cap} iterations"
        log.warning(info["warning"])
    return info


def warmup_classifier(model, dataset, cfg, rng, head=None, window_size=50, tol=0.1, patience=5, cap=None):
    """Fit only head ``head`` on ``dataset`` with the backbone frozen.

    The backbone still normalizes with mini-batch statistics but running
    moments are not updated. Returns ``(model, info)``.
    """
    head = head or _default_head(model, dataset)
    src = _Source(dataset, head, "full")
    params = model.head_parameters(head)
    opt = SGD(cfg.momentum, cfg.weight_decay)
    lr = cfg.lr0

    def step(_):
        batch = pk_sample(dataset, cfg.P, cfg.K, rng)
        x = dataset.features[batch.indices]
        feats, _ = forward_train(model, x, batch.cameras, update_running=False)
        loss, _, grads = head_loss(model, head, feats, src.labels[batch.indices], batch.cameras, len(batch))
        opt.step(params, grads, lr)
        return loss

    info = run_warmup(step, window_size, tol, patience, cap)
    return model, info


# --------------------------------------------------------------------------
# incremental learning

@dataclass
class SequenceSpec:
    datasets: list
    mode: str = "replay"

    def __post_init__(self):
        self.mode = self.mode.lower().replace("-", "")
        if self.mode not in ("datafree", "replay"):
            raise ConfigError(f"mode must be DataFree or Replay, got {self.mode!r}")
        if len(self.datasets) < 1:
            raise ConfigError("a sequence needs at least one dataset")


def run_incremental(seq, arch, cfg, rng, warmup=True, eval_batches=10, eval_batch_size=64, evaluator=None,
                    on_memory=None):
    """Train over ``seq.datasets`` in order and track retention on the first one.

    Each stage's cameras are shifted by ``stage * CAMERA_STRIDE`` so replayed
    cameras never collide with new ones. Retention is the ratio of the
    first-dataset metric after each stage to its value after stage 1.
    ``on_memory(stage, memory)`` is called for every exemplar memory built.
    """
    from .evaluation import evaluate_model

    evaluator = evaluator or evaluate_model
    datasets = [ds.with_camera_offset(s * CAMERA_STRIDE) for s, ds in enumerate(seq.datasets)]
    names = [f"{s}:{ds.name}" for s, ds in enumerate(datasets)]
    first = datasets[0]
    model = model_build(arch, rng.child(0), heads={names[0]: head_spec(first, "full")})
    memories = []
    stages = []
    for s, ds in enumerate(datasets):
        stage = {"dataset": seq.datasets[s].name}
        train_rng = rng.child(1, s)
        if s > 0:
            if seq.mode == "datafree":
                for name in list(model.heads):
                    del model.heads[name]
            else:
                prev = datasets[s - 1]
                memory = build_exemplar_memory(prev, rng.child(2, s - 1))
                memories.append((memory, names[s - 1]))
                if on_memory is not None:
                    on_memory(s - 1, memory)
                stage["memory_sizes"] = [len(m) for m, _ in memories]
            add_head(model, names[s], head_spec(ds, "full"), rng.child(3, s))
            if warmup:
                _, info = warmup_classifier(model, ds, cfg, rng.child(4, s), head=names[s])
                stage["warmup"] = info
        train(model, ds, cfg, train_rng, head=names[s], memories=memories if seq.mode == "replay" else ())
        report = evaluator(model, first, rng=rng.child(5, s), n_batches=eval_batches, batch_size=eval_batch_size)
        stage["rank1"] = report.rank1
        stage["mAP"] = report.mAP
        stages.append(stage)
    base_r1, base_map = stages[0]["rank1"], stages[0]["mAP"]
    retention = {
        "rank1": [st["rank1"] / base_r1 if base_r1 else 0.0 for st in stages],
        "mAP": [st["mAP"] / base_map if base_map else 0.0 for st in stages],
    }
    result = {
        "sequence": [ds.name for ds in seq.datasets],
        "mode": "Replay" if seq.mode == "replay" else "DataFree",
        "warmup": warmup,
        "norms": list(arch.norms),
        "stages": stages,
        "retention": retention,
    }
    return model, result
