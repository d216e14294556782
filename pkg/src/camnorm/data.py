"""Datasets, the synthetic multi-camera generator, file I/O and batch samplers."""

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataIntegrityError, ParseError, SamplingError, SchemaError
from .numerics import DTYPE, RngStream

SPLITS = ("train", "query", "gallery")
NO_LABEL = -1


class Sample(NamedTuple):
    features: np.ndarray
    identity: int
    camera: int
    intra_label: int | None
    split: str


class Dataset:
    """Column-oriented collection of samples.

    Rows are stored as parallel arrays: ``features`` (n, dim), ``identities``,
    ``cameras``, ``intra_labels`` (``-1`` when absent) and ``splits``.
    Treated as immutable once built.
    """

    def __init__(self, name, dim, features, identities, cameras, splits,
                 intra_labels=None, generator_params=None):
        self.name = str(name)
        self.dim = int(dim)
        features = np.asarray(features, dtype=DTYPE)
        n = len(identities)
        self.features = features.reshape(n, self.dim)
        self.identities = np.asarray(identities, dtype=np.int64)
        self.cameras = np.asarray(cameras, dtype=np.int64)
        self.splits = np.asarray(splits, dtype="<U7")
        if intra_labels is None:
            intra_labels = np.full(n, NO_LABEL, dtype=np.int64)
        self.intra_labels = np.asarray(intra_labels, dtype=np.int64)
        self.generator_params = generator_params
        for arr in (self.identities, self.cameras, self.splits, self.intra_labels):
            if arr.shape != (n,):
                raise SchemaError("per-sample columns must have equal length")
        bad = set(np.unique(self.splits)) - set(SPLITS)
        if bad:
            raise SchemaError(f"unknown split(s): {sorted(bad)}")
        self._index_cache = {}

    def __len__(self):
        return len(self.identities)

    def __getitem__(self, i):
        label = int(self.intra_labels[i])
        return Sample(self.features[i], int(self.identities[i]), int(self.cameras[i]),
                      None if label == NO_LABEL else label, str(self.splits[i]))

    @property
    def samples(self):
        return [self[i] for i in range(len(self))]

    @property
    def camera_set(self):
        return sorted(int(c) for c in np.unique(self.cameras))

    @property
    def identity_set(self):
        return sorted(int(i) for i in np.unique(self.identities))

    def split_indices(self, split):
        return np.flatnonzero(self.splits == split)

    def split_cameras(self, *splits):
        mask = np.isin(self.splits, splits)
        return sorted(int(c) for c in np.unique(self.cameras[mask]))

    def split_identities(self, split):
        return sorted(int(i) for i in np.unique(self.identities[self.splits == split]))

    @property
    def has_intra_labels(self):
        return bool(np.any(self.intra_labels != NO_LABEL))

    def subset(self, indices, name=None):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(name or self.name, self.dim, self.features[idx], self.identities[idx],
                       self.cameras[idx], self.splits[idx], self.intra_labels[idx],
                       self.generator_params)

    def with_camera_offset(self, offset):
        """Copy with every camera ID shifted by ``offset``."""
        return Dataset(self.name, self.dim, self.features, self.identities,
                       self.cameras + int(offset), self.splits, self.intra_labels,
                       self.generator_params)

    def units(self, by="identity"):
        """Sorted label units of the train split and their row indices.

        ``by="identity"`` groups by global identity; ``by="intra"`` groups by
        (camera, intra_label), the only link available under weak supervision.
        """
        if by in self._index_cache:
            return self._index_cache[by]
        train = self.split_indices("train")
        if by == "identity":
            keys = [(int(i),) for i in self.identities[train]]
        elif by == "intra":
            if np.any(self.intra_labels[train] == NO_LABEL):
                raise DataIntegrityError("train rows lack intra-camera labels; call relabel_intra_camera")
            keys = list(zip(self.cameras[train].tolist(), self.intra_labels[train].tolist()))
        else:
            raise ValueError(f"unknown grouping {by!r}")
        groups = {}
        for row, key in zip(train.tolist(), keys):
            groups.setdefault(key, []).append(row)
        units = sorted(groups)
        result = (units, [np.asarray(groups[u], dtype=np.int64) for u in units])
        self._index_cache[by] = result
        return result

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.name == other.name and self.dim == other.dim
                and self.generator_params == other.generator_params
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.identities, other.identities)
                and np.array_equal(self.cameras, other.cameras)
                and np.array_equal(self.splits, other.splits)
                and np.array_equal(self.intra_labels, other.intra_labels))

    __hash__ = None

    def __repr__(self):
        counts = {s: int(np.sum(self.splits == s)) for s in SPLITS}
        return f"Dataset({self.name!r}, dim={self.dim}, cameras={self.camera_set}, splits={counts})"


# --------------------------------------------------------------------------
# synthetic generator

@dataclass
class SynthConfig:
    """Multi-camera generator settings.

    Every image of identity ``k`` under camera ``c`` is
    ``scale_c * z_k + offset_c + noise * eps`` with a latent prototype
    ``z_k ~ N(0, I)``. Scales and offsets are drawn per camera and per
    dimension from the given uniform ranges unless ``camera_params`` pins them.
    """

    dim: int = 32
    n_train_ids: int = 200
    n_eval_ids: int = 100
    train_cameras: tuple = (0, 1, 2, 3)
    eval_cameras: tuple | None = None
    scale_range: tuple = (0.5, 2.0)
    offset_range: tuple = (-2.0, 2.0)
    train_images: int = 8
    eval_images: int = 8
    noise: float = 0.5
    seed: int = 0
    name: str = "synth"
    camera_params: dict | None = None
    informative_dims: int | None = None
    weak_scale: float = 0.1

    def __post_init__(self):
        self.train_cameras = tuple(int(c) for c in self.train_cameras)
        if self.eval_cameras is not None:
            self.eval_cameras = tuple(int(c) for c in self.eval_cameras)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.offset_range = tuple(float(v) for v in self.offset_range)
        if self.camera_params is not None:
            self.camera_params = {
                int(c): (np.broadcast_to(np.asarray(s, dtype=DTYPE), (self.dim,)).copy(),
                         np.broadcast_to(np.asarray(b, dtype=DTYPE), (self.dim,)).copy())
                for c, (s, b) in self.camera_params.items()
            }
        self.validate()

    @property
    def test_cameras(self):
        return self.train_cameras if self.eval_cameras is None else self.eval_cameras

    def validate(self):
        for key in ("dim", "n_train_ids", "train_images"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.n_eval_ids < 0 or self.eval_images < 0:
            raise ConfigError("eval counts must be non-negative")
        if self.n_eval_ids > 0 and self.eval_images < 2:
            raise ConfigError("eval_images must be >= 2 (one query plus gallery)")
        if not self.train_cameras or (self.n_eval_ids and not self.test_cameras):
            raise ConfigError("camera lists must be nonempty")
        lo, hi = self.scale_range
        if lo > hi or lo <= 0 <= hi or hi <= 0:
            raise ConfigError("scale_range must be positive and exclude zero")
        if self.offset_range[0] > self.offset_range[1]:
            raise ConfigError("offset_range must be ordered")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        if self.informative_dims is not None and not 0 < self.informative_dims <= self.dim:
            raise ConfigError("informative_dims must lie in [1, dim]")
        if self.camera_params is not None:
            missing = set(self.train_cameras) | set(self.test_cameras)
            missing -= set(self.camera_params)
            if missing:
                raise ConfigError(f"camera_params missing cameras {sorted(missing)}")

    def to_dict(self):
        d = asdict(self)
        d["train_cameras"] = list(self.train_cameras)
        d["eval_cameras"] = None if self.eval_cameras is None else list(self.eval_cameras)
        d["scale_range"] = list(self.scale_range)
        d["offset_range"] = list(self.offset_range)
        if self.camera_params is not None:
            d["camera_params"] = {str(c): [s.tolist(), b.tolist()] for c, (s, b) in self.camera_params.items()}
        return d


def camera_parameters(cfg):
    """Per-camera (scale, offset) vectors.

    Each camera draws from its own child stream, so no two cameras share a
    draw and adding cameras never changes existing ones.
    """
    if cfg.camera_params is not None:
        return dict(cfg.camera_params)
    root = RngStream(cfg.seed)
    params = {}
    for cam in sorted(set(cfg.train_cameras) | set(cfg.test_cameras)):
        rng = root.child(1, cam)
        scale = rng.uniform(*cfg.scale_range, shape=cfg.dim)
        offset = rng.uniform(*cfg.offset_range, shape=cfg.dim)
        params[cam] = (scale, offset)
    return params


def latent_scales(cfg):
    """Per-dimension standard deviation of the identity prototypes.

    All ones by default. With ``informative_dims`` set, a seed-specific subset
    of that many dimensions keeps unit spread and the rest shrink to
    ``weak_scale``, so datasets with different seeds carry identity
    information in different directions.
    """
    scales = np.ones(cfg.dim, dtype=DTYPE)
    if cfg.informative_dims is not None:
        keep = RngStream(cfg.seed).child(3).permutation(cfg.dim)[:cfg.informative_dims]
        scales[:] = cfg.weak_scale
        scales[keep] = 1.0
    return scales


def generate_synthetic(cfg, return_prototypes=False):
    root = RngStream(cfg.seed)
    n_ids = cfg.n_train_ids + cfg.n_eval_ids
    prototypes = root.child(0).gaussian((n_ids, cfg.dim)) * latent_scales(cfg)
    params = camera_parameters(cfg)
    noise_rng = root.child(2)

    feats, ids, cams, splits = [], [], [], []

    def emit(identity, cam, count, split_of):
        scale, offset = params[cam]
        eps = noise_rng.gaussian((count, cfg.dim))
        x = scale * prototypes[identity] + offset + cfg.noise * eps
        for j in range(count):
            feats.append(x[j])
            ids.append(identity)
            cams.append(cam)
            splits.append(split_of(j))

    for k in range(cfg.n_train_ids):
        for cam in cfg.train_cameras:
            emit(k, cam, cfg.train_images, lambda j: "train")
    for k in range(cfg.n_train_ids, n_ids):
        for cam in cfg.test_cameras:
            emit(k, cam, cfg.eval_images, lambda j: "query" if j == 0 else "gallery")

    gen_params = {
        "config": cfg.to_dict(),
        "camera_log": {str(c): {"scale": s.tolist(), "offset": b.tolist()} for c, (s, b) in sorted(params.items())},
    }
    features = np.array(feats, dtype=DTYPE).reshape(len(ids), cfg.dim)
    ds = Dataset(cfg.name, cfg.dim, features, ids, cams, splits, generator_params=gen_params)
    if return_prototypes:
        return ds, prototypes
    return ds


# --------------------------------------------------------------------------
# file format

CSV_FIXED = ["split", "identity", "camera", "intra_label"]


def _fmt(v):
    return repr(float(v))


def save_dataset(ds, path):
    os.makedirs(path, exist_ok=True)
    meta = {
        "name": ds.name,
        "dim": ds.dim,
        "cameras": ds.camera_set,
        "n_identities": len(ds.identity_set),
        "splits": {s: int(np.sum(ds.splits == s)) for s in SPLITS},
    }
    if ds.generator_params is not None:
        meta["generator_params"] = ds.generator_params
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(path, "samples.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_FIXED + [f"f{d}" for d in range(ds.dim)])
        for i in range(len(ds)):
            label = int(ds.intra_labels[i])
            writer.writerow([str(ds.splits[i]), int(ds.identities[i]), int(ds.cameras[i]),
                             "" if label == NO_LABEL else label]
                            + [_fmt(v) for v in ds.features[i]])


def _parse_int(text, what, line):
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"bad {what} {text!r}", line) from None


def load_dataset(path):
    meta_path = os.path.join(path, "meta.json")
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"meta.json: {exc.msg}", exc.lineno) from None
    for key in ("name", "dim"):
        if key not in meta:
            raise SchemaError(f"meta.json lacks required field {key!r}")
    dim = int(meta["dim"])
    expected = CSV_FIXED + [f"f{d}" for d in range(dim)]

    feats, ids, cams, splits, intra = [], [], [], [], []
    with open(os.path.join(path, "samples.csv"), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("missing header", 1)
        if header[:4] != CSV_FIXED:
            raise ParseError(f"unexpected header columns {header[:4]}", 1)
        if len(header) != len(expected):
            raise SchemaError(f"samples.csv has {len(header) - 4} feature columns but meta.json declares dim={dim}")
        for row in reader:
            line = reader.line_num
            if len(row) != len(expected):
                raise ParseError(f"expected {len(expected)} columns, found {len(row)}", line)
            split = row[0]
            if split not in SPLITS:
                raise ParseError(f"unknown split {split!r}", line)
            splits.append(split)
            ids.append(_parse_int(row[1], "identity", line))
            cams.append(_parse_int(row[2], "camera", line))
            intra.append(NO_LABEL if row[3] == "" else _parse_int(row[3], "intra_label", line))
            try:
                feats.append([float(v) for v in row[4:]])
            except ValueError:
                raise ParseError("non-numeric feature value", line) from None

    features = np.array(feats, dtype=DTYPE).reshape(len(ids), dim)
    return Dataset(meta["name"], dim, features, ids, cams, splits, intra,
                   meta.get("generator_params"))


# --------------------------------------------------------------------------
# batches

@dataclass
class MiniBatch:
    """Row indices plus the camera key of each row.

    ``sources[i]`` is 0 for rows of the current dataset and ``m + 1`` for
    rows taken from exemplar memory ``m``.
    """

    indices: np.ndarray
    cameras: np.ndarray
    sources: np.ndarray = field(default=None)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        if self.sources is None:
            self.sources = np.zeros(len(self.indices), dtype=np.int64)
        self.sources = np.asarray(self.sources, dtype=np.int64)

    def __len__(self):
        return len(self.indices)

    @property
    def groups(self):
        return {int(c): np.flatnonzero(self.cameras == c) for c in np.unique(self.cameras)}


def drop_singleton_cameras(rows, cameras):
    """Remove rows whose camera occurs exactly once; keeps order."""
    rows = np.asarray(rows)
    cameras = np.asarray(cameras)
    uniq, counts = np.unique(cameras, return_counts=True)
    lonely = uniq[counts == 1]
    keep = ~np.isin(cameras, lonely)
    return rows[keep], cameras[keep]


def _pk_rows(ds, P, K, rng, by):
    units, members = ds.units(by)
    if len(units) < P:
        raise SamplingError(f"need {P} identities for PK sampling, dataset has {len(units)}")
    chosen = rng.choice(len(units), size=P, replace=False)
    blocks = []
    for u in chosen:
        rows = members[u]
        blocks.append(rng.choice(rows, size=K, replace=len(rows) < K))
    return blocks


def pk_sample(ds, P, K, rng, by="identity"):
    """Draw P label units with K train images each, then drop lone-camera rows.

    Units with fewer than K images are sampled with replacement.
    """
    blocks = _pk_rows(ds, P, K, rng, by)
    rows = np.concatenate(blocks)
    rows, cams = drop_singleton_cameras(rows, ds.cameras[rows])
    return MiniBatch(rows, cams)


# --------------------------------------------------------------------------
# exemplar memory

@dataclass
class ExemplarMemory:
    """One train image per identity of ``source``, camera-balanced greedily."""

    dataset: Dataset
    source_indices: np.ndarray
    picked_counts: dict
    source: str

    @property
    def samples(self):
        return self.dataset.samples

    def __len__(self):
        return len(self.dataset)


def build_exemplar_memory(ds, rng, identities=None):
    train = ds.split_indices("train")
    if len(train) == 0:
        raise DataIntegrityError("dataset has no train split")
    by_id = {}
    for row in train.tolist():
        by_id.setdefault(int(ds.identities[row]), []).append(row)
    if identities is None:
        identities = sorted(by_id)

    picked = {}
    chosen = []
    for k in sorted(int(i) for i in identities):
        rows = by_id.get(k)
        if not rows:
            raise DataIntegrityError(f"identity {k} has no train images")
        rows = np.asarray(rows)
        cams = sorted(set(ds.cameras[rows].tolist()))
        cam = min(cams, key=lambda c: (picked.get(c, 0), c))
        candidates = rows[ds.cameras[rows] == cam]
        chosen.append(int(rng.choice(candidates)))
        picked[cam] = picked.get(cam, 0) + 1

    idx = np.asarray(chosen, dtype=np.int64)
    return ExemplarMemory(ds.subset(idx), idx, dict(sorted(picked.items())), ds.name)


def exemplar_groups(memory, rng, group_size=4):
    """Shuffle each camera's exemplars and cut them into single-camera groups.

    A trailing group of one image cannot be normalized on its own and is
    dropped for this draw.
    """
    groups = []
    cams = memory.dataset.cameras
    for cam in sorted(set(cams.tolist())):
        rows = np.flatnonzero(cams == cam)
        rows = rows[rng.permutation(len(rows))]
        for start in range(0, len(rows), group_size):
            chunk = rows[start:start + group_size]
            if len(chunk) >= 2:
                groups.append((cam, chunk))
    return groups


def mixed_replay_batches(current, memories, P, K, rng, n_groups=4, group_size=4):
    """Mix a PK batch from ``current`` with camera-pure exemplar groups.

    Up to ``n_groups`` groups of ``group_size`` exemplars sharing one old
    camera are inserted at random positions between the new identity blocks.
    Camera IDs of ``current`` and every memory must be disjoint.
    """
    blocks = _pk_rows(current, P, K, rng, "identity")
    if not memories:
        rows = np.concatenate(blocks)
        rows, cams = drop_singleton_cameras(rows, current.cameras[rows])
        return MiniBatch(rows, cams)

    seen = set(current.camera_set)
    for mem in memories:
        overlap = seen & set(mem.dataset.camera_set)
        if overlap:
            raise SamplingError(f"camera IDs {sorted(overlap)} shared between replay sources")
        seen |= set(mem.dataset.camera_set)

    # drop lone new-data cameras before mixing; old cameras never collide with them
    new_rows = np.concatenate(blocks)
    block_id = np.repeat(np.arange(len(blocks)), [len(b) for b in blocks])
    uniq, counts = np.unique(current.cameras[new_rows], return_counts=True)
    keep = ~np.isin(current.cameras[new_rows], uniq[counts == 1])
    pieces = [(0, new_rows[keep & (block_id == b)]) for b in range(len(blocks))]
    pieces = [p for p in pieces if len(p[1])]

    pool = []
    for m, mem in enumerate(memories):
        for _, chunk in exemplar_groups(mem, rng, group_size):
            pool.append((m + 1, chunk))
    if len(pool) > n_groups:
        pick = rng.choice(len(pool), size=n_groups, replace=False)
        pool = [pool[i] for i in sorted(pick.tolist())]

    slots = len(pieces) + len(pool)
    group_slots = set(rng.choice(slots, size=len(pool), replace=False).tolist()) if pool else set()
    order = []
    it_new, it_old = iter(pieces), iter(pool)
    for s in range(slots):
        order.append(next(it_old) if s in group_slots else next(it_new))

    rows, sources, cams = [], [], []
    for src, chunk in order:
        cam_col = current.cameras if src == 0 else memories[src - 1].dataset.cameras
        rows.append(chunk)
        sources.append(np.full(len(chunk), src))
        cams.append(cam_col[chunk])
    if not rows:
        return MiniBatch(np.zeros(0, np.int64), np.zeros(0, np.int64))
    return MiniBatch(np.concatenate(rows), np.concatenate(cams), np.concatenate(sources))


def relabel_intra_camera(ds):
    """Renumber train identities independently within each camera.

    Global identities stay in place for evaluation; eval rows keep no
    intra label.
    """
    intra = np.full(len(ds), NO_LABEL, dtype=np.int64)
    train = ds.splits == "train"
    for cam in ds.split_cameras("train"):
        mask = train & (ds.cameras == cam)
        ids = np.unique(ds.identities[mask])
        intra[mask] = np.searchsorted(ids, ds.identities[mask])
    return Dataset(ds.name, ds.dim, ds.features, ds.identities, ds.cameras, ds.splits,
                   intra, ds.generator_params)


def intra_label_spaces(ds):
    """Camera -> number of intra-camera labels in the train split."""
    train = ds.splits == "train"
    return {cam: int(ds.intra_labels[train & (ds.cameras == cam)].max()) + 1
            for cam in ds.split_cameras("train")}
