"""Feature extraction and cross-camera retrieval metrics (CMC, mAP)."""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .adaptation import CameraStatsTable, estimate_adabn_stats, estimate_camera_stats, inject_stats
from .errors import ConfigError, ContractViolation, EmptyGroupError
from .network import forward_eval
from .numerics import l2_normalize

ADAPT_MODES = ("cbn", "adabn", "cbn+adabn", "none", "auto")


@dataclass
class FeatureSet:
    features: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        if self.valid is None:
            self.valid = np.ones(len(self.identities), dtype=bool)
        if not (len(self.features) == len(self.identities) == len(self.cameras) == len(self.valid)):
            raise ContractViolation("feature set columns differ in length")

    def __len__(self):
        return len(self.identities)

    @classmethod
    def from_raw(cls, raw, identities, cameras):
        feats, valid = l2_normalize(raw)
        return cls(feats, identities, cameras, valid)


@dataclass
class EvalReport:
    rank1: float
    rank5: float
    rank10: float
    mAP: float
    n_queries: int
    n_excluded: int
    cmc: list = field(default_factory=list)
    per_camera: dict | None = None

    def to_dict(self):
        return {"rank1": self.rank1, "rank5": self.rank5, "rank10": self.rank10, "mAP": self.mAP,
                "n_queries": self.n_queries, "n_excluded": self.n_excluded, "per_camera": self.per_camera}

    def save(self, path, extra=None):
        out = self.to_dict()
        if extra:
            out.update(extra)
        with open(path, "w") as fh:
            json.dump(out, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def save_cmc(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "fraction"])
            for k, v in enumerate(self.cmc, start=1):
                w.writerow([k, repr(float(v))])


def extract_features(model, ds, table=None, chunk=None):
    """L2-normalized bottleneck features for the query and gallery splits.

    Each image is normalized with its own camera's statistics. ``chunk``
    limits how many rows go through the network at once.
    """
    out = []
    for split in ("query", "gallery"):
        rows = ds.split_indices(split)
        raw = np.zeros((len(rows), model.feature_dim))
        cams = ds.cameras[rows]
        for cam in np.unique(cams):
            pos = np.flatnonzero(cams == cam)
            step = chunk or len(pos)
            for start in range(0, len(pos), step):
                sel = pos[start:start + step]
                raw[sel] = forward_eval(model, ds.features[rows[sel]], int(cam), table)
        out.append(FeatureSet.from_raw(raw, ds.identities[rows], cams))
    return out[0], out[1]


def distance_matrix(query, gallery):
    q, g = query.features, gallery.features
    d = (q**2).sum(1)[:, None] + (g**2).sum(1)[None, :] - 2.0 * q @ g.T
    return np.maximum(d, 0.0)


def evaluate(query, gallery, per_camera=False):
    """CMC and mAP with the cross-camera junk rule.

    Gallery entries sharing both identity and camera with the query are
    skipped. Queries left without a true match are excluded and counted.
    Ties in distance keep gallery order.
    """
    if len(query) == 0 or len(gallery) == 0:
        raise EmptyGroupError("evaluation needs a nonempty query and gallery")
    dist = distance_matrix(query, gallery)
    order = np.argsort(dist, axis=1, kind="stable")
    n_g = len(gallery)
    cmc_sum = np.zeros(n_g)
    aps = []
    first_hits = []
    q_cams = []
    excluded = 0
    for i in range(len(query)):
        o = order[i]
        same_id = gallery.identities[o] == query.identities[i]
        junk = same_id & (gallery.cameras[o] == query.cameras[i])
        hits = same_id[~junk]
        if not hits.any():
            excluded += 1
            continue
        pos = np.flatnonzero(hits)
        cmc = np.zeros(n_g)
        cmc[pos[0]:] = 1.0
        cmc_sum += cmc
        aps.append(np.mean(np.arange(1, len(pos) + 1) / (pos + 1)))
        first_hits.append(pos[0])
        q_cams.append(int(query.cameras[i]))
    n = len(aps)
    if n == 0:
        return EvalReport(0.0, 0.0, 0.0, 0.0, 0, excluded, [0.0] * n_g)
    curve = cmc_sum / n

    def rank(k):
        return float(curve[min(k, n_g) - 1])

    breakdown = None
    if per_camera:
        fh = np.asarray(first_hits)
        ap = np.asarray(aps)
        qc = np.asarray(q_cams)
        breakdown = {str(c): {"rank1": float(np.mean(fh[qc == c] == 0)), "mAP": float(ap[qc == c].mean()),
                              "n_queries": int(np.sum(qc == c))} for c in np.unique(qc)}
    return EvalReport(rank(1), rank(5), rank(10), float(np.mean(aps)), n, excluded,
                      curve.tolist(), breakdown)


def adapt_model(model, ds, adapt="auto", n_batches=10, batch_size=64, rng=None):
    """Estimate test statistics as requested and return an eval-ready model.

    ``cbn`` fills CBN layers per camera; ``adabn`` fills every Norm layer with
    dataset-wide moments; ``cbn+adabn`` does both (CBN layers per camera, BN
    layers dataset-wide); ``none`` relies on BN running moments; ``auto``
    picks ``cbn`` when the model has any CBN layer and ``none`` otherwise.
    """
    if adapt not in ADAPT_MODES:
        raise ConfigError(f"adapt must be one of {ADAPT_MODES}, got {adapt!r}")
    has_cbn = any(k == "cbn" for k in model.arch.norms)
    if adapt == "auto":
        adapt = "cbn" if has_cbn else "none"
    cams = ds.split_cameras("query", "gallery")
    if adapt == "none":
        if has_cbn:
            raise ContractViolation("CBN layers have no global statistics; estimate them with adapt='cbn'")
        return inject_stats(model, CameraStatsTable(provenance={"mode": "none"}))
    if adapt == "adabn":
        table = estimate_adabn_stats(model, ds, n_batches, batch_size, rng)
    elif adapt == "cbn":
        table = estimate_camera_stats(model, ds, cams, n_batches, batch_size, rng)
    else:
        table = estimate_adabn_stats(model, ds, n_batches, batch_size, rng.child(0), kinds=("bn",))
        table = table.merged(estimate_camera_stats(model, ds, cams, n_batches, batch_size, rng.child(1)))
    return inject_stats(model, table, cams)


def evaluate_model(model, ds, adapt="auto", n_batches=10, batch_size=64, rng=None, per_camera=False):
    ready = adapt_model(model, ds, adapt, n_batches, batch_size, rng)
    query, gallery = extract_features(ready, ds)
    return evaluate(query, gallery, per_camera=per_camera)


def random_feature_report(ds, dim, rng):
    """Retrieval metrics for features drawn independently of the images (chance level)."""
    out = []
    for split in ("query", "gallery"):
        rows = ds.split_indices(split)
        out.append(FeatureSet.from_raw(rng.gaussian((len(rows), dim)), ds.identities[rows], ds.cameras[rows]))
    return evaluate(*out)
