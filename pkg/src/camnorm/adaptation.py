"""Test-time normalization statistics: per camera (CBN) or dataset-wide (AdaBN)."""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyGroupError, StatsMissingError
from .network import Norm, forward_train
from .numerics import merge_moments

EVAL_SPLITS = ("query", "gallery")


@dataclass
class StatsEntry:
    mean: np.ndarray
    var: np.ndarray
    n_samples: int


@dataclass
class CameraStatsTable:
    """(norm layer index, camera) -> estimated moments."""

    entries: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def covers(self, layers, cameras):
        return all((j, c) in self.entries for j in layers for c in cameras)

    def merged(self, other):
        out = CameraStatsTable(dict(self.entries), dict(self.provenance))
        out.entries.update(other.entries)
        out.provenance.update(other.provenance)
        return out

    def to_records(self):
        return [{"layer": j, "camera": c, "mean": e.mean.tolist(), "var": e.var.tolist(),
                 "n_samples": e.n_samples, "N": self.provenance.get("N"), "seed": self.provenance.get("seed")}
                for (j, c), e in sorted(self.entries.items())]

    def save(self, path):
        with open(path, "w") as fh:
            json.dump({"provenance": self.provenance, "entries": self.to_records()}, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        entries = {(r["layer"], r["camera"]): StatsEntry(np.array(r["mean"]), np.array(r["var"]), r["n_samples"])
                   for r in raw["entries"]}
        return cls(entries, raw.get("provenance", {}))


def _threads():
    try:
        return max(1, int(os.environ.get("CAMNORM_THREADS", "1")))
    except ValueError:
        return 1


def estimation_batches(rows, n_batches, batch_size, rng):
    """Split one group's rows into at most ``n_batches`` batches of ``batch_size``.

    When the group holds no more rows than requested, every row is used once
    in index order, so the result carries no randomness. Otherwise rows are
    drawn without replacement. A trailing batch of one row joins its
    predecessor.
    """
    rows = np.asarray(rows, dtype=np.int64)
    need = n_batches * batch_size
    if len(rows) > need:
        rows = rng.choice(rows, size=need, replace=False)
    batches = [rows[i:i + batch_size] for i in range(0, len(rows), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


def _norm_indices(model, kinds):
    idx = []
    j = 0
    for layer in model.layers:
        if isinstance(layer, Norm):
            if layer.kind in kinds:
                idx.append(j)
            j += 1
    return idx


def _estimate_group(model, ds, rows, n_batches, batch_size, rng, record):
    acc = {}
    for batch in estimation_batches(rows, n_batches, batch_size, rng):
        if len(batch) < 2:
            raise EmptyGroupError("estimation needs at least 2 images per group")
        x = ds.features[batch]
        _, caches = forward_train(model, x, np.zeros(len(batch), dtype=np.int64), update_running=False, pooled=True)
        j = 0
        for layer, cache in zip(model.layers, caches):
            if isinstance(layer, Norm):
                if j in record:
                    g = cache["groups"][0]
                    n = len(batch)
                    if j in acc:
                        acc[j] = merge_moments(*acc[j], n, g["mean"], g["var"])
                    else:
                        acc[j] = (n, g["mean"], g["var"])
                j += 1
    return {j: StatsEntry(mean, np.maximum(var, 0.0), int(n)) for j, (n, mean, var) in acc.items()}


def _group_rows(ds, cameras, splits):
    mask = np.isin(ds.splits, splits) & np.isin(ds.cameras, cameras)
    return np.flatnonzero(mask)


def estimate_camera_stats(model, ds, cameras=None, n_batches=10, batch_size=64, rng=None,
                          splits=EVAL_SPLITS, kinds=("cbn",)):
    """Per-camera moments at every Norm layer of kind in ``kinds``.

    Each camera draws its batches from ``rng.child(camera)`` and is estimated
    independently; cameras run in parallel up to ``CAMNORM_THREADS``.
    Labels are never read.
    """
    if cameras is None:
        cameras = ds.split_cameras(*splits)
    cameras = [int(c) for c in cameras]
    record = set(_norm_indices(model, kinds))

    def one(cam):
        rows = _group_rows(ds, [cam], splits)
        if len(rows) == 0:
            raise StatsMissingError(f"camera {cam} has no images in splits {list(splits)}")
        return cam, _estimate_group(model, ds, rows, n_batches, batch_size, rng.child(cam), record)

    workers = min(_threads(), len(cameras)) or 1
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, cameras))
    else:
        results = [one(c) for c in cameras]

    table = CameraStatsTable(provenance={"mode": "camera", "N": n_batches, "batch_size": batch_size,
                                         "seed": rng.seed, "keys": list(rng.keys)})
    for cam, per_layer in sorted(results):
        for j, entry in per_layer.items():
            table.entries[(j, cam)] = entry
    return table


def estimate_adabn_stats(model, ds, n_batches=10, batch_size=64, rng=None, splits=EVAL_SPLITS,
                         kinds=("bn", "cbn")):
    """One dataset-wide moment set per Norm layer, shared by every camera."""
    cameras = ds.split_cameras(*splits)
    rows = _group_rows(ds, cameras, splits)
    if len(rows) == 0:
        raise EmptyGroupError(f"dataset {ds.name!r} has no images in splits {list(splits)}")
    record = set(_norm_indices(model, kinds))
    per_layer = _estimate_group(model, ds, rows, n_batches, batch_size, rng.child(*cameras), record)
    table = CameraStatsTable(provenance={"mode": "adabn", "N": n_batches, "batch_size": batch_size,
                                         "seed": rng.seed, "keys": list(rng.keys)})
    for j, entry in per_layer.items():
        for cam in cameras:
            table.entries[(j, cam)] = entry
    return table


def inject_stats(model, table, cameras=None):
    """Eval-mode copy of ``model`` carrying ``table``; later injections overwrite earlier entries.

    If ``cameras`` is given, every CBN layer must be covered for each of them.
    """
    if cameras is not None:
        needed = _norm_indices(model, ("cbn",))
        for c in cameras:
            for j in needed:
                if (j, int(c)) not in table.entries:
                    raise StatsMissingError(f"no statistics for norm layer {j}, camera {int(c)}")
    out = model.copy()
    out.stats = table if model.stats is None else model.stats.merged(table)
    out.training = False
    return out
