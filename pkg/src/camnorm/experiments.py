"""Desk-scale presets and the experiment drivers behind the CLI, the demos and the acceptance suite.

Every driver takes explicit seeds. A run seeded with ``s`` initializes its
model from ``RngStream(s).child(0)``, samples training batches from
``child(1)`` and draws estimation batches from ``child(2)``.
"""

import copy

import numpy as np

from .data import SynthConfig, generate_synthetic, intra_label_spaces, relabel_intra_camera
from .evaluation import evaluate_model
from .network import ArchConfig, model_build
from .numerics import RngStream
from .training import SequenceSpec, TrainConfig, head_spec, run_incremental, train

# Shortened schedule for every preset: 20 epochs with the step decay at 14.
DESK_TRAIN = {"epochs": 20, "decay_epoch": 14}

PRESETS = {
    "default": {
        "data": {"seed": 1, "name": "default"},
    },
    "direct-transfer": {
        "data": {"seed": 1, "name": "direct-transfer", "train_cameras": [0, 1, 2, 3],
                 "eval_cameras": [4, 5, 6, 7]},
    },
    "incremental": {
        "data": [
            {"seed": 11, "name": "inc-a", "n_train_ids": 100, "n_eval_ids": 50, "informative_dims": 16},
            {"seed": 12, "name": "inc-b", "n_train_ids": 100, "n_eval_ids": 50, "informative_dims": 16},
        ],
    },
}

SWEEP_VALUES = (1, 5, 10, 20, 50)


def preset_data(name):
    """SynthConfig dicts of a preset, always as a list."""
    data = copy.deepcopy(PRESETS[name]["data"])
    return data if isinstance(data, list) else [data]


def preset_datasets(name):
    return [generate_synthetic(SynthConfig(**d)) for d in preset_data(name)]


def _arch(ds, norms, widths):
    if isinstance(norms, ArchConfig):
        return norms
    if isinstance(norms, str):
        norms = (norms,) * len(widths)
    return ArchConfig(ds.dim, tuple(widths), tuple(norms))


def fit(ds, norms, seed, cfg=None, supervision="full", widths=(64, 64, 32)):
    """Build and train one model on ``ds``.

    ``norms`` is a norm kind, a per-layer tuple of kinds or a full ArchConfig.
    """
    cfg = cfg or TrainConfig(**DESK_TRAIN, seed=seed, supervision=supervision)
    if cfg.supervision == "weak" and not ds.has_intra_labels:
        ds = relabel_intra_camera(ds)
    rng = RngStream(seed)
    arch = _arch(ds, norms, widths)
    spec = intra_label_spaces(ds) if cfg.supervision == "weak" else head_spec(ds, "full")
    model = model_build(arch, rng.child(0), heads={"main": spec})
    model.seed = seed
    return train(model, ds, cfg, rng.child(1))


def assess(model, ds, seed, adapt="auto", n_batches=10, batch_size=64, per_camera=False):
    return evaluate_model(model, ds, adapt=adapt, n_batches=n_batches, batch_size=batch_size,
                          rng=RngStream(seed).child(2), per_camera=per_camera)


def _metrics(report):
    return {"rank1": report.rank1, "mAP": report.mAP}


def direct_transfer(ds, seeds):
    """All-BN (running stats and AdaBN) against all-CBN on unseen cameras, per seed."""
    rows = []
    for seed in seeds:
        bn, _ = fit(ds, "bn", seed)
        cbn, _ = fit(ds, "cbn", seed)
        rows.append({
            "seed": seed,
            "bn": _metrics(assess(bn, ds, seed, "none")),
            "bn_adabn": _metrics(assess(bn, ds, seed, "adabn")),
            "cbn": _metrics(assess(cbn, ds, seed, "cbn")),
        })
    return rows


def estimation_sweep(model, ds, values=SWEEP_VALUES, repeats=10, seed=0, batch_size=64):
    """Mean and variance of mAP (in percent) over ``repeats`` estimation draws per N.

    Repeat ``r`` draws from ``RngStream(seed).child(3, r)`` for every N.
    Variance is the population variance over the repeats.
    """
    rows = []
    for n in values:
        maps = []
        for r in range(repeats):
            report = evaluate_model(model, ds, adapt="cbn", n_batches=n, batch_size=batch_size,
                                    rng=RngStream(seed).child(3, r))
            maps.append(100.0 * report.mAP)
        rows.append({"N": int(n), "mean_mAP": float(np.mean(maps)), "var_mAP": float(np.var(maps))})
    return rows


def incremental(datasets, norm, mode, seed, warmup=True, cfg=None, widths=(64, 64, 32), on_memory=None):
    cfg = cfg or TrainConfig(**DESK_TRAIN, seed=seed)
    arch = _arch(datasets[0], norm, widths)
    _, report = run_incremental(SequenceSpec(list(datasets), mode), arch, cfg, RngStream(seed),
                                warmup=warmup, on_memory=on_memory)
    return report


def weak_vs_full(ds, seeds):
    rows = []
    for seed in seeds:
        full, _ = fit(ds, "cbn", seed)
        weak, _ = fit(ds, "cbn", seed, supervision="weak")
        rows.append({"seed": seed, "full": _metrics(assess(full, ds, seed)),
                     "weak": _metrics(assess(weak, ds, seed))})
    return rows
