"""Command-line front end: ``camnorm {gen,train,eval,sweep-nbatches,incremental}``.

Each command resolves one experiment config from a preset, an optional JSON
file and flag overrides (flags win), validates it before any work, and
writes its artifacts plus a ``run.json`` manifest into ``--out``.
"""

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields

from . import experiments
from .data import SynthConfig, generate_synthetic, load_dataset, relabel_intra_camera, save_dataset
from .errors import CamNormError, ConfigError, FormatError, OutputExistsError
from .evaluation import ADAPT_MODES, adapt_model, evaluate, extract_features
from .network import ArchConfig, load_checkpoint, save_checkpoint
from .numerics import RngStream
from .training import SequenceSpec, TrainConfig

log = logging.getLogger("camnorm")

SECTIONS = {
    "seed": None,
    "preset": None,
    "data": {f.name for f in fields(SynthConfig)},
    "data_paths": None,
    "arch": {"widths", "norms", "eps", "momentum"},
    "train": {f.name for f in fields(TrainConfig)},
    "estimation": {"n_batches", "batch_size"},
    "eval": {"adapt", "per_camera"},
    "incremental": {"mode", "warmup"},
    "sweep": {"values", "repeats"},
}

BASE = {
    "seed": 0,
    "arch": {"widths": [64, 64, 32], "norms": None, "eps": 1e-5, "momentum": 0.1},
    "train": dict(experiments.DESK_TRAIN),
    "estimation": {"n_batches": 10, "batch_size": 64},
    "eval": {"adapt": "auto", "per_camera": False},
    "incremental": {"mode": "replay", "warmup": True},
    "sweep": {"values": list(experiments.SWEEP_VALUES), "repeats": 10},
}


# --------------------------------------------------------------------------
# configuration

def _check_keys(cfg):
    for key, value in cfg.items():
        if key not in SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        allowed = SECTIONS[key]
        if allowed is None:
            continue
        items = value if isinstance(value, list) else [value]
        for item in items:
            if not isinstance(item, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            unknown = set(item) - allowed
            if unknown:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(unknown)}")


def _merge(base, extra):
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key].update(value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config_file(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _check_keys(raw)
    return raw


def resolve_config(preset=None, file_cfg=None, overrides=None):
    """Preset <- JSON file <- flags, then schema-checked."""
    file_cfg = file_cfg or {}
    overrides = overrides or {}
    name = overrides.get("preset") or file_cfg.get("preset") or preset or "default"
    if name not in experiments.PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(experiments.PRESETS)}")
    cfg = _merge(BASE, {"preset": name, "data": experiments.preset_data(name)})
    for layer in (file_cfg, overrides):
        layer = dict(layer)
        data = layer.pop("data", None)
        cfg = _merge(cfg, layer)
        if isinstance(data, dict):
            # a single object refines every dataset of the preset
            cfg["data"] = [{**d, **data} for d in cfg["data"]]
        elif data is not None:
            cfg["data"] = copy.deepcopy(data)
    _check_keys(cfg)
    validate(cfg)
    return cfg


def validate(cfg):
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    for d in cfg["data"]:
        synth_config(d)
    train_config(cfg)
    arch = cfg["arch"]
    if arch["norms"] is not None and len(arch["norms"]) != len(arch["widths"]):
        raise ConfigError("arch.norms must list one kind per layer")
    est = cfg["estimation"]
    if est["n_batches"] < 1 or est["batch_size"] < 2:
        raise ConfigError("estimation needs n_batches >= 1 and batch_size >= 2")
    if cfg["eval"]["adapt"] not in ADAPT_MODES:
        raise ConfigError(f"eval.adapt must be one of {ADAPT_MODES}")
    SequenceSpec([None], cfg["incremental"]["mode"])
    if cfg["sweep"]["repeats"] < 1 or not cfg["sweep"]["values"]:
        raise ConfigError("sweep needs repeats >= 1 and at least one N")


def synth_config(d):
    try:
        return SynthConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def train_config(cfg):
    return TrainConfig(**{**cfg["train"], "seed": cfg["seed"]})


def arch_config(cfg, in_dim, default_norm="cbn"):
    a = cfg["arch"]
    norms = a["norms"] or [default_norm] * len(a["widths"])
    return ArchConfig(in_dim, tuple(a["widths"]), tuple(norms), a["eps"], a["momentum"])


def config_hash(cfg, digests=()):
    """Short digest of the resolved config and the input data it ran on."""
    payload = json.dumps({"config": cfg, "inputs": list(digests)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def data_digest(path):
    h = hashlib.sha256()
    for name in ("meta.json", "samples.csv"):
        with open(os.path.join(path, name), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()[:16]


def file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


# --------------------------------------------------------------------------
# output plumbing

def prepare_out(path, force):
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise OutputExistsError(f"output directory {path} is not empty (use --force)")
    if os.path.exists(path) and not os.path.isdir(path):
        raise OutputExistsError(f"{path} exists and is not a directory")
    os.makedirs(path, exist_ok=True)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_manifest(out, command, cfg, chash, artifacts):
    write_json(os.path.join(out, "run.json"), {
        "command": command, "config": cfg, "config_hash": chash, "seed": cfg["seed"], "artifacts": artifacts,
    })


# --------------------------------------------------------------------------
# commands

def cmd_gen(cfg, out, force=False):
    prepare_out(out, force)
    chash = config_hash(cfg)
    written = []
    for d in cfg["data"]:
        ds = generate_synthetic(synth_config(d))
        ds.generator_params["provenance"] = {"config_hash": chash, "seed": d.get("seed", 0)}
        target = out if len(cfg["data"]) == 1 else os.path.join(out, ds.name)
        save_dataset(ds, target)
        written.append(os.path.relpath(target, out))
    write_manifest(out, "gen", cfg, chash, written)
    return written


def cmd_train(cfg, data, out, force=False):
    prepare_out(out, force)
    ds = load_dataset(data)
    chash = config_hash(cfg, [data_digest(data)])
    tc = train_config(cfg)
    arch = arch_config(cfg, ds.dim)
    if tc.supervision == "weak" and not ds.has_intra_labels:
        ds = relabel_intra_camera(ds)
    model, run_log = experiments.fit(ds, arch, cfg["seed"], tc)
    for rec in run_log:
        rec.update(config_hash=chash, seed=cfg["seed"])
    with open(os.path.join(out, "train_log.jsonl"), "w") as fh:
        for rec in run_log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    meta = {"config_hash": chash, "seed": cfg["seed"], "dataset": ds.name, "supervision": tc.supervision}
    save_checkpoint(model, os.path.join(out, "model.ckpt"), extra=meta)
    write_manifest(out, "train", cfg, chash, ["model.ckpt", "train_log.jsonl"])
    return model, run_log


def _load_for_eval(checkpoint, data):
    model, header = load_checkpoint(checkpoint)
    ds = load_dataset(data)
    return model, header, ds, [file_digest(checkpoint), data_digest(data)]


def cmd_eval(cfg, checkpoint, data, out, force=False):
    prepare_out(out, force)
    model, _, ds, digests = _load_for_eval(checkpoint, data)
    chash = config_hash(cfg, digests)
    est, ev = cfg["estimation"], cfg["eval"]
    rng = RngStream(cfg["seed"]).child(2)
    ready = adapt_model(model, ds, ev["adapt"], est["n_batches"], est["batch_size"], rng)
    report = evaluate(*extract_features(ready, ds), per_camera=ev["per_camera"])
    report.save(os.path.join(out, "eval_report.json"), extra={
        "config_hash": chash, "seed": cfg["seed"], "dataset": ds.name, "adapt": ev["adapt"],
        "n_batches": est["n_batches"], "batch_size": est["batch_size"]})
    report.save_cmc(os.path.join(out, "cmc.csv"))
    artifacts = ["eval_report.json", "cmc.csv"]
    if ready.stats is not None and ready.stats.entries:
        ready.stats.save(os.path.join(out, "stats.json"))
        artifacts.append("stats.json")
    write_manifest(out, "eval", cfg, chash, artifacts)
    return report


def cmd_sweep(cfg, checkpoint, data, out, force=False):
    prepare_out(out, force)
    model, _, ds, digests = _load_for_eval(checkpoint, data)
    chash = config_hash(cfg, digests)
    rows = experiments.estimation_sweep(model, ds, cfg["sweep"]["values"], cfg["sweep"]["repeats"],
                                        cfg["seed"], cfg["estimation"]["batch_size"])
    with open(os.path.join(out, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["N", "mean_mAP", "var_mAP"])
        for r in rows:
            w.writerow([r["N"], repr(r["mean_mAP"]), repr(r["var_mAP"])])
    write_manifest(out, "sweep-nbatches", cfg, chash, ["sweep.csv"])
    return rows


def cmd_incremental(cfg, data_paths, out, force=False):
    prepare_out(out, force)
    if data_paths:
        datasets = [load_dataset(p) for p in data_paths]
        digests = [data_digest(p) for p in data_paths]
    else:
        datasets = [generate_synthetic(synth_config(d)) for d in cfg["data"]]
        digests = []
    chash = config_hash(cfg, digests)
    inc = cfg["incremental"]
    arch = arch_config(cfg, datasets[0].dim)
    if len(set(arch.norms)) != 1:
        raise ConfigError("incremental runs use one norm kind for every layer")
    artifacts = []

    def keep_memory(stage, memory):
        name = f"memory_{stage}"
        save_dataset(memory.dataset, os.path.join(out, name))
        artifacts.append(name)

    report = experiments.incremental(datasets, arch, inc["mode"], cfg["seed"], warmup=inc["warmup"],
                                     cfg=train_config(cfg), on_memory=keep_memory)
    report.update(config_hash=chash, seed=cfg["seed"])
    write_json(os.path.join(out, "incremental_report.json"), report)
    write_manifest(out, "incremental", cfg, chash, ["incremental_report.json"] + artifacts)
    return report


# --------------------------------------------------------------------------
# argument parsing

def _mask(text):
    try:
        bits = [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad mask {text!r}; expected e.g. 1,0,0") from None
    if any(b not in (0, 1) for b in bits):
        raise argparse.ArgumentTypeError("mask entries must be 0 or 1")
    return bits


def _ints(text):
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    p = argparse.ArgumentParser(prog="camnorm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--preset", choices=sorted(experiments.PRESETS))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    def arch_flags(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--norm", choices=["bn", "cbn"])
        g.add_argument("--norm-mask", type=_mask, help="1 for CBN, 0 for BN, one entry per layer")
        sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("gen", help="generate a synthetic multi-camera dataset")
    common(sp)

    sp = sub.add_parser("train", help="train a model on a dataset directory")
    common(sp)
    sp.add_argument("--data", required=True)
    arch_flags(sp)
    sp.add_argument("--supervision", choices=["full", "weak"])

    for name, text in (("eval", "estimate test statistics and evaluate a checkpoint"),
                       ("sweep-nbatches", "repeat estimation and evaluation for several N")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--batch-size", type=int)
        if name == "eval":
            sp.add_argument("--adapt", choices=[m for m in ADAPT_MODES])
            sp.add_argument("--nbatches", type=int)
            sp.add_argument("--per-camera", action="store_true")
        else:
            sp.add_argument("--values", type=_ints, help="comma-separated N values")
            sp.add_argument("--repeats", type=int)

    sp = sub.add_parser("incremental", help="train over a dataset sequence and report retention")
    common(sp)
    sp.add_argument("--data", nargs="+", help="dataset directories in sequence order (default: preset)")
    arch_flags(sp)
    sp.add_argument("--mode", choices=["replay", "datafree"])
    sp.add_argument("--no-warmup", action="store_true")
    return p


def overrides_from_args(args):
    o = {}
    if args.seed is not None:
        o["seed"] = args.seed
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if args.command == "gen" and args.seed is not None:
        o["data_seed"] = args.seed
    if get("norm"):
        o["_norm"] = get("norm")
    if get("norm_mask"):
        o["arch"] = {"norms": ["cbn" if b else "bn" for b in get("norm_mask")]}
    train = {}
    if get("epochs") is not None:
        train["epochs"] = get("epochs")
    if get("supervision"):
        train["supervision"] = get("supervision")
    if train:
        o["train"] = train
    est = {}
    if get("nbatches") is not None:
        est["n_batches"] = get("nbatches")
    if get("batch_size") is not None:
        est["batch_size"] = get("batch_size")
    if est:
        o["estimation"] = est
    ev = {}
    if get("adapt"):
        ev["adapt"] = get("adapt")
    if get("per_camera"):
        ev["per_camera"] = True
    if ev:
        o["eval"] = ev
    inc = {}
    if get("mode"):
        inc["mode"] = get("mode")
    if get("no_warmup"):
        inc["warmup"] = False
    if inc:
        o["incremental"] = inc
    sw = {}
    if get("values"):
        sw["values"] = get("values")
    if get("repeats") is not None:
        sw["repeats"] = get("repeats")
    if sw:
        o["sweep"] = sw
    return o


def config_from_args(args):
    file_cfg = load_config_file(args.config) if args.config else {}
    o = overrides_from_args(args)
    norm = o.pop("_norm", None)
    data_seed = o.pop("data_seed", None)
    cfg = resolve_config(args.preset, file_cfg, o)
    if norm:
        cfg["arch"]["norms"] = [norm] * len(cfg["arch"]["widths"])
    if data_seed is not None:
        for i, d in enumerate(cfg["data"]):
            d["seed"] = data_seed + i
    validate(cfg)
    return cfg


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = config_from_args(args)
    if args.command == "gen":
        written = cmd_gen(cfg, args.out, args.force)
        print("wrote " + ", ".join(os.path.normpath(os.path.join(args.out, w)) for w in written))
    elif args.command == "train":
        _, run_log = cmd_train(cfg, args.data, args.out, args.force)
        last = run_log[-1]["mean_loss"] if run_log else None
        print(f"trained {len(run_log)} epochs, final loss {last}")
    elif args.command == "eval":
        r = cmd_eval(cfg, args.checkpoint, args.data, args.out, args.force)
        print(f"Rank-1 {100 * r.rank1:.2f}  Rank-5 {100 * r.rank5:.2f}  Rank-10 {100 * r.rank10:.2f}  "
              f"mAP {100 * r.mAP:.2f}  ({r.n_queries} queries, {r.n_excluded} excluded)")
    elif args.command == "sweep-nbatches":
        rows = cmd_sweep(cfg, args.checkpoint, args.data, args.out, args.force)
        for r in rows:
            print(f"N={r['N']:<3d} mean mAP {r['mean_mAP']:.3f}  var {r['var_mAP']:.4f}")
    else:
        report = cmd_incremental(cfg, args.data or cfg.get("data_paths"), args.out, args.force)
        for s, stage in enumerate(report["stages"]):
            print(f"stage {s + 1} ({stage['dataset']}): retention Rank-1 {report['retention']['rank1'][s]:.3f} "
                  f"mAP {report['retention']['mAP'][s]:.3f}")
    return 0


def main(argv=None):
    try:
        return run(argv)
    except CamNormError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
