"""``cdinet`` command line: gen-data, train, eval, recon, sweep.

Settings come from an optional JSON config (``--config``) whose sections are
overridden by command-line flags. Every run writes ``run.json`` next to its
outputs. Exit codes: 0 ok, 1 runtime failure, 2 usage/config error; failures
print a single ``error: <kind>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from contextlib import nullcontext
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .phantom import Dataset, DatasetConfig, build_dataset, canonical_hash
from .tensorio import read_tensor, write_tensor

CONFIG_SCHEMA = "cdinet-config/1"
SECTIONS = ("dataset", "gen_data", "train", "eval", "sweep")


class UsageError(Exception):
    pass


# ----------------------------------------------------------------- config

def load_config(path):
    if path is None:
        return {"schema": CONFIG_SCHEMA}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc
    return validate_config(cfg)


def validate_config(cfg):
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    if cfg.get("schema") != CONFIG_SCHEMA:
        raise UsageError(f"config schema must be {CONFIG_SCHEMA!r}, got {cfg.get('schema')!r}")
    unknown = set(cfg) - set(SECTIONS) - {"schema"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    for s in SECTIONS:
        if s in cfg and not isinstance(cfg[s], dict):
            raise UsageError(f"config section {s!r} must be an object")
    try:
        dataset_config(cfg)
        train_config(cfg, {})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return cfg


def dataset_config(cfg, dose=None):
    d = DatasetConfig.from_dict(cfg.get("dataset", {}))
    return replace(d, dose_fraction=dose) if dose is not None else d


def train_config(cfg, overrides):
    from .training import TrainConfig

    known = {f.name for f in fields(TrainConfig)}
    section = dict(cfg.get("train", {}))
    bad = set(section) - known
    if bad:
        raise UsageError(f"unknown train config keys: {sorted(bad)}")
    section.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**section)


def _ensure_out(out, force):
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_record(out, args, resolved):
    record = {
        "subcommand": args.command,
        "version": __version__,
        "seed": resolved.get("seed"),
        "deterministic": bool(args.deterministic),
        "config": resolved,
        "config_hash": canonical_hash(resolved),
    }
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str))
    return record


# --------------------------------------------------------------- commands

def cmd_gen_data(args, cfg):
    section = cfg.get("gen_data", {})
    count = args.count if args.count is not None else section.get("count", 40)
    seed = args.seed if args.seed is not None else section.get("seed", 0)
    dcfg = dataset_config(cfg, args.dose)
    path = build_dataset(args.out, count, seed, dcfg, force=args.force)
    ds = Dataset(path)
    write_run_record(args.out, args, {"count": count, "seed": seed, "dataset": dcfg.to_dict()})
    print(f"dataset {args.out} samples={count} manifest_hash={ds.manifest_hash}")


def cmd_train(args, cfg):
    from .training import train

    overrides = {"dataset": args.dataset, "variant": args.variant, "iterations": args.iterations,
                 "epochs": args.epochs, "batch_size": args.batch_size, "seed": args.seed,
                 "base_width": args.base_width, "depth": args.depth}
    tcfg = train_config(cfg, overrides)
    if not tcfg.dataset:
        raise UsageError("no dataset given (--dataset or train.dataset)")
    res = train(tcfg, args.out, force=args.force)
    write_run_record(args.out, args, tcfg.to_dict())
    print(f"checkpoint {res.checkpoint} best_epoch={res.best_epoch} best_loss={res.best_loss!r}")


def cmd_eval(args, cfg):
    from .evaluation import (ReferenceCache, comparison_table, evaluate_baseline, evaluate_method,
                             write_table)
    from .training import load_checkpoint

    section = cfg.get("eval", {})
    dataset = args.dataset or section.get("dataset")
    checkpoints = args.checkpoint or section.get("checkpoints", [])
    if not dataset or not checkpoints:
        raise UsageError("eval needs --dataset and at least one --checkpoint")
    nets = [load_checkpoint(c)[0] for c in checkpoints]  # fail before touching outputs
    out = _ensure_out(args.out, args.force)
    ds = Dataset(dataset)
    refs = ReferenceCache(ds.geometry)
    reports = [evaluate_baseline(ds, args.split, refs)]
    names = args.variant or []
    for i, net in enumerate(nets):
        name = names[i] if i < len(names) else net.cfg.variant
        reports.append(evaluate_method(net, ds, args.split, method=name, references=refs))
    for rep in reports:
        rep.write(out)
    reference = args.reference or reports[1].method
    write_table(comparison_table(reports, reference), out / "table.csv")
    write_run_record(out, args, {"dataset": str(dataset), "dataset_manifest_hash": ds.manifest_hash,
                                 "checkpoints": [str(c) for c in checkpoints], "split": args.split,
                                 "reference": reference, "seed": None})
    print(f"table {out / 'table.csv'}")


def cmd_recon(args, cfg):
    from .tomo import mlem_reconstruct

    geom = dataset_config(cfg).geometry
    sino = read_tensor(args.sino)
    mu = read_tensor(args.mu) if args.mu else None
    out = _ensure_out(args.out, args.force)
    image = mlem_reconstruct(sino, geom, mu, args.iters)
    write_tensor(out / "recon.cdit", image)
    if args.pgm:
        write_pgm(out / "recon.pgm", image)
    write_run_record(out, args, {"sino": str(args.sino), "mu": str(args.mu) if args.mu else None,
                                 "iterations": args.iters, "geometry": geom.to_dict(), "seed": None})
    print(f"recon {out / 'recon.cdit'}")


def cmd_sweep(args, cfg):
    from .evaluation import SweepConfig, sweep

    section = dict(cfg.get("sweep", {}))
    dimension = args.dimension or section.get("dimension")
    values = args.values if args.values is not None else section.get("values")
    if dimension is None or not values:
        raise UsageError("sweep needs --dimension and --values")
    overrides = {"epochs": args.epochs, "seed": args.seed, "base_width": args.base_width}
    tcfg = train_config(cfg, overrides)
    base = SweepConfig(
        count=args.count if args.count is not None else section.get("count", 40),
        base_seed=args.seed if args.seed is not None else section.get("base_seed", 0),
        dataset=dataset_config(cfg),
        train=tcfg,
        methods=tuple(args.methods or section.get("methods", ["full"])),
        max_total_epochs=(args.max_total_epochs if args.max_total_epochs is not None
                          else section.get("max_total_epochs", 200)),
    )
    out = _ensure_out(args.out, args.force)
    path, _ = sweep(dimension, values, base, out, force=args.force)
    write_run_record(out, args, {"dimension": dimension, "values": values, "count": base.count,
                                 "seed": base.base_seed, "methods": list(base.methods),
                                 "max_total_epochs": base.max_total_epochs, "train": tcfg.to_dict(),
                                 "dataset": base.dataset.to_dict()})
    print(f"sweep {path}")


def write_pgm(path, image):
    """8-bit binary PGM, linearly scaled to the image maximum."""
    img = np.asarray(image, dtype=np.float64)
    peak = img.max()
    scaled = np.zeros(img.shape, np.uint8) if peak <= 0 else np.round(255 * np.clip(img, 0, None) / peak).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(scaled.tobytes())


# ----------------------------------------------------------------- parser

def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated number list: {text!r}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--deterministic", action="store_true", help="pin all math libraries to one thread")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cdinet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="simulate a paired dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--dose", type=float, help="dose fraction in (0, 1]")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one network variant")
    t.add_argument("--dataset")
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=["full", "no_ci_dc", "no_cd_rc", "no_awr", "separate_unet"])
    t.add_argument("--iterations", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--base-width", type=int)
    t.add_argument("--depth", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate checkpoints on a dataset split")
    e.add_argument("--dataset")
    e.add_argument("--checkpoint", action="append", help="checkpoint directory (repeatable)")
    e.add_argument("--variant", action="append", help="method label for the matching --checkpoint")
    e.add_argument("--split", default="test")
    e.add_argument("--reference", help="method used for p-values (default: first checkpoint)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("recon", parents=[common], help="ML-EM reconstruction of a sinogram file")
    r.add_argument("--sino", required=True)
    r.add_argument("--mu")
    r.add_argument("--iters", type=int, default=30)
    r.add_argument("--pgm", action="store_true", help="also write an 8-bit PGM preview")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_recon)

    s = sub.add_parser("sweep", parents=[common], help="iteration or dose sweep")
    s.add_argument("--dimension", choices=["iterations", "dose"])
    s.add_argument("--values", type=_float_list)
    s.add_argument("--count", type=int, help="samples per generated dataset")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--base-width", type=int)
    s.add_argument("--methods", nargs="+")
    s.add_argument("--max-total-epochs", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def _thread_limit(deterministic):
    limit = 1 if deterministic else None
    env = os.environ.get("CDI_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"CDI_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise UsageError("CDI_THREADS must be >= 1")
        limit = 1 if deterministic else n
    if limit is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


def _fail(kind, message, code):
    print(f"error: {kind}: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        with _thread_limit(args.deterministic):
            args.func(args, cfg)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except FileNotFoundError as exc:
        return _fail("not_found", exc, 1)
    except FileExistsError as exc:
        return _fail("exists", exc, 1)
    except (ValueError, RuntimeError, KeyError, OSError) as exc:
        return _fail(type(exc).__name__, exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
