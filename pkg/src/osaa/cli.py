"""Command-line entry point: gen, train, eval, sweep, gradcheck, replay, convert.

Exit codes: 0 ok, 1 gradient check failed, 2 config error, 3 data error,
4 numeric divergence, 5 internal error. Every command writes only under its
``--out`` directory (``$OSAA_OUT/<command>`` when ``--out`` is omitted).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
import traceback
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .data import DatasetError, SynthSpec, gen_synthetic, load_dataset, save_dataset, split_dataset
from .evaluation import (ExperimentResult, evaluate_raw, loss_weight_cells, keep_portion_cells, run_one,
                         run_sweep)
from .networks import OSAANetworks
from .trainer import ConfigError, NumericDivergence, TrainConfig

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_INTERNAL = 0, 1, 2, 3, 4, 5


class DataError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("OSAA_OUT")
    if not root:
        raise ConfigError("no output directory: pass --out or set OSAA_OUT")
    return Path(root) / command


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: str | Path, what: str, error=ConfigError):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise error(f"{what} {path} not found") from None
    except json.JSONDecodeError as exc:
        raise error(f"{what} {path} is not valid JSON: {exc}") from None


def _load(path: str, domain: str):
    try:
        return load_dataset(path, domain)
    except DatasetError as exc:
        raise DataError(str(exc)) from None


def _config_flag_type(f):
    if f.name == "ablate":
        return lambda s: tuple(x for x in s.split(",") if x)
    if f.name in ("keep_source", "keep_intermediate"):
        return float
    default = f.default
    return type(default) if default is not None and not isinstance(default, tuple) else str


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training configuration (overrides --config)")
    for f in fields(TrainConfig):
        g.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", type=_config_flag_type(f),
                       default=None, metavar=f.name.upper())


def resolve_config(args) -> TrainConfig:
    """Defaults, then the JSON file, then explicit flags."""
    base = {}
    if getattr(args, "config", None):
        base = _read_json(args.config, "config file")
        if not isinstance(base, dict):
            raise ConfigError(f"config file {args.config} must hold a JSON object")
    cfg = TrainConfig.from_dict(base)
    flags = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(TrainConfig)
             if getattr(args, f"cfg_{f.name}", None) is not None}
    return TrainConfig.from_dict({**cfg.to_dict(), **flags})


def _dataset_record(path: str, ds) -> dict:
    return {"path": str(Path(path).resolve()), "hash": ds.content_hash(), "n": ds.n, "m": ds.m}


def _manifest(command: str, argv: Sequence[str], out: Path, config: Optional[TrainConfig] = None, **extra) -> dict:
    man = {"tool": "osaa", "version": __version__, "command": command, "argv": list(argv),
           "out": str(out.resolve()), "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    if config is not None:
        man["config"] = config.to_dict()
        man["config_hash"] = config.config_hash()
    man.update(extra)
    return man


def _check_hashes(manifest: dict, datasets: dict) -> None:
    for name, ds in datasets.items():
        want = manifest.get("datasets", {}).get(name, {}).get("hash")
        if want and want != ds.content_hash():
            raise DataError(f"{name} dataset content changed since the manifest was written")


def parse_grid(text: str) -> list[float]:
    """``"0.03,0.3,3"`` or an inclusive range ``"0:100:25"``."""
    text = text.strip()
    try:
        if ":" in text:
            lo, hi, step = (float(v) for v in text.split(":"))
            if step <= 0:
                raise ConfigError(f"grid step must be positive in {text!r}")
            n = int(np.floor((hi - lo) / step + 1e-9)) + 1
            return [round(lo + i * step, 10) for i in range(n)]
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse grid {text!r}; use '0.03,0.3,3' or 'start:stop:step'") from None
    if not values:
        raise ConfigError("empty grid")
    return values


# ---------------------------------------------------------------- commands

def cmd_gen(args, argv) -> int:
    spec_dict = _read_json(args.spec, "synthetic spec") if args.spec else {}
    if not isinstance(spec_dict, dict):
        raise ConfigError("synthetic spec must be a JSON object")
    try:
        spec = SynthSpec.from_dict(spec_dict)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    errors = spec.validate()
    if errors:
        raise ConfigError("invalid synthetic spec:\n  " + "\n  ".join(errors))
    out = _out_dir(args, "gen")
    source, target = gen_synthetic(spec, np.random.default_rng(args.seed))
    save_dataset(source, out / "source")
    save_dataset(target, out / "target")
    np.save(out / "source_distant.npy", source.distant)
    _write_json(out / "spec.json", {"spec": spec.__dict__, "seed": args.seed,
                                    "distant_detect_accuracy": source.detect_accuracy})
    print(f"wrote {out / 'source'} and {out / 'target'} (m={source.m}, C={source.n_classes}, "
          f"distant detect accuracy {source.detect_accuracy})")
    return EXIT_OK


def _train_run(config: TrainConfig, mode: str, seeds: list[int], source, target, out: Path,
               mask_trace: bool, scenario: str, quiet: bool) -> ExperimentResult:
    result = ExperimentResult(scenario, config, mode)
    _, target_test = split_dataset(target, config.test_fraction, config.split_seed)
    save_dataset(target_test, out / "data" / "target_test")
    for s in seeds:
        cfg = replace(config, seed=s)
        progress = None if quiet else (lambda e, tr, f1, s=s: print(
            f"seed {s} epoch {e + 1}/{cfg.epochs} loss {tr['total'][-1]:.4g}"
            + (f" target F1 {f1[-1]:.4f}" if f1 else ""), flush=True))
        res = run_one(cfg, source, target, mode, record_masks=mask_trace, progress=progress)
        seed_dir = out / f"seed_{s}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        res.networks.save(seed_dir / "checkpoint.osaa")
        _write_json(seed_dir / "metrics.json", res.metrics.to_dict())
        if mask_trace:
            with (seed_dir / "masks.jsonl").open("w") as fh:
                for rec in res.mask_trace:
                    fh.write(json.dumps(rec) + "\n")
        result.runs.append(res.metrics)
    doc = result.document()
    _write_json(out / "results.json", doc)
    print(f"{mode} macro-F1 {doc['mean']:.4f} +/- {doc['std']:.4f} over seeds {seeds}")
    return result


def cmd_train(args, argv) -> int:
    config = resolve_config(args)
    if args.mode not in ("osaa", "source-only"):
        raise ConfigError(f"--mode must be osaa or source-only, got {args.mode!r}")
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    source = _load(args.source, "source")
    target = _load(args.target, "target")
    if not source.labeled:
        raise DataError(f"source dataset {args.source} has no labels")
    if not target.labeled:
        raise DataError(f"target dataset {args.target} needs labels for the held-out evaluation split")
    if source.m != target.m:
        raise DataError(f"source length m={source.m} differs from target length m={target.m}")
    if source.n_classes != target.n_classes:
        raise DataError(f"source has C={source.n_classes} classes, target has C={target.n_classes}")
    seeds = [config.seed + i for i in range(args.seeds)]
    out = _out_dir(args, "train")
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest("train", argv, out, config, mode=args.mode, seeds=seeds, mask_trace=args.mask_trace,
                         datasets={"source": _dataset_record(args.source, source),
                                   "target": _dataset_record(args.target, target)},
                         target_split={"test_fraction": config.test_fraction, "split_seed": config.split_seed})
    _write_json(out / "manifest.json", manifest)
    _train_run(config, args.mode, seeds, source, target, out, args.mask_trace, source.name, args.quiet)
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint {args.checkpoint} not found")
    try:
        nets = OSAANetworks.load(args.checkpoint)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    data = _load(args.data, "target")
    if not data.labeled:
        raise DataError(f"evaluation dataset {args.data} has no labels")
    if data.m != nets.signal_length:
        raise DataError(f"dataset signals have length m={data.m} but the checkpoint encoder expects "
                        f"m={nets.signal_length}")
    metrics = evaluate_raw(nets, data)
    doc = {"checkpoint": str(Path(args.checkpoint).resolve()), "data": _dataset_record(args.data, data),
           "macro_f1": metrics.macro_f1, "micro_f1": metrics.micro_f1, "per_class": metrics.per_class,
           "confusion": metrics.confusion}
    out = Path(args.out) if args.out else _out_dir(args, "eval") / "metrics.json"
    _write_json(out, doc)
    print(f"macro-F1 {metrics.macro_f1:.4f} micro-F1 {metrics.micro_f1:.4f}")
    return EXIT_OK


def cmd_sweep(args, argv) -> int:
    config = resolve_config(args)
    grid = parse_grid(args.grid)
    if args.axis == "keep":
        if not config.uses("selection"):
            raise ConfigError("keep-portion sweep needs selection enabled; drop 'selection' from --ablate")
        grid_m = parse_grid(args.grid_intermediate) if args.grid_intermediate else grid
        for v in grid + grid_m:
            if not 0 <= v <= 100:
                raise ConfigError(f"keep-portion grid value {v} outside [0, 100]")
        cells = keep_portion_cells(grid, grid_m)
    else:
        grid2 = parse_grid(args.grid_lambda2) if args.grid_lambda2 else grid
        for v in grid + grid2:
            if v < 0:
                raise ConfigError(f"loss-weight grid value {v} must be >= 0")
        cells = loss_weight_cells(grid, grid2)
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    source = _load(args.source, "source")
    target = _load(args.target, "target")
    if source.m != target.m or not source.labeled or not target.labeled:
        raise DataError("sweep needs labeled source and target datasets of equal signal length")
    out = _out_dir(args, "sweep")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "manifest.json", _manifest(
        "sweep", argv, out, config, axis=args.axis, grid=[c.coords for c in cells], n_seeds=args.seeds,
        datasets={"source": _dataset_record(args.source, source), "target": _dataset_record(args.target, target)}))
    csv_path = out / "sweep.csv"
    progress = None if args.quiet else (lambda row: print(
        f"{row['axis']} p_S={row['p_source']} p_M={row['p_intermediate']} l1={row['lambda1']} "
        f"l2={row['lambda2']}: {row['status']} mean {row['mean']}", flush=True))
    rows = run_sweep(cells, config, source, target, n_seeds=args.seeds, csv_path=csv_path, jobs=args.jobs,
                     progress=progress)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} cells in {csv_path} ({failed} diverged)")
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    from . import gradchecks

    scopes = gradchecks.SCOPES if args.scope == "all" else (args.scope,)
    selected = [it for sc in scopes for it in gradchecks.items(sc)]
    if args.negative_control:
        selected.append(gradchecks.NEGATIVE_CONTROL)
    failed = []
    lines = []
    for item in selected:
        reports = [item.run(seed) for seed in range(args.seeds)]
        worst = max(r.max_rel_err for r in reports)
        bad = [r for r in reports if not r.passed]
        kinks = sum(len(r.near_kink) for r in reports)
        status = "FAIL" if bad else "PASS"
        line = (f"{status} [{item.scope}] {item.name}: max rel err {worst:.3e} over {args.seeds} seeds"
                + (f", {kinks} elements skipped near kinks" if kinks else ""))
        lines.append(line)
        print(line, flush=True)
        if bad:
            failed.append(item.name)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}")
        return EXIT_CHECK
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    """Re-execute a train or sweep run from its manifest into a new directory."""
    manifest = _read_json(args.manifest, "manifest", DataError)
    command = manifest.get("command")
    if command not in ("train", "sweep"):
        raise ConfigError(f"manifest command {command!r} cannot be replayed")
    config = TrainConfig.from_dict(manifest["config"])
    ds = manifest["datasets"]
    source = _load(ds["source"]["path"], "source")
    target = _load(ds["target"]["path"], "target")
    _check_hashes(manifest, {"source": source, "target": target})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "manifest.json", {**manifest, "out": str(out.resolve()), "replayed_from": args.manifest,
                                        "created": time.strftime("%Y-%m-%dT%H:%M:%S")})
    if command == "train":
        _train_run(config, manifest["mode"], manifest["seeds"], source, target, out,
                   manifest.get("mask_trace", False), source.name, args.quiet)
    else:
        if manifest["axis"] == "keep":
            cells = keep_portion_cells(sorted({c["keep_source"] for c in manifest["grid"]}),
                                       sorted({c["keep_intermediate"] for c in manifest["grid"]}))
        else:
            cells = loss_weight_cells([c["lambda1"] for c in manifest["grid"] if c["axis"] == "lambda1"],
                                      [c["lambda2"] for c in manifest["grid"] if c["axis"] == "lambda2"])
        run_sweep(cells, config, source, target, n_seeds=manifest["n_seeds"], csv_path=out / "sweep.csv")
    return EXIT_OK


CONVERT_HELP = """\
Window raw bearing recordings into the dataset directory format.

Downloading the recordings is out of scope; this command documents the layout
a converter must produce and checks an existing directory against it.

  meta.json    {"n": N, "m": m, "c": C, "dtype": "f32le", "labeled": true, "name": "..."}
  signals.bin  N*m little-endian float32 values, row-major
  labels.bin   N uint8 class ids (labeled datasets only)

Paderborn (PU): 64 kHz vibration channel, non-overlapping windows of m=5120
samples; one class per bearing damage type (healthy, inner race, outer race).
Artificial-damage bearings form the source domain, real-damage bearings the
target domain.

CWRU: drive-end accelerometer, non-overlapping windows of m=1024 samples; one
class per fault location, with the motor-load setting (0-3 hp) defining the
domain.

Keep the raw amplitude; training standardises every domain with its own
training-split statistics.
"""


def cmd_convert(args, argv) -> int:
    if args.check:
        ds = _load(args.check, "source")
        print(f"{args.check}: n={ds.n} m={ds.m} C={ds.n_classes} labeled={ds.labeled}")
        return EXIT_OK
    print(CONVERT_HELP)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="osaa", description="Online selective adversarial alignment toolkit")
    p.add_argument("--version", action="version", version=f"osaa {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic source/target domains")
    g.add_argument("--spec", help="SynthSpec JSON file (defaults when omitted)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train OSAA or the source-only baseline over several seeds")
    t.add_argument("--source", required=True)
    t.add_argument("--target", required=True)
    t.add_argument("--config", help="TrainConfig JSON; flags override its values")
    t.add_argument("--mode", default="osaa", choices=("osaa", "source-only"))
    t.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds starting at --seed")
    t.add_argument("--mask-trace", action="store_true", help="write per-step kept/dropped rows")
    t.add_argument("--quiet", action="store_true")
    t.add_argument("--out")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a labeled dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="metrics JSON path")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="keep-portion or loss-weight sweep")
    s.add_argument("--axis", required=True, choices=("keep", "weights"))
    s.add_argument("--grid", required=True, help="'a,b,c' or 'start:stop:step'")
    s.add_argument("--grid-intermediate", help="keep axis: intermediate grid (defaults to --grid)")
    s.add_argument("--grid-lambda2", help="weights axis: lambda2 grid (defaults to --grid)")
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--config")
    s.add_argument("--seeds", type=int, default=1, help="seeds per cell")
    s.add_argument("--jobs", type=int, default=1, help="cells trained in parallel processes")
    s.add_argument("--quiet", action="store_true")
    s.add_argument("--out")
    _add_config_flags(s)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("gradcheck", help="finite-difference checks of ops, losses and network chains")
    c.add_argument("--scope", default="all", choices=("ops", "networks", "losses", "all"))
    c.add_argument("--seeds", type=int, default=10)
    c.add_argument("--negative-control", action="store_true", help="also run a deliberately wrong op")
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("replay", help="re-run a train or sweep manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=cmd_replay)

    v = sub.add_parser("convert", help="dataset format notes for PU/CWRU recordings",
                       formatter_class=argparse.RawDescriptionHelpFormatter, description=CONVERT_HELP)
    v.add_argument("--check", help="validate an existing dataset directory")
    v.set_defaults(func=cmd_convert)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericDivergence as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
