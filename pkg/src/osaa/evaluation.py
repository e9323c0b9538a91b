"""Test-time prediction, multi-seed experiments and the two sweep harnesses.

Sweep cells are independent. Each cell derives its seeds from the base seed
and its own coordinates, so a cell's result does not depend on which other
cells run, in what order, or in which process.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .data import DomainDataset, apply_zscore, split_dataset, zscore_stats
from .metrics import RunMetrics, aggregate
from .networks import OSAANetworks
from .trainer import ConfigError, NumericDivergence, TrainConfig, TrainResult, train, train_source_only

MODES = ("osaa", "source-only")
SWEEP_COLUMNS = ("axis", "p_source", "p_intermediate", "lambda1", "lambda2", "mean", "std", "micro_mean",
                 "status", "config_hash", "n_seeds", "per_seed_f1")


def predict(nets: OSAANetworks, test: DomainDataset, batch_size: int = 256) -> np.ndarray:
    """Eval-mode argmax of the classifier logits; the lowest class id wins exact ties."""
    if test.m != nets.signal_length:
        raise ValueError(f"test signals have length m={test.m} but the encoder was trained on "
                         f"m={nets.signal_length}")
    return nets.predict_logits(test.signals, batch_size).argmax(axis=1)


def evaluate(nets: OSAANetworks, test: DomainDataset, seed: int = 0) -> RunMetrics:
    if not test.labeled:
        raise ValueError("evaluation needs a labeled dataset")
    return RunMetrics.score(seed, predict(nets, test), test.labels, test.n_classes)


def prepare_domains(source: DomainDataset, target: DomainDataset, config: TrainConfig):
    """Split the target and standardise each domain with its own training statistics.

    Returns ``(source, target_train, target_test, target_stats)``; the target
    training rows are stripped of labels.
    """
    if source.m != target.m:
        raise ValueError(f"source length m={source.m} differs from target length m={target.m}")
    target_train, target_test = split_dataset(target, config.test_fraction, config.split_seed)
    s_stats, t_stats = zscore_stats(source), zscore_stats(target_train)
    return (apply_zscore(source, *s_stats), apply_zscore(target_train, *t_stats).unlabeled(),
            apply_zscore(target_test, *t_stats), t_stats)


def run_one(config: TrainConfig, source: DomainDataset, target: DomainDataset, mode: str = "osaa",
            record_masks: bool = False, progress=None) -> TrainResult:
    """Train one seed on ``source`` and the training part of ``target``; score the held-out part."""
    if mode not in MODES:
        raise ConfigError(f"mode: expected one of {list(MODES)}, got {mode!r}")
    source, target_train, target_test, t_stats = prepare_domains(source, target, config)
    if mode == "source-only":
        res = train_source_only(config, source, target_test, progress=progress)
    else:
        res = train(config, source, target_train, target_test, record_masks=record_masks, progress=progress)
    res.networks.input_norm = t_stats
    return res


def evaluate_raw(nets: OSAANetworks, data: DomainDataset, seed: int = 0) -> RunMetrics:
    """Score unnormalised signals using the statistics stored with the networks."""
    return evaluate(nets, apply_zscore(data, *nets.input_norm), seed)


@dataclass
class ExperimentResult:
    scenario: str
    config: TrainConfig
    mode: str
    runs: list[RunMetrics] = field(default_factory=list)

    @property
    def seeds(self) -> list[int]:
        return [r.seed for r in self.runs]

    def summary(self) -> dict:
        return aggregate([r.macro_f1 for r in self.runs])

    def document(self) -> dict:
        """Results JSON: per-seed scores, their aggregate and per-class means."""
        summ = self.summary()
        per_class = {}
        for key in ("precision", "recall", "f1"):
            rows = [r.per_class[key] for r in self.runs if key in r.per_class]
            if rows:
                per_class[key] = np.mean(np.array(rows), axis=0).tolist()
        return {"scenario": self.scenario, "mode": self.mode, "config_hash": self.config.config_hash(),
                "seeds": self.seeds, "per_seed_f1": [r.macro_f1 for r in self.runs],
                "per_seed_micro_f1": [r.micro_f1 for r in self.runs],
                "mean": summ["mean"], "std": summ["std"], "per_class": per_class}


def run_seeds(config: TrainConfig, source: DomainDataset, target: DomainDataset, seeds: Sequence[int],
              mode: str = "osaa", scenario: str = "", on_run: Optional[Callable[[TrainResult], None]] = None
              ) -> ExperimentResult:
    """One training run per seed; ``on_run`` sees each finished run (checkpointing, traces)."""
    if not seeds:
        raise ValueError("run_seeds needs at least one seed")
    result = ExperimentResult(scenario or source.name, config, mode)
    for s in seeds:
        res = run_one(replace(config, seed=int(s)), source, target, mode)
        if on_run is not None:
            on_run(res)
        result.runs.append(res.metrics)
    return result


# ---------------------------------------------------------------- sweeps

def cell_seed(base_seed: int, coords: dict, replicate: int = 0) -> int:
    blob = json.dumps({"base": int(base_seed), "cell": coords, "rep": int(replicate)}, sort_keys=True)
    return int.from_bytes(hashlib.sha256(blob.encode()).digest()[:4], "little") & 0x7FFFFFFF


@dataclass(frozen=True)
class SweepCell:
    axis: str
    overrides: tuple[tuple[str, float], ...]

    @property
    def coords(self) -> dict:
        return {"axis": self.axis, **dict(self.overrides)}

    def config(self, base: TrainConfig) -> TrainConfig:
        return replace(base, **dict(self.overrides))

    def key(self, base: TrainConfig) -> tuple:
        cfg = self.config(base)
        return (self.axis, _fmt(cfg.keep_portions()["source"]), _fmt(cfg.keep_portions()["intermediate"]),
                _fmt(cfg.lambda1), _fmt(cfg.lambda2))


def _fmt(v: float) -> str:
    return repr(float(v))


def keep_portion_cells(grid_source: Iterable[float], grid_intermediate: Iterable[float]) -> list[SweepCell]:
    grid_intermediate = list(grid_intermediate)
    return [SweepCell("keep", (("keep_source", float(ps)), ("keep_intermediate", float(pm))))
            for ps in grid_source for pm in grid_intermediate]


def loss_weight_cells(lambda1_grid: Iterable[float], lambda2_grid: Iterable[float],
                      lambda1_fixed: float = 1.0, lambda2_fixed: float = 0.3) -> list[SweepCell]:
    """One row per value on each axis; the other weight is held at its fixed value."""
    cells = [SweepCell("lambda1", (("lambda1", float(v)), ("lambda2", lambda2_fixed))) for v in lambda1_grid]
    cells += [SweepCell("lambda2", (("lambda1", lambda1_fixed), ("lambda2", float(v)))) for v in lambda2_grid]
    return cells


def run_cell(cell: SweepCell, base: TrainConfig, source: DomainDataset, target: DomainDataset,
             n_seeds: int) -> dict:
    """Train one sweep cell over its derived seeds. Divergence is recorded, not raised."""
    cfg = cell.config(base)
    axis, p_s, p_m, l1, l2 = cell.key(base)
    row = {"axis": axis, "p_source": p_s, "p_intermediate": p_m, "lambda1": l1, "lambda2": l2,
           "config_hash": cfg.config_hash(), "n_seeds": n_seeds}
    seeds = [cell_seed(base.seed, cell.coords, i) for i in range(n_seeds)]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            exp = run_seeds(cfg, source, target, seeds, "osaa")
    except NumericDivergence as exc:
        return {**row, "mean": "nan", "std": "nan", "micro_mean": "nan",
                "status": f"diverged: {exc.term} at step {exc.step}", "per_seed_f1": ""}
    summ = exp.summary()
    return {**row, "mean": _fmt(summ["mean"]), "std": _fmt(summ["std"]),
            "micro_mean": _fmt(float(np.mean([r.micro_f1 for r in exp.runs]))), "status": "ok",
            "per_seed_f1": ";".join(_fmt(r.macro_f1) for r in exp.runs)}


def _row_key(row: dict) -> tuple:
    return (row["axis"], row["p_source"], row["p_intermediate"], row["lambda1"], row["lambda2"],
            row["config_hash"], str(row["n_seeds"]))


def read_sweep_csv(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        if tuple(reader.fieldnames) != SWEEP_COLUMNS:
            raise ValueError(f"{path} has columns {reader.fieldnames}, expected {list(SWEEP_COLUMNS)}")
        return list(reader)


def run_sweep(cells: Sequence[SweepCell], base: TrainConfig, source: DomainDataset, target: DomainDataset,
              n_seeds: int = 1, csv_path: Optional[str | Path] = None, jobs: int = 1,
              progress: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Run every cell not already present in ``csv_path`` and append its row.

    Rows already in the file with matching coordinates, config hash and seed
    count are reused, so an interrupted sweep resumes where it stopped. The
    returned rows follow the order of ``cells``.
    """
    if n_seeds < 1:
        raise ValueError(f"n_seeds must be >= 1, got {n_seeds}")
    done = {_row_key(r): r for r in read_sweep_csv(csv_path)} if csv_path else {}
    pending = []
    for cell in cells:
        probe = dict(zip(("axis", "p_source", "p_intermediate", "lambda1", "lambda2"), cell.key(base)))
        probe.update(config_hash=cell.config(base).config_hash(), n_seeds=n_seeds)
        if _row_key(probe) not in done:
            pending.append(cell)

    fh = writer = None
    if csv_path:
        csv_path = Path(csv_path)
        fresh = not csv_path.exists() or csv_path.stat().st_size == 0
        fh = csv_path.open("a", newline="")
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        if fresh:
            writer.writeheader()
            fh.flush()
    try:
        if jobs > 1 and len(pending) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(run_cell, c, base, source, target, n_seeds) for c in pending]
                results = (f.result() for f in futures)
                _collect(results, done, writer, fh, progress)
        else:
            _collect((run_cell(c, base, source, target, n_seeds) for c in pending), done, writer, fh, progress)
    finally:
        if fh is not None:
            fh.close()

    out = []
    for cell in cells:
        probe = dict(zip(("axis", "p_source", "p_intermediate", "lambda1", "lambda2"), cell.key(base)))
        probe.update(config_hash=cell.config(base).config_hash(), n_seeds=n_seeds)
        out.append(done[_row_key(probe)])
    return out


def _collect(results, done, writer, fh, progress) -> None:
    for row in results:
        row = {k: str(v) for k, v in row.items()}
        done[_row_key(row)] = row
        if writer is not None:
            writer.writerow(row)
            fh.flush()
        if progress:
            progress(row)


def sweep_keep_portion(grid_source: Sequence[float], grid_intermediate: Sequence[float], config: TrainConfig,
                       source: DomainDataset, target: DomainDataset, **kw) -> list[dict]:
    if not config.uses("selection"):
        raise ConfigError("keep-portion sweep needs selection enabled; drop 'selection' from ablate")
    for p in (*grid_source, *grid_intermediate):
        if not 0 <= p <= 100:
            raise ConfigError(f"keep-portion grid value {p} outside [0, 100]")
    return run_sweep(keep_portion_cells(grid_source, grid_intermediate), config, source, target, **kw)


def sweep_loss_weights(lambda1_grid: Sequence[float], lambda2_grid: Sequence[float], config: TrainConfig,
                       source: DomainDataset, target: DomainDataset, **kw) -> list[dict]:
    for v in (*lambda1_grid, *lambda2_grid):
        if v < 0 or not math.isfinite(v):
            raise ConfigError(f"loss-weight grid value {v} must be finite and >= 0")
    return run_sweep(loss_weight_cells(lambda1_grid, lambda2_grid), config, source, target, **kw)
