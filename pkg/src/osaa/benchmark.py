"""Synthetic benchmark scenarios: the directional comparison and the desk-scale sweeps.

The directional run trains OSAA, the source-only baseline and OSAA without
selection on one generated source/target pair, over several seeds. The sweep
scenario runs both sweep harnesses on a smaller generated pair so the full
grids finish on a laptop.
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import SynthSpec, gen_synthetic
from .evaluation import run_one, sweep_keep_portion, sweep_loss_weights
from .metrics import aggregate
from .trainer import TrainConfig

DIRECTIONAL_SPEC = SynthSpec(n_classes=3, length=512, n_per_domain=600, distant_fraction=0.3, interference_amp=2.0)
# keep 70% drops about as many rows as the generator makes distant; lambda_recon = 1/m puts the
# summed squared reconstruction error on the same footing as the per-sample cross-entropy
DIRECTIONAL_CONFIG = TrainConfig(epochs=20, lr=3e-4, keep_portion=70.0, lambda_recon=1 / 512)
DIRECTIONAL_MODES = ("osaa", "source-only", "no-selection")

SWEEP_SPEC = replace(DIRECTIONAL_SPEC, length=256, n_per_domain=300)
SWEEP_CONFIG = replace(DIRECTIONAL_CONFIG, lambda_recon=1 / 256)
KEEP_GRID = (25.0, 50.0, 75.0)
WEIGHT_GRID = (0.03, 0.3, 3.0, 30.0)


@dataclass
class DirectionalResult:
    seeds: list[int]
    f1: dict[str, list[float]] = field(default_factory=dict)
    seconds: float = 0.0

    def means(self) -> dict[str, float]:
        return {mode: aggregate(v)["mean"] for mode, v in self.f1.items()}

    def margins(self) -> dict[str, float]:
        m = self.means()
        return {"over_source_only": m["osaa"] - m["source-only"], "over_no_selection": m["osaa"] - m["no-selection"]}

    def passed(self, source_only_margin: float = 0.10, no_selection_margin: float = 0.05) -> bool:
        gaps = self.margins()
        return gaps["over_source_only"] >= source_only_margin and gaps["over_no_selection"] >= no_selection_margin

    def to_dict(self) -> dict:
        return {"seeds": self.seeds, "per_seed_f1": self.f1,
                "summary": {mode: aggregate(v) for mode, v in self.f1.items()},
                "margins": self.margins(), "passed": self.passed(), "seconds": self.seconds}


def _mode_run(mode: str, config: TrainConfig, source, target) -> float:
    if mode == "no-selection":
        config, mode = replace(config, ablate=tuple(set(config.ablate) | {"selection"})), "osaa"
    return run_one(config, source, target, mode).metrics.macro_f1


def directional(seeds: Sequence[int] = range(5), spec: SynthSpec = DIRECTIONAL_SPEC,
                config: TrainConfig = DIRECTIONAL_CONFIG, data_seed: int = 0,
                modes: Sequence[str] = DIRECTIONAL_MODES, jobs: Optional[int] = None,
                progress: Optional[Callable[[str, int, float], None]] = None) -> DirectionalResult:
    """Macro-F1 on the held-out target split for every mode and seed.

    Runs are independent, so ``jobs`` worker processes (default: one per CPU)
    train them side by side; scores do not depend on the worker count.
    """
    start = time.perf_counter()
    source, target = gen_synthetic(spec, np.random.default_rng(data_seed))
    runs = [(mode, seed) for seed in seeds for mode in modes]
    jobs = min(jobs or os.cpu_count() or 1, len(runs))
    scores = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_mode_run, mode, replace(config, seed=seed), source, target): (mode, seed)
                       for mode, seed in runs}
            for fut in futures:
                scores[futures[fut]] = fut.result()
                if progress:
                    progress(*futures[fut], scores[futures[fut]])
    else:
        for mode, seed in runs:
            scores[mode, seed] = _mode_run(mode, replace(config, seed=seed), source, target)
            if progress:
                progress(mode, seed, scores[mode, seed])
    res = DirectionalResult(seeds=list(seeds), f1={m: [scores[m, s] for s in seeds] for m in modes})
    res.seconds = time.perf_counter() - start
    return res


@dataclass
class SweepResult:
    keep_rows: list[dict]
    weight_rows: list[dict]
    seconds: float

    @property
    def n_diverged(self) -> int:
        return sum(r["status"] != "ok" for r in self.keep_rows + self.weight_rows)

    def complete(self, keep_grid=KEEP_GRID, weight_grid=WEIGHT_GRID) -> bool:
        # rows may come back from the CSV as strings
        keep_cells = {(float(r["p_source"]), float(r["p_intermediate"])) for r in self.keep_rows}
        weights = {(r["axis"], float(r[r["axis"]])) for r in self.weight_rows}
        return (keep_cells == {(float(a), float(b)) for a in keep_grid for b in keep_grid}
                and weights == {(ax, float(v)) for ax in ("lambda1", "lambda2") for v in weight_grid}
                and all(r["status"] == "ok" or r["status"].startswith("diverged")
                        for r in self.keep_rows + self.weight_rows))


def sweeps(out_dir: str | Path, spec: SynthSpec = SWEEP_SPEC, config: TrainConfig = SWEEP_CONFIG,
           keep_grid: Sequence[float] = KEEP_GRID, weight_grid: Sequence[float] = WEIGHT_GRID,
           data_seed: int = 0, n_seeds: int = 1, jobs: int = 1, progress=None) -> SweepResult:
    """Keep-portion surface and loss-weight sensitivity on the sweep scenario; CSVs land in ``out_dir``."""
    start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source, target = gen_synthetic(spec, np.random.default_rng(data_seed))
    keep_rows = sweep_keep_portion(keep_grid, keep_grid, config, source, target, n_seeds=n_seeds,
                                   csv_path=out / "keep_portion.csv", jobs=jobs, progress=progress)
    weight_rows = sweep_loss_weights(weight_grid, weight_grid, config, source, target, n_seeds=n_seeds,
                                     csv_path=out / "loss_weights.csv", jobs=jobs, progress=progress)
    return SweepResult(keep_rows, weight_rows, time.perf_counter() - start)
