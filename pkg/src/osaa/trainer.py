"""Training loop for online selective adversarial alignment and its baselines.

One step encodes, classifies, discriminates and reconstructs the source,
intermediate and target batches, masks the source and intermediate loss terms
with the online selection, and applies one AdamW update to every network
after a single backward pass. The encoder/discriminator min-max is realised by
a gradient-reversal layer with coefficient ``lambda2``: the discriminator
descends its binary cross-entropy while the encoder and classifier ascend it.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .autodiff import Tensor, softmax
from .data import DomainDataset, batch_iter, build_intermediate
from .losses import classification_loss, cross_entropy, discriminator_loss, reconstruction_loss
from .metrics import RunMetrics, macro_f1
from .networks import OSAANetworks
from .selection import SelectionMask, selection_step

ABLATIONS = ("selection", "intermediate", "discriminator")
PRECISIONS = {"float32": np.float32, "float64": np.float64}

# stream keys for np.random.default_rng([seed, key])
_INTERMEDIATE_KEY = 20
_BATCH_KEY = 21


class ConfigError(ValueError):
    pass


class NumericDivergence(RuntimeError):
    """A loss term became NaN or infinite."""

    def __init__(self, term: str, step: int):
        super().__init__(f"non-finite {term} at step {step}")
        self.term, self.step = term, step


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 64
    epochs: int = 20
    keep_portion: float = 50.0
    keep_source: Optional[float] = None
    keep_intermediate: Optional[float] = None
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda_recon: float = 1.0
    seed: int = 0
    precision: str = "float32"
    ablate: tuple[str, ...] = ()
    conditioning: str = "concat"
    channels: int = 64
    kernel: int = 9
    dropout: float = 0.4
    feature_dim: int = 128
    hidden: int = 128
    test_fraction: float = 0.2
    split_seed: int = 0

    def __post_init__(self):
        self.ablate = tuple(sorted(set(self.ablate)))
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        for name in ("lambda1", "lambda2", "lambda_recon", "lr", "weight_decay"):
            if getattr(self, name) < 0:
                out.append(f"{name}: must be >= 0, got {getattr(self, name)}")
        for name in ("keep_portion", "keep_source", "keep_intermediate"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 100:
                out.append(f"{name}: must lie in [0, 100], got {v}")
        if self.batch_size < 2:
            out.append(f"batch_size: must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            out.append(f"epochs: must be >= 0, got {self.epochs}")
        if self.precision not in PRECISIONS:
            out.append(f"precision: expected one of {sorted(PRECISIONS)}, got {self.precision!r}")
        bad = sorted(set(self.ablate) - set(ABLATIONS))
        if bad:
            out.append(f"ablate: unknown components {bad}; expected a subset of {list(ABLATIONS)}")
        if self.conditioning not in ("concat", "outer"):
            out.append(f"conditioning: expected 'concat' or 'outer', got {self.conditioning!r}")
        if not 0 <= self.dropout < 1:
            out.append(f"dropout: must lie in [0, 1), got {self.dropout}")
        if not 0 < self.test_fraction < 1:
            out.append(f"test_fraction: must lie in (0, 1), got {self.test_fraction}")
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        d = dict(d)
        if "ablate" in d:
            d["ablate"] = tuple(d["ablate"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablate"] = list(self.ablate)
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def uses(self, component: str) -> bool:
        return component not in self.ablate

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def keep_portions(self) -> dict[str, float]:
        if not self.uses("selection"):
            return {"source": 100.0, "intermediate": 100.0}
        return {"source": self.keep_portion if self.keep_source is None else self.keep_source,
                "intermediate": self.keep_portion if self.keep_intermediate is None else self.keep_intermediate}

    def build_networks(self, signal_length: int, n_classes: int, decoder: bool = True,
                       discriminator: bool = True) -> OSAANetworks:
        return OSAANetworks(signal_length, n_classes, channels=self.channels, kernel=self.kernel,
                            p_drop=self.dropout, feature_dim=self.feature_dim, hidden=self.hidden,
                            conditioning=self.conditioning, seed=self.seed, dtype=self.dtype,
                            with_decoder=decoder, with_discriminator=discriminator and self.uses("discriminator"))


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def adam_update(params: dict[str, Tensor], grads: dict[str, Optional[np.ndarray]], state: OptimizerState,
                lr: Optional[float] = None, weight_decay: Optional[float] = None) -> None:
    """One bias-corrected adaptive-moment step with decoupled weight decay, in place.

    Parameters whose gradient is ``None`` are left untouched.
    """
    lr = state.lr if lr is None else lr
    wd = state.weight_decay if weight_decay is None else weight_decay
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m, v = state.moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.moments[name] = (m, v)
        dtype = p.data.dtype
        if wd:
            p.data = p.data * dtype.type(1.0 - lr * wd)
        step = (m / dtype.type(c1)) / (np.sqrt(v / dtype.type(c2)) + dtype.type(state.eps))
        p.data = p.data - dtype.type(lr) * step


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float):
        self.params = params
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay)

    def step(self) -> None:
        adam_update(self.params, {k: p.grad for k, p in self.params.items()}, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------- one step

@dataclass
class StepReport:
    recon: float
    task: float
    disc: float
    total: float
    kept: dict[str, int]
    masks: dict[str, SelectionMask]


def _check_finite(name: str, t: Tensor, step: int) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericDivergence(name, step)


def step_objective(batches: dict[str, tuple[np.ndarray, Optional[np.ndarray]]], nets: OSAANetworks,
                   config: TrainConfig, step: int = 0):
    """Forward pass and masked objective for one aligned batch triple.

    ``batches`` maps ``source``/``intermediate``/``target`` to ``(x, y)`` with
    ``x`` shaped ``[B, m]``; only the source carries labels. Returns the
    objective tensor, the per-term tensors and the masks.
    """
    dtype = config.dtype
    h, idx, logits, x_in = {}, {}, {}, {}
    for d, (x, _) in batches.items():
        x_in[d] = Tensor(np.asarray(x, dtype=dtype)[:, None, :])
        h[d], idx[d] = nets.encoder(x_in[d])
    for d in batches:
        logits[d] = nets.classifier(h[d])
    disc = None
    if nets.discriminator is not None:
        d_s = nets.discriminator(h["source"], softmax(logits["source"], axis=1), config.lambda2)
        d_t = nets.discriminator(h["target"], softmax(logits["target"], axis=1), config.lambda2)
    recon = {}
    for d in batches:
        x_hat = nets.decoder(h[d], idx[d])
        recon[d], _ = reconstruction_loss(x_hat, x_in[d])
    task_per, _ = classification_loss(logits["source"], batches["source"][1], logits.get("intermediate"),
                                      logits.get("target"))
    if nets.discriminator is not None:
        disc = discriminator_loss(d_s, d_t)

    keep = {d: p for d, p in config.keep_portions().items() if d in batches}
    masks, totals = selection_step(recon, task_per, keep)
    recon_total = None
    task_total = None
    for d in batches:
        r, c = totals[d]
        recon_total = r if recon_total is None else recon_total + r
        task_total = c if task_total is None else task_total + c
    _check_finite("reconstruction loss", recon_total, step)
    _check_finite("classification loss", task_total, step)
    objective = recon_total * config.lambda_recon + task_total * config.lambda1
    if disc is not None:
        _check_finite("discriminator loss", disc, step)
        # the discriminator minimises -L_D; grad_reverse hands -lambda2 times that to the encoder
        objective = objective - disc
    _check_finite("objective", objective, step)
    terms = {"recon": recon_total, "task": task_total, "disc": disc, "recon_per": recon, "task_per": task_per}
    return objective, terms, masks


def train_step(batches, nets: OSAANetworks, config: TrainConfig, opt: Adam, step: int = 0) -> StepReport:
    opt.zero_grad()
    objective, terms, masks = step_objective(batches, nets, config, step)
    objective.backward()
    opt.step()
    return StepReport(recon=terms["recon"].item(), task=terms["task"].item(),
                      disc=terms["disc"].item() if terms["disc"] is not None else float("nan"),
                      total=objective.item(), kept={d: m.n_kept for d, m in masks.items()}, masks=masks)


# ---------------------------------------------------------------- full runs

@dataclass
class TrainResult:
    networks: OSAANetworks
    metrics: RunMetrics
    intermediate: Optional[DomainDataset] = None
    mask_trace: list[dict] = field(default_factory=list)


def _evaluate(nets: OSAANetworks, test: Optional[DomainDataset]):
    if test is None or not test.labeled:
        return None
    return nets.predict_logits(test.signals).argmax(axis=1)


def train(config: TrainConfig, source: DomainDataset, target: DomainDataset,
          target_test: Optional[DomainDataset] = None, record_masks: bool = False,
          progress=None) -> TrainResult:
    """Run the full alternating-free training loop; returns the trained networks and metrics.

    ``target`` is used without labels. ``target_test`` (labeled) is only read
    by the evaluation at the end of each epoch.
    """
    if not source.labeled:
        raise ValueError("source dataset must be labeled")
    if source.m != target.m:
        raise ValueError(f"source length m={source.m} differs from target length m={target.m}")
    target = target.unlabeled()
    nets = config.build_networks(source.m, source.n_classes)
    opt = Adam(nets.parameters(), config.lr, config.weight_decay)
    data = {"source": source, "target": target}
    interm = None
    if config.uses("intermediate"):
        interm = build_intermediate(source, target, np.random.default_rng([config.seed, _INTERMEDIATE_KEY]))
        data = {"source": source, "intermediate": interm, "target": target}
    batch_rng = np.random.default_rng([config.seed, _BATCH_KEY])
    traces = {k: [] for k in ("recon", "task", "disc", "total")}
    kept = {d: [] for d in data if d != "target"}
    epoch_f1 = []
    mask_trace = []
    step = 0
    for epoch in range(config.epochs):
        sums = dict.fromkeys(traces, 0.0)
        kept_sum = dict.fromkeys(kept, 0)
        n_steps = 0
        for rows in batch_iter({d: ds.n for d, ds in data.items()}, config.batch_size, batch_rng):
            batches = {d: (data[d].signals[r], data[d].labels[r] if d == "source" else None)
                       for d, r in rows.items()}
            rep = train_step(batches, nets, config, opt, step)
            for k in traces:
                sums[k] += getattr(rep, k)
            for d in kept:
                kept_sum[d] += rep.kept.get(d, len(rows[d]))
            if record_masks:
                mask_trace.append({"epoch": epoch, "step": step,
                                   **{d: {"rows": rows[d].tolist(), "keep": m.keep.astype(int).tolist()}
                                      for d, m in rep.masks.items()}})
            n_steps += 1
            step += 1
        for k in traces:
            traces[k].append(sums[k] / max(n_steps, 1))
        for d in kept:
            kept[d].append(kept_sum[d] / max(n_steps, 1))
        if target_test is not None and target_test.labeled:
            epoch_f1.append(_target_f1(nets, target_test))
        if progress:
            progress(epoch, traces, epoch_f1)
    metrics = _final_metrics(config.seed, nets, target_test, loss_traces=traces, kept_traces=kept,
                             epoch_f1=epoch_f1)
    return TrainResult(nets, metrics, interm, mask_trace)


def _target_f1(nets: OSAANetworks, test: DomainDataset) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return macro_f1(_evaluate(nets, test), test.labels, test.n_classes)


def _final_metrics(seed, nets, test, **traces) -> RunMetrics:
    pred = _evaluate(nets, test)
    if pred is None:
        return RunMetrics(seed=seed, **traces)
    return RunMetrics.score(seed, pred, test.labels, test.n_classes, **traces)


def train_source_only(config: TrainConfig, source: DomainDataset, target_test: Optional[DomainDataset] = None,
                      progress=None) -> TrainResult:
    """Encoder and classifier trained with source cross-entropy only."""
    if not source.labeled:
        raise ValueError("source dataset must be labeled")
    nets = config.build_networks(source.m, source.n_classes, decoder=False, discriminator=False)
    opt = Adam(nets.parameters(), config.lr, config.weight_decay)
    batch_rng = np.random.default_rng([config.seed, _BATCH_KEY])
    traces = {"task": [], "total": []}
    epoch_f1 = []
    step = 0
    for epoch in range(config.epochs):
        total, n_steps = 0.0, 0
        for rows in batch_iter({"source": source.n}, config.batch_size, batch_rng):
            r = rows["source"]
            opt.zero_grad()
            h, _ = nets.encoder(Tensor(source.signals[r].astype(config.dtype)[:, None, :]))
            loss = cross_entropy(nets.classifier(h), source.labels[r]).sum()
            _check_finite("classification loss", loss, step)
            loss.backward()
            opt.step()
            total += loss.item()
            n_steps += 1
            step += 1
        traces["task"].append(total / max(n_steps, 1))
        traces["total"].append(total / max(n_steps, 1))
        if target_test is not None and target_test.labeled:
            epoch_f1.append(_target_f1(nets, target_test))
        if progress:
            progress(epoch, traces, epoch_f1)
    metrics = _final_metrics(config.seed, nets, target_test, loss_traces=traces, epoch_f1=epoch_f1)
    return TrainResult(nets, metrics)

