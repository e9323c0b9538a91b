"""Shared builders and oracles for the trainer-level tests and the acceptance gate."""
import numpy as np

from osaa.autodiff import Tensor
from osaa.data import SynthSpec, gen_synthetic
from osaa.trainer import TrainConfig, step_objective

TINY = dict(channels=4, feature_dim=8, hidden=8, batch_size=6, precision="float64")


def tiny_config(**kw) -> TrainConfig:
    return TrainConfig(**{**TINY, **kw})


def toy_batches(rng, B=6, m=80, C=3, domains=("source", "intermediate", "target")):
    return {d: (rng.standard_normal((B, m)), rng.integers(0, C, size=B) if d == "source" else None)
            for d in domains}


def tiny_domains(seed=0, n=60, m=96, **kw):
    spec = SynthSpec(n_classes=3, length=m, n_per_domain=n, **kw)
    return gen_synthetic(spec, np.random.default_rng(seed))


def grads(nets) -> dict:
    return {n: (None if p.grad is None else p.grad.copy()) for n, p in nets.named_parameters()}


def masking_equivalence(seed: int, keep: float = 50.0) -> float:
    """Largest relative gap between loss-zeroing and summed per-sample masked gradients.

    One forward graph is built; the oracle back-propagates every sample's
    weighted loss on its own, multiplies by the mask entry, and adds the
    unmasked adversarial term.
    """
    rng = np.random.default_rng(seed)
    config = tiny_config(keep_portion=keep, seed=seed, lambda1=float(rng.uniform(0.1, 3)),
                         lambda2=float(rng.uniform(0.1, 3)), lambda_recon=float(rng.uniform(0.1, 3)))
    nets = config.build_networks(80, 3)
    batches = toy_batches(rng)
    objective, terms, masks = step_objective(batches, nets, config)
    nets.zero_grad()
    objective.backward()
    fused = grads(nets)

    oracle = {n: np.zeros_like(p.data) for n, p in nets.named_parameters()}

    def add_grad_of(scalar: Tensor, weight: float):
        nets.zero_grad()
        scalar.backward()
        for n, p in nets.named_parameters():
            if p.grad is not None:
                oracle[n] += weight * p.grad

    for d in batches:
        keep_vec = masks[d].keep if d in masks else np.ones(len(batches[d][0]))
        for i in range(len(keep_vec)):
            e = np.zeros(len(keep_vec))
            e[i] = 1.0
            sample = (terms["recon_per"][d] * Tensor(e)).sum() * config.lambda_recon \
                + (terms["task_per"][d] * Tensor(e)).sum() * config.lambda1
            add_grad_of(sample, keep_vec[i])
    add_grad_of(-terms["disc"], 1.0)

    worst = 0.0
    for n, g in fused.items():
        if g is None:
            continue
        scale = max(np.abs(oracle[n]).max(), 1e-300)
        worst = max(worst, float(np.abs(g - oracle[n]).max() / scale))
    return worst
