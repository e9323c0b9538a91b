"""Online selection: per-batch loss normalisation, percentile threshold, masking.

Masks are built from detached loss values and applied by zeroing the masked
samples' loss terms before the single backward pass. Because the gradient of a
sum is the sum of per-sample gradients, this equals multiplying each sample's
gradient by its mask entry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass(frozen=True)
class SelectionMask:
    domain: str
    keep: np.ndarray
    threshold: float
    scores: np.ndarray

    @property
    def n_kept(self) -> int:
        return int(self.keep.sum())


def minmax_normalize(v) -> np.ndarray:
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("minmax_normalize needs at least one value")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def drop_count(batch: int, keep_portion: float) -> int:
    """Samples to drop from a batch: ``ceil((100 - keep) * B / 100)``."""
    if not 0.0 <= keep_portion <= 100.0:
        raise ValueError(f"keep portion must lie in [0, 100], got {keep_portion}")
    # round away float noise such as 70.00000000000001 before the ceiling
    return math.ceil(round((100.0 - keep_portion) * batch / 100.0, 9))


def mask_from_scores(scores, keep_portion: float, domain: str = "source") -> SelectionMask:
    """Drop the highest-scoring samples; among tied scores the lowest index is dropped first."""
    scores = np.asarray(scores, dtype=np.float64)
    n_drop = drop_count(len(scores), keep_portion)
    order = np.lexsort((np.arange(len(scores)), -scores))  # score descending, index ascending
    keep = np.ones(len(scores), dtype=np.float64)
    keep[order[:n_drop]] = 0.0
    threshold = float(scores[order[n_drop - 1]]) if n_drop else math.inf
    return SelectionMask(domain=domain, keep=keep, threshold=threshold, scores=scores)


def build_mask(recon, task, keep_portion: float, domain: str = "source") -> SelectionMask:
    """Mask from min-max normalised reconstruction and task losses of one batch.

    ``keep_portion`` is the percentage of the batch retained.
    """
    recon = np.asarray(recon.data if isinstance(recon, Tensor) else recon, dtype=np.float64)
    task = np.asarray(task.data if isinstance(task, Tensor) else task, dtype=np.float64)
    if recon.shape != task.shape or recon.ndim != 1:
        raise ValueError(f"build_mask: recon {recon.shape} and task {task.shape} must be equal-length vectors")
    scores = minmax_normalize(recon) + minmax_normalize(task)
    return mask_from_scores(scores, keep_portion, domain)


def apply_mask(per_sample_recon: Tensor, per_sample_task: Tensor, mask: SelectionMask) -> tuple[Tensor, Tensor]:
    """Totals over the kept samples only."""
    n = len(mask.keep)
    if per_sample_recon.shape != (n,) or per_sample_task.shape != (n,):
        raise ValueError(f"apply_mask: mask length {n} does not match losses "
                         f"{per_sample_recon.shape} / {per_sample_task.shape}")
    keep = Tensor(mask.keep.astype(per_sample_recon.dtype))
    return (per_sample_recon * keep).sum(), (per_sample_task * keep).sum()


def selection_step(recon: dict[str, Tensor], task: dict[str, Tensor], keep: dict[str, float]):
    """Mask the source and intermediate batches independently.

    ``recon`` and ``task`` map a domain name to per-sample loss tensors from the
    current forward pass; ``keep`` maps each selectable domain to its keep
    portion. Domains absent from ``keep`` (the target) pass through unmasked.
    Returns ``(masks, totals)`` where ``totals[d] = (recon_total, task_total)``.
    """
    masks: dict[str, SelectionMask] = {}
    totals: dict[str, tuple[Tensor, Tensor]] = {}
    for domain in recon:
        if domain in keep:
            masks[domain] = build_mask(recon[domain].data, task[domain].data, keep[domain], domain)
            totals[domain] = apply_mask(recon[domain], task[domain], masks[domain])
        else:
            totals[domain] = (recon[domain].sum(), task[domain].sum())
    return masks, totals
