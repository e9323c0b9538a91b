"""Reconstruction, classification and conditional adversarial objectives.

Per-sample vectors are kept alongside totals because the selection masks
threshold them. Reconstruction and cross-entropy totals are sums over the
batch; the entropy and discriminator terms are batch means.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, exp, log_sigmoid, log_softmax, mse_per_sample, take_rows
from .autodiff import ops


@dataclass
class PerSampleLosses:
    recon: Tensor
    task: Tensor
    domain: str


def reconstruction_loss(x_hat: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-sample ``||x_hat_i - x_i||^2`` and their sum."""
    per_sample = mse_per_sample(x_hat, x)
    return per_sample, per_sample.sum()


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} and labels {labels.shape} disagree")
    C = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"cross_entropy: labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    return -take_rows(log_softmax(logits, axis=1), labels)


def entropy_loss(logits: Tensor) -> Tensor:
    """Shannon entropy of the softmax of each row, computed from log-probabilities."""
    logp = log_softmax(logits, axis=1)
    return -(exp(logp) * logp).sum(axis=1)


def classification_loss(source_logits: Tensor, source_labels, interm_logits: Tensor | None,
                        target_logits: Tensor | None) -> tuple[dict[str, Tensor], Tensor]:
    """Summed source cross-entropy plus the batch-mean entropy of the intermediate and target predictions.

    Only the cross-entropy is a sum over samples; each unlabeled domain adds
    one mean entropy. The per-sample vectors for the unlabeled domains are the
    entropies divided by their batch size, so they still sum to the total and
    a mask can zero them one by one. Min-max normalisation ignores that
    constant factor, so selection scores are unaffected.

    A domain may be ``None`` only when it is deliberately left out of the run
    (the intermediate domain under ablation).
    """
    if source_logits is None or source_labels is None:
        raise ValueError("classification_loss: source batch is required")
    per = {"source": cross_entropy(source_logits, source_labels)}
    for name, logits in (("intermediate", interm_logits), ("target", target_logits)):
        if logits is not None:
            per[name] = entropy_loss(logits) * (1.0 / logits.shape[0])
    total = None
    for v in per.values():
        total = v.sum() if total is None else total + v.sum()
    return per, total


def discriminator_loss(logit_source: Tensor, logit_target: Tensor) -> Tensor:
    """Mean log d(source) plus mean log(1 - d(target)), with d the logistic of the logit.

    This is a log-likelihood (always <= 0). The discriminator ascends it; the
    trainer minimises its negation through a gradient-reversal layer.
    """
    return ops.mean(log_sigmoid(logit_source)) + ops.mean(log_sigmoid(-logit_target))
