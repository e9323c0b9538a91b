"""Central finite-difference checks against tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradcheckReport:
    name: str
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    failures: list[tuple[int, int, float, float]] = field(default_factory=list)
    near_kink: list[tuple[int, int]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f", {len(self.near_kink)} near kink" if self.near_kink else ""
        return (f"{status} {self.name}: max rel err {self.max_rel_err:.3e}, "
                f"max abs err {self.max_abs_err:.3e} over {self.n_checked} elements{extra}")


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-4,
    atol: float = 1e-7,
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    name: str = "f",
    numeric_scale: Optional[Sequence[float]] = None,
) -> GradcheckReport:
    """Compare the tape gradient of scalar ``f(*inputs)`` with central differences.

    An element fails when both its absolute error exceeds ``atol`` and its
    relative error ``|a - n| / max(|a|, |n|)`` exceeds ``tol``. Elements whose
    one-sided slopes disagree by more than the tolerance sit near a kink
    (relu, max-pool ties); they are listed in ``near_kink`` and excluded from
    the pass/fail decision. With ``max_elements`` set, a random subset of
    coordinates per input is checked.

    ``numeric_scale`` gives one multiplier per input applied to the
    finite-difference slope before comparison. Inputs that reach the output
    only through a gradient-reversal layer with coefficient ``c`` expect a
    tape gradient of ``-c`` times the slope.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    scale = [1.0] * len(inputs) if numeric_scale is None else list(numeric_scale)
    if len(scale) != len(inputs):
        raise ValueError(f"numeric_scale has {len(scale)} entries for {len(inputs)} inputs")
    rng = rng or np.random.default_rng(0)

    for t in inputs:
        t.grad = None
        t.requires_grad = True
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"gradcheck needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def value() -> float:
        return float(f(*inputs).data.reshape(()))

    report = GradcheckReport(name=name, max_rel_err=0.0, max_abs_err=0.0, n_checked=0)
    f0 = value()
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            coords = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            numeric = scale[k] * (fp - fm) / (2 * eps)
            a = float(analytic[k].reshape(-1)[i])
            abs_err = abs(a - numeric)
            denom = max(abs(a), abs(numeric))
            rel_err = abs_err / denom if denom > 0 else 0.0
            fwd, bwd = scale[k] * (fp - f0) / eps, scale[k] * (f0 - fm) / eps
            kink_gap = abs(fwd - bwd)
            if kink_gap > max(atol, tol * max(abs(fwd), abs(bwd))) and kink_gap > 1e3 * eps * max(1.0, abs(numeric)):
                report.near_kink.append((k, int(i)))
                continue
            report.n_checked += 1
            report.max_abs_err = max(report.max_abs_err, abs_err)
            if abs_err > atol:  # below the floor a relative error says nothing
                report.max_rel_err = max(report.max_rel_err, rel_err)
            if abs_err > atol and rel_err > tol:
                report.failures.append((k, int(i), a, numeric))
    return report
