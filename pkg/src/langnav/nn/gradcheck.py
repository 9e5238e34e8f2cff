"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import default_dtype


@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    max_rel_error: float
    checked: int

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


@dataclass(frozen=True)
class GradCheckReport:
    entries: tuple
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.ok(self.tolerance) for e in self.entries)

    def format(self) -> str:
        lines = [f"{'layer':<40} {'max rel err':>12}  status"]
        for e in self.entries:
            status = "ok" if e.ok(self.tolerance) else "FAIL"
            lines.append(f"{e.name:<40} {e.max_rel_error:>12.3e}  {status}")
        lines.append(f"overall max {self.max_rel_error:.3e} "
                     f"(tolerance {self.tolerance:.0e}): "
                     f"{'pass' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def grad_check(loss_fn, params, tolerance: float = 1e-4,
               rel_step: float = 1e-5, samples_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of a scalar loss to central differences.

    loss_fn takes no arguments and must be deterministic given the current
    parameter buffers. Step size is relative, h = rel_step * max(1, |theta|).
    With samples_per_param set, only that many coordinates per tensor are
    probed (seeded choice), which bounds runtime on large models. Failures
    are reported in the returned record, never raised.
    """
    if default_dtype() is not np.float64:
        raise ValueError("grad_check runs in 64-bit mode; wrap the call in "
                         "using_dtype(np.float64)")
    for _, p in params:
        p.zero_grad()
    loss_fn().backward()

    entries = []
    for name, p in params:
        analytic = (p.grad if p.grad is not None
                    else np.zeros_like(p.data)).ravel()
        n = p.data.size
        if samples_per_param is not None and samples_per_param < n:
            local = rng if rng is not None else np.random.default_rng(0)
            idx = local.choice(n, size=samples_per_param, replace=False)
        else:
            idx = np.arange(n)
        worst = 0.0
        for i in idx:
            at = np.unravel_index(int(i), p.data.shape)
            orig = float(p.data[at])
            h = rel_step * max(1.0, abs(orig))
            p.data[at] = orig + h
            fp = loss_fn().item()
            p.data[at] = orig - h
            fm = loss_fn().item()
            p.data[at] = orig
            numeric = (fp - fm) / (2.0 * h)
            # floor keeps FD noise on near-zero coordinates from dominating
            denom = max(abs(numeric), abs(analytic[i]), 1e-4)
            worst = max(worst, abs(numeric - analytic[i]) / denom)
        entries.append(GradCheckEntry(name, worst, len(idx)))
    return GradCheckReport(tuple(entries), tolerance)
