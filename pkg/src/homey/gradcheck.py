"""Central-difference verification of tape gradients.

Runs strictly in float64: probe losses are evaluated with the graph
disabled, the analytic pass runs once up front.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


@dataclass
class GradCheckReport:
    """Per-parameter worst relative errors from one sweep."""

    tol: float
    h: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def finite_diff_check(f, params: dict[str, T.Tensor], h: float = 1e-3,
                      tol: float = 1e-5) -> GradCheckReport:
    """Compare d f()/d params against central differences.

    f rebuilds its graph on every call and returns a scalar Tensor.
    Relative error per element: |g_analytic - g_fd| / max(1, |g_fd|).
    """
    if not (1e-6 <= h <= 1e-2):
        raise ValueError("h must lie in [1e-6, 1e-2]")
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"finite_diff_check requires float64 params ({name})")

    for p in params.values():
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss in analytic pass")
    T.backward(loss)
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }

    report = GradCheckReport(tol=tol, h=h)
    with T.no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            ga = analytic[name].reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lo_hi = float(f().data)
                flat[i] = orig - h
                lo_lo = float(f().data)
                flat[i] = orig
                if not (np.isfinite(lo_hi) and np.isfinite(lo_lo)):
                    raise FloatingPointError(
                        f"non-finite loss while probing {name}[{i}]")
                gfd = (lo_hi - lo_lo) / (2.0 * h)
                err = abs(ga[i] - gfd) / max(1.0, abs(gfd))
                if err > worst:
                    worst = err
            report.errors[name] = worst
    return report
