"""Convergence tables and log-log slope fits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DegenerateFitError(ValueError):
    pass


def fit_slope(rows) -> tuple[float, float]:
    """Least-squares fit of ``log error`` on ``log n``; returns ``(-coef, stderr)``.

    ``rows`` is a sequence of ``(n, error)`` pairs. The sign is flipped so an
    error ``c / n**p`` reads as slope ``p``. The standard error is the usual
    OLS one (0 when only two points are given).
    """
    pts = [(float(n), float(e)) for n, e in rows]
    if len(pts) < 2:
        raise DegenerateFitError("need at least two rows")
    if any(e <= 0 for _, e in pts):
        raise DegenerateFitError("errors must be positive")
    x = np.log([n for n, _ in pts])
    y = np.log([e for _, e in pts])
    if np.ptp(x) == 0:
        raise DegenerateFitError("need at least two distinct n")
    xm = x - x.mean()
    coef = float((xm * (y - y.mean())).sum() / (xm**2).sum())
    if len(pts) > 2:
        resid = y - y.mean() - coef * xm
        se = math.sqrt(float((resid**2).sum()) / (len(pts) - 2) / float((xm**2).sum()))
    else:
        se = 0.0
    return -coef, se


@dataclass
class ConvergenceRow:
    n: int
    nu: int
    estimate: float
    stderr: float
    exact: float
    work_per_sample: float = float("nan")

    @property
    def error(self) -> float:
        return abs(self.estimate - self.exact)

    @property
    def usable(self) -> bool:
        """MC noise is small enough for the error to be read as bias."""
        return self.stderr < self.error / 2

    def ci(self, z: float = 1.96) -> tuple[float, float]:
        return max(self.error - z * self.stderr, 0.0), self.error + z * self.stderr


@dataclass
class ConvergenceReport:
    rows: list = field(default_factory=list)
    slope: float = float("nan")
    slope_ci: float = float("nan")

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r.n)

    @property
    def usable_rows(self):
        return [r for r in self.rows if r.usable]

    @property
    def noise_dominated(self) -> bool:
        return len(self.usable_rows) < 2

    def fit(self) -> "ConvergenceReport":
        self.rows = sorted(self.rows, key=lambda r: r.n)
        use = self.usable_rows
        if len(use) >= 2 and len({r.n for r in use}) >= 2:
            self.slope, self.slope_ci = fit_slope([(r.n, r.error) for r in use])
        else:
            self.slope, self.slope_ci = float("nan"), float("nan")
        return self


def work_accounting(report: ConvergenceReport) -> list[dict]:
    """Mean elementary steps per sample for each ``n``, with the growth factor
    relative to the previous row."""
    out = []
    prev = None
    for r in report.rows:
        growth = r.work_per_sample / prev.work_per_sample if prev is not None else float("nan")
        out.append(
            dict(
                n=r.n,
                nu=r.nu,
                work_per_sample=r.work_per_sample,
                growth=growth,
                n_ratio=r.n / prev.n if prev is not None else float("nan"),
            )
        )
        prev = r
    return out
