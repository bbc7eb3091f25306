"""Monte Carlo estimates with standard errors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Estimate:
    mean: float
    se: float
    n: int

    def z(self, target: float = 0.0) -> float:
        if self.se == 0:
            return 0.0 if self.mean == target else float("inf")
        return (self.mean - target) / self.se

    def within(self, target: float, k: float = 4.0, floor: float = 1e-12) -> bool:
        """``|mean - target| <= max(k se, floor)``."""
        return abs(self.mean - target) <= max(k * self.se, floor)


def estimate(x, axis_clusters: bool = False) -> Estimate:
    """Mean and standard error of ``x``.

    With ``axis_clusters`` the first axis indexes independent clusters (common
    paths) and remaining axes are averaged inside each cluster first.
    """
    x = np.asarray(x, dtype=float)
    if axis_clusters and x.ndim > 1:
        x = x.reshape(x.shape[0], -1).mean(axis=1)
    x = x.reshape(-1)
    n = x.size
    se = float(x.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return Estimate(float(x.mean()), se, n)
