"""Elevation-map baseline: one Kalman-filtered height per grid element.

Cells live on the same triangular grid as the mesh map so model comparisons
are element-for-element fair. Only the gamma mean and gamma marginal
variance of each measurement feed the filter; the baseline has no
(alpha, beta) model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import OutsideSubmap, TriGrid
from .surfel import Measurement


class InvalidVariance(Exception):
    """Raised for a non-positive measurement variance."""


class Unobserved(Exception):
    """Raised when querying a cell that has never been updated."""


@dataclass
class ElevationCell:
    """Scalar height fused in precision form."""

    mean: float = 0.0
    variance: float = math.inf
    n_meas: int = 0

    @property
    def observed(self) -> bool:
        return self.n_meas > 0


def elev_update(cell: ElevationCell, z_gamma: float, var_gamma: float) -> ElevationCell:
    """Scalar Bayes fusion; a vacuous prior is represented by infinite variance."""
    if var_gamma <= 0.0:
        raise InvalidVariance(f"variance must be positive, got {var_gamma}")
    prec = (0.0 if math.isinf(cell.variance) else 1.0 / cell.variance) + 1.0 / var_gamma
    info = (0.0 if math.isinf(cell.variance) else cell.mean / cell.variance) + (
        z_gamma / var_gamma
    )
    return ElevationCell(mean=info / prec, variance=1.0 / prec, n_meas=cell.n_meas + 1)


def elev_likelihood(cell: ElevationCell, gamma_true: float) -> float:
    """Plug-in Gaussian log density of gamma_true under the cell posterior."""
    if not cell.observed:
        raise Unobserved("cell has no measurements")
    d = gamma_true - cell.mean
    return -0.5 * (math.log(2.0 * math.pi * cell.variance) + d * d / cell.variance)


class ElevationMap:
    """Elevation map over the triangular grid elements."""

    def __init__(self, grid: TriGrid):
        self.grid = grid
        self.cells = [ElevationCell() for _ in grid.surfels]

    def update(self, batch: list[Measurement]) -> int:
        """Fuse a batch of submap-coordinate measurements; returns skipped count."""
        skipped = 0
        for m in batch:
            try:
                sid = self.grid.locate(float(m.mean[0]), float(m.mean[1]))
            except OutsideSubmap:
                skipped += 1
                continue
            self.cells[sid] = elev_update(
                self.cells[sid], float(m.mean[2]), float(m.cov[2, 2])
            )
        return skipped

    def height(self, alpha: float, beta: float) -> float:
        cell = self.cells[self.grid.locate(alpha, beta)]
        if not cell.observed:
            raise Unobserved("cell has no measurements")
        return cell.mean

    def log_likelihood(self, alpha: float, beta: float, gamma_true: float) -> float:
        return elev_likelihood(self.cells[self.grid.locate(alpha, beta)], gamma_true)
