"""Goodness-of-fit checks for fitted discrete hazard models.

Calibration tables compare mean fitted and empirical hazards within groups
of rows cut at percentiles of the fitted hazard.  Martingale residuals
compare observed and expected event counts per subject; a local-linear
smoother gives a trend curve for plotting them against a covariate.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import AugmentedDataset, Dataset, HazardFn, augment

TIE_POLICY = "ties-low"


class DiagnosticsWarning(UserWarning):
    pass


@dataclass
class CalibrationTable:
    """Per-group fitted and empirical hazards.

    ``lower``/``upper`` bound the fitted hazards of each group; a row with
    hazard equal to a percentile boundary sits in the lower group.
    """

    K: int
    n: np.ndarray
    events: np.ndarray
    mean_fitted: np.ndarray
    empirical: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    tie_policy: str = TIE_POLICY

    @property
    def n_groups(self) -> int:
        return len(self.n)

    @property
    def max_gap(self) -> float:
        return float(np.max(np.abs(self.mean_fitted - self.empirical)))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"group": np.arange(1, self.n_groups + 1), "n": self.n,
                             "mean_fitted": self.mean_fitted, "empirical": self.empirical})

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.6g")


def calibration_groups(hazard, y, K: int = 10) -> CalibrationTable:
    """Calibration table from fitted hazards and binary responses."""
    h = np.asarray(hazard, dtype=float)
    y = np.asarray(y)
    if K < 2:
        raise ValueError("K must be >= 2")
    if len(h) < K:
        raise ValueError(f"need at least K={K} rows, got {len(h)}")
    bounds = np.quantile(h, np.arange(1, K) / K, method="inverted_cdf")
    group = np.searchsorted(bounds, h, side="left")
    counts = np.bincount(group, minlength=K)
    used = np.flatnonzero(counts)
    if len(used) < K:
        warnings.warn(f"{K - len(used)} empty calibration groups merged away (tied fitted hazards)",
                      DiagnosticsWarning, stacklevel=2)
    n = counts[used]
    events = np.bincount(group, weights=y, minlength=K)[used].astype(np.int64)
    fitted = np.bincount(group, weights=h, minlength=K)[used] / n
    lo = np.array([h[group == g].min() for g in used])
    hi = np.array([h[group == g].max() for g in used])
    return CalibrationTable(K, n, events, fitted, events / n, lo, hi)


def calibration(aug: AugmentedDataset, hazard_fn: HazardFn, K: int = 10) -> CalibrationTable:
    """Group person-period rows by fitted-hazard percentiles.

    Within each group the empirical hazard is the share of rows with an
    event.  Groups left empty by tied hazards are dropped with a warning.
    """
    h = np.asarray(hazard_fn(aug.time, aug.covariates), dtype=float)
    return calibration_groups(h, aug.y, K)


@dataclass
class ResidualSet:
    subject_id: np.ndarray
    observed_time: np.ndarray
    residual: np.ndarray
    covariates: dict

    def to_frame(self, covariate: str | None = None) -> pd.DataFrame:
        cols = {"subject_id": self.subject_id}
        if covariate is not None:
            cols["covariate_value"] = self.covariates[covariate]
        cols["residual"] = self.residual
        return pd.DataFrame(cols)

    def to_csv(self, path, covariate: str | None = None) -> None:
        self.to_frame(covariate).to_csv(path, index=False, float_format="%.6g")


def martingale_residuals(ds: Dataset, hazard_fn: HazardFn) -> ResidualSet:
    """``r_i = sum_t (y_it - hazard(t | x_i))`` over the at-risk periods of subject ``i``."""
    aug = augment(ds)
    h = np.asarray(hazard_fn(aug.time, aug.covariates), dtype=float)
    r = np.bincount(aug.row_subject, weights=aug.y - h, minlength=ds.n)
    return ResidualSet(np.asarray(ds.subject_id), np.asarray(ds.time), r, dict(ds.covariates))


@dataclass
class Trend:
    grid: np.ndarray
    trend: np.ndarray
    bandwidth: float

    @property
    def range(self) -> float:
        return float(np.ptp(self.trend))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"grid": self.grid, "trend": self.trend})

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.6g")


MIN_EFFECTIVE = 3.0


def residual_trend(x, r, bandwidth: float | None = None, n_grid: int = 100) -> Trend:
    """Local-linear Gaussian-kernel smooth of ``r`` on ``x``.

    The default bandwidth is ``0.9 sd(x) n^(-1/5)``.  Where the kernel
    weights add up to fewer than three observations the bandwidth is
    widened for that grid point, with a warning.
    """
    x = np.asarray(x, dtype=float)
    r = np.asarray(r, dtype=float)
    if x.shape != r.shape or x.ndim != 1:
        raise ValueError("x and r must be vectors of equal length")
    if len(x) < 10:
        raise ValueError("need at least 10 points")
    if bandwidth is None:
        bandwidth = 0.9 * np.std(x, ddof=1) * len(x) ** (-0.2)
        if bandwidth <= 0:
            bandwidth = 1.0
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    grid = np.linspace(x.min(), x.max(), n_grid)
    out = np.empty(n_grid)
    widened = 0
    for i, g in enumerate(grid):
        h = bandwidth
        while True:
            w = np.exp(-0.5 * ((x - g) / h) ** 2)
            if w.sum() >= MIN_EFFECTIVE:
                break
            h *= 1.5
            widened += h != bandwidth
        d = x - g
        s0, s1, s2 = w.sum(), (w * d).sum(), (w * d * d).sum()
        t0, t1 = (w * r).sum(), (w * d * r).sum()
        det = s0 * s2 - s1 * s1
        out[i] = (s2 * t0 - s1 * t1) / det if det > 1e-12 * s0 * s2 else t0 / s0
    if widened:
        warnings.warn("bandwidth widened at grid points with fewer than 3 effective observations",
                      DiagnosticsWarning, stacklevel=2)
    return Trend(grid, out, float(bandwidth))
