"""Influence-function point, variance and interval estimates of the ATE."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtri

from .crossfit import (
    DRConfig, FoldPlan, NuisancePredictions, SplineLearnerConfig,
    assign_folds, crossfit_dr, crossfit_lowdim,
)
from .datamodel import SemiSupervisedDataset, labeled_fraction
from .glm import EmptyArmError

__all__ = [
    "AteEstimate", "normal_quantile", "confidence_interval", "influence_values",
    "smmal_estimate", "aipw_estimate", "supervised_dml_estimate", "supervised_dr_estimate",
]


@dataclass
class AteEstimate:
    point: float
    variance_scaled: float       # variance of sqrt(n) * (estimate - truth)
    ci_lower: float
    ci_upper: float
    alpha: float
    n_labeled: int
    n_rows: int
    influence_values: np.ndarray = field(repr=False, default=None)

    @property
    def se(self) -> float:
        return float(np.sqrt(self.variance_scaled / self.n_labeled))

    def covers(self, value: float) -> bool:
        return self.ci_lower <= value <= self.ci_upper

    def record(self, method: str = "", seed=None) -> dict:
        return {
            "point": self.point,
            "variance_scaled": self.variance_scaled,
            "ci": [self.ci_lower, self.ci_upper],
            "n": self.n_labeled,
            "N": self.n_rows,
            "method": method,
            "seed": seed,
        }

    def to_json(self, method: str = "", seed=None) -> str:
        return json.dumps(self.record(method, seed))


def normal_quantile(prob):
    return ndtri(prob)


def confidence_interval(point: float, variance_scaled: float, n: int, alpha: float = 0.05):
    """point -/+ z_{1 - alpha/2} sqrt(variance_scaled / n)."""
    if variance_scaled < 0:
        raise ValueError("variance must be nonnegative")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    half = float(normal_quantile(1.0 - alpha / 2.0)) * np.sqrt(variance_scaled / n)
    return point - half, point + half


def influence_values(R, A, Y, preds: NuisancePredictions, rho: float) -> np.ndarray:
    """Per-row semi-supervised influence values; R gates the labeled-part terms.

    ``A`` and ``Y`` may hold arbitrary finite values on rows with R = 0.
    """
    R = np.asarray(R, dtype=float)
    A = np.asarray(A, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n_rows = R.shape[0]
    for name, arr in (("ps", preds.ps), ("or", preds.or_), ("imp_ps", preds.imp_ps),
                      ("imp_or", preds.imp_or)):
        if arr is None or np.shape(arr) != (2, n_rows):
            raise ValueError(f"{name} predictions must have shape (2, {n_rows})")
    if np.any(preds.ps <= 0):
        raise ZeroDivisionError("propensity prediction of zero")
    pi1, pi0 = preds.ps[1], preds.ps[0]
    mu1, mu0 = preds.or_[1], preds.or_[0]
    P1, P0 = preds.imp_ps[1], preds.imp_ps[0]
    m1, m0 = preds.imp_or[1], preds.imp_or[0]
    A0 = 1.0 - A
    return (
        mu1 + P1 / pi1 * (m1 - mu1)
        - mu0 - P0 / pi0 * (m0 - mu0)
        + R * (A * Y - A * mu1) / (rho * pi1)
        - R * (A0 * Y - A0 * mu0) / (rho * pi0)
        - R * (P1 * m1 - P1 * mu1) / (rho * pi1)
        + R * (P0 * m0 - P0 * mu0) / (rho * pi0)
    )


def _estimate(values, rho, n, N, alpha):
    point = float(np.mean(values))
    var = float(rho / N * np.sum((values - point) ** 2))
    lo, hi = confidence_interval(point, var, n, alpha)
    return AteEstimate(point, var, lo, hi, alpha, n, N, values)


def smmal_estimate(data: SemiSupervisedDataset, preds: NuisancePredictions,
                   alpha: float = 0.05) -> AteEstimate:
    """Semi-supervised estimate from cross-fitted nuisances, rho = n / N."""
    rho = labeled_fraction(data)
    V = influence_values(data.label_flag, data.treatment.filled(0), data.outcome.filled(0.0),
                         preds, rho)
    return _estimate(V, rho, data.n_labeled, data.n_rows, alpha)


def aipw_values(A, Y, ps, or_) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    Y = np.asarray(Y, dtype=float)
    return (or_[1] - or_[0] + A * (Y - or_[1]) / ps[1]
            - (1.0 - A) * (Y - or_[0]) / ps[0])


def aipw_estimate(A, Y, ps, or_, alpha: float = 0.05) -> AteEstimate:
    """Complete-data AIPW estimate; variance is the mean squared centred value."""
    V = aipw_values(A, Y, ps, or_)
    n = V.shape[0]
    return _estimate(V, 1.0, n, n, alpha)


def _labeled_only(data):
    if data.n_labeled != data.n_rows:
        data = data.labeled_subset()
    A = data.treatment.filled(0)
    for a in (0, 1):
        if not np.any(A == a):
            raise EmptyArmError(f"no labeled rows with A={a}")
    return data


def supervised_dml_estimate(data: SemiSupervisedDataset, K: int = 10,
                            config: SplineLearnerConfig = None, alpha: float = 0.05,
                            seed=0, plan: Optional[FoldPlan] = None) -> AteEstimate:
    """Labeled-only cross-fitted AIPW with B-spline nuisances.

    Unlabeled rows of ``data`` are dropped.  ``plan`` (over the labeled
    rows) overrides the seeded fold assignment.
    """
    lab = _labeled_only(data)
    plan = plan or assign_folds(lab.n_rows, K, seed)
    preds = crossfit_lowdim(lab, plan, config, use_imputation=False)
    return aipw_estimate(lab.treatment.filled(0), lab.outcome.filled(0.0), preds.ps, preds.or_,
                         alpha)


def supervised_dr_estimate(data: SemiSupervisedDataset, K: int = 10, config: DRConfig = None,
                           M: float = 2.0, alpha: float = 0.05, seed=0,
                           plan: Optional[FoldPlan] = None) -> AteEstimate:
    """Labeled-only AIPW with the two-level calibrated Lasso nuisances (no W stage)."""
    lab = _labeled_only(data)
    plan = plan or assign_folds(lab.n_rows, K, seed)
    preds = crossfit_dr(lab, plan, config, M, use_imputation=False)
    return aipw_estimate(lab.treatment.filled(0), lab.outcome.filled(0.0), preds.ps, preds.or_,
                         alpha)
