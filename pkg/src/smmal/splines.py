"""Tensor-product B-spline logistic regression with CV-selected degree."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import BSpline
from scipy.special import expit

log = logging.getLogger(__name__)

__all__ = [
    "SplineBasisSpec", "SplineModel", "SplineFitError",
    "bspline_basis", "fit_spline_nuisance", "predict_spline", "clamp_interval",
]


class SplineFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class SplineBasisSpec:
    """``order`` is the polynomial degree of each piece (1 = piecewise linear);
    ``degrees_per_dim`` counts basis functions per input dimension."""

    order: int
    degrees_per_dim: Tuple[int, ...]
    domain_box: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if len(self.degrees_per_dim) != len(self.domain_box):
            raise ValueError("degrees_per_dim and domain_box must have one entry per dimension")
        for d in self.degrees_per_dim:
            if d < self.order + 1:
                raise ValueError(f"degree {d} below order + 1 = {self.order + 1}")
        for lo, hi in self.domain_box:
            if not lo < hi:
                raise ValueError("domain_box needs lo < hi in every dimension")

    @property
    def n_basis(self) -> int:
        return int(np.prod(self.degrees_per_dim))

    def knots(self, dim: int) -> np.ndarray:
        lo, hi = self.domain_box[dim]
        k = self.order
        n_interior = self.degrees_per_dim[dim] - k - 1
        inner = np.linspace(lo, hi, n_interior + 2)
        return np.concatenate([np.full(k, lo), inner, np.full(k, hi)])


def _as_2d(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def bspline_basis(x, spec: SplineBasisSpec) -> np.ndarray:
    """Tensor-product B-spline design matrix; points outside the box are clamped."""
    x = _as_2d(x)
    if x.shape[1] != len(spec.degrees_per_dim):
        raise ValueError("input dimension does not match the basis spec")
    out = None
    for j in range(x.shape[1]):
        lo, hi = spec.domain_box[j]
        xj = np.clip(x[:, j], lo, hi)
        bj = BSpline.design_matrix(xj, spec.knots(j), spec.order).toarray()
        # row-wise Kronecker product
        out = bj if out is None else (out[:, :, None] * bj[:, None, :]).reshape(x.shape[0], -1)
    return out


@dataclass
class SplineModel:
    basis_spec: SplineBasisSpec
    coefficients: np.ndarray
    truncation_M: Optional[float] = None
    cv_scores: dict = field(default_factory=dict, repr=False)
    skipped: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.coefficients.shape != (self.basis_spec.n_basis,):
            raise ValueError("coefficient length must equal the tensor basis size")

    @property
    def degree(self) -> int:
        return self.basis_spec.degrees_per_dim[0]

    @property
    def clamp(self):
        return clamp_interval(self.truncation_M)

    def predict(self, inputs) -> np.ndarray:
        return predict_spline(self, inputs, self.clamp)


def clamp_interval(M):
    """[1/M, 1 - 1/M] for a truncation constant M, or [0, 1] for None."""
    if M is None:
        return (0.0, 1.0)
    return (1.0 / M, 1.0 - 1.0 / M)


def predict_spline(model: SplineModel, inputs, clamp=(0.0, 1.0)) -> np.ndarray:
    lo, hi = clamp
    raw = expit(bspline_basis(inputs, model.basis_spec) @ model.coefficients)
    return np.clip(raw, lo, hi)


def _entropy(t, y, w):
    return float(w @ (np.logaddexp(0.0, t) - y * t) / w.sum())


def _newton_logistic(B, y, w, ridge=1e-8, max_iter=50, tol=1e-8):
    """Weighted unpenalized logistic MLE; ``ridge`` keeps the Gram invertible."""
    n, k = B.shape
    beta = np.zeros(k)
    t = np.zeros(n)
    sw = w / w.sum()
    f = _entropy(t, y, w)
    eye = ridge * np.eye(k)
    for _ in range(max_iter):
        mu = expit(t)
        grad = B.T @ (sw * (mu - y))
        if np.max(np.abs(grad)) < tol:
            break
        H = (B * (sw * mu * (1.0 - mu))[:, None]).T @ B + eye
        step = np.linalg.solve(H, grad)
        if not np.all(np.isfinite(step)):
            raise np.linalg.LinAlgError("non-finite Newton step")
        s = 1.0
        while s > 1e-10:
            tn = t - s * (B @ step)
            fn = _entropy(tn, y, w)
            if fn <= f + 1e-12:
                break
            s *= 0.5
        else:
            break
        beta = beta - s * step
        t, f_old, f = tn, f, fn
        if f_old - f < 1e-13:
            break
    return beta


def fit_spline_nuisance(inputs, response, weights=None, max_degree: Optional[int] = None,
                        folds: int = 10, order: int = 1, M: Optional[float] = None, seed=0,
                        domain_box: Optional[Sequence[Tuple[float, float]]] = None,
                        candidates: Optional[Sequence[int]] = None,
                        ridge: float = 1e-8, max_basis: Optional[int] = None) -> SplineModel:
    """Select the per-dimension basis size by K-fold out-of-fold entropy.

    Every candidate degree in ``order + 1 .. max_degree`` (or the explicit
    ``candidates``) is fitted by unpenalized logistic regression on the
    tensor basis; candidates with more than ``max_basis`` basis functions
    (default: one per five training rows), or with a singular Newton system,
    are skipped.  The winner is refit on all rows.

    Parameters
    ----------
    M : float, optional
        Prediction clamp constant, predictions land in [1/M, 1 - 1/M].
        ``None`` means the inactive clamp [0, 1].
    domain_box : sequence of (lo, hi), optional
        Knot range per dimension; defaults to the empirical range of
        ``inputs``.
    """
    X = _as_2d(inputs)
    y = np.asarray(response, dtype=float)
    n, d = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if n < 2 * folds:
        raise ValueError(f"need at least {2 * folds} rows for {folds}-fold CV, got {n}")
    if domain_box is None:
        domain_box = tuple((float(X[:, j].min()), float(X[:, j].max())) for j in range(d))
    domain_box = tuple((float(lo), float(hi)) for lo, hi in domain_box)
    if candidates is None:
        if max_degree is None:
            max_degree = int(np.floor(np.sqrt(n))) - 1
        candidates = range(order + 1, max_degree + 1)
    candidates = [int(c) for c in candidates]
    if not candidates:
        raise ValueError("no candidate degrees")

    rng = np.random.default_rng(seed)
    assign = rng.permutation(np.arange(n) % folds)
    n_train_min = n - np.bincount(assign, minlength=folds).max()
    if max_basis is None:
        max_basis = max(n_train_min // 5, order + 1)

    scores, skipped = {}, {}
    for deg in candidates:
        spec = SplineBasisSpec(order, (deg,) * d, domain_box)
        if spec.n_basis > min(max_basis, n_train_min):
            skipped[deg] = f"{spec.n_basis} basis functions exceed the cap {max_basis}"
            continue
        if len(candidates) == 1:
            scores[deg] = float("nan")
            break
        B = bspline_basis(X, spec)
        total = 0.0
        try:
            for k in range(folds):
                te = assign == k
                tr = ~te
                beta = _newton_logistic(B[tr], y[tr], w[tr], ridge)
                total += _entropy(B[te] @ beta, y[te], w[te])
        except np.linalg.LinAlgError as exc:
            skipped[deg] = f"singular basis system: {exc}"
            log.debug("degree %d skipped: %s", deg, exc)
            continue
        scores[deg] = total / folds
    if not scores:
        raise SplineFitError(f"every candidate degree failed: {skipped}")
    best = min(scores, key=lambda k: (np.nan_to_num(scores[k], nan=-np.inf), k))
    spec = SplineBasisSpec(order, (best,) * d, domain_box)
    try:
        beta = _newton_logistic(bspline_basis(X, spec), y, w, ridge)
    except np.linalg.LinAlgError as exc:
        raise SplineFitError(f"refit at degree {best} failed: {exc}") from exc
    return SplineModel(spec, beta, M, scores, skipped)


def fit_spline_fixed(inputs, response, spec: SplineBasisSpec, weights=None,
                     M: Optional[float] = None, ridge: float = 1e-8) -> SplineModel:
    """Fit at a given basis, no selection."""
    X = _as_2d(inputs)
    y = np.asarray(response, dtype=float)
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    try:
        beta = _newton_logistic(bspline_basis(X, spec), y, w, ridge)
    except np.linalg.LinAlgError as exc:
        raise SplineFitError(f"fit at degree {spec.degrees_per_dim} failed: {exc}") from exc
    return SplineModel(spec, beta, M)
