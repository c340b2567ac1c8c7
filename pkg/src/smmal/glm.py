"""Weighted L1-penalized logistic and calibrated fits.

All fits minimise ``L(b) + lam * sum_j pen_j |b_j|`` for a smooth convex
per-row loss ``L`` of the linear predictor ``t = X b``, by proximal Newton:
the quadratic model of ``L`` is minimised with cyclic coordinate descent
(``_cd.quadratic_cd``) and the step is damped by an Armijo line search.
Convergence is declared on the KKT residual of the original problem.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from ._cd import quadratic_cd

__all__ = [
    "FitError", "ConvergenceError", "SeparationError", "UnboundedError", "EmptyArmError",
    "FitSpec", "SparseLinearModel", "LogisticLoss", "CalibratedPSLoss",
    "sigmoid", "sigmoid_dot", "truncate_tau", "kkt_residual",
    "fit_penalized", "fit_lasso_logistic", "fit_calibrated_ps", "fit_calibrated_or",
    "lambda_max", "default_lambda_grid", "fit_path", "select_lambda_cv",
]

_T_LIMIT = 250.0   # |x'b| beyond this is treated as divergence (exp overflows near 709)
INNER_REL_TOL = 1e-1


class FitError(RuntimeError):
    pass


class ConvergenceError(FitError):
    def __init__(self, msg, kkt_residual=float("nan"), n_iterations=0):
        super().__init__(f"{msg} (kkt residual {kkt_residual:.3g} after {n_iterations} iterations)")
        self.kkt_residual = kkt_residual
        self.n_iterations = n_iterations


class SeparationError(FitError):
    pass


class UnboundedError(FitError):
    pass


class EmptyArmError(FitError):
    pass


def sigmoid(x):
    return expit(x)


def sigmoid_dot(x):
    """Derivative of the logistic function, e^x / (1 + e^x)^2."""
    return expit(x) * expit(-np.asarray(x, dtype=float))


def truncate_tau(x, M):
    """sign(x) * min(|x|, 2M)."""
    if M <= 0:
        raise ValueError("M must be positive")
    return np.clip(x, -2.0 * M, 2.0 * M)


@dataclass
class FitSpec:
    sample_weights: Optional[np.ndarray] = None
    penalty_weights: Optional[np.ndarray] = None   # default: intercept (column 0) exempt
    lambda_grid: Optional[np.ndarray] = None
    tolerance: float = 1e-7
    max_iterations: int = 200

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.lambda_grid is not None:
            g = np.asarray(self.lambda_grid, dtype=float)
            if g.ndim != 1 or g.size == 0 or np.any(np.diff(g) >= 0):
                raise ValueError("lambda_grid must be strictly decreasing")

    def penalty(self, p):
        if self.penalty_weights is None:
            pen = np.ones(p)
            pen[0] = 0.0
            return pen
        pen = np.asarray(self.penalty_weights, dtype=float)
        if pen.shape != (p,):
            raise ValueError("penalty_weights length mismatch")
        return pen


@dataclass
class SparseLinearModel:
    coefficients: np.ndarray
    lam: float
    objective_value: float
    kkt_residual: float
    n_iterations: int
    objective_trace: tuple = field(default=(), repr=False)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.coefficients)

    def linear_predictor(self, X) -> np.ndarray:
        return np.asarray(X) @ self.coefficients

    def predict_proba(self, X) -> np.ndarray:
        return expit(self.linear_predictor(X))


class LogisticLoss:
    """sum_i w_i {log(1 + e^t_i) - y_i t_i} / normalizer.

    ``normalizer`` defaults to sum(w).  A fixed normalizer is rescaled in
    proportion to the row count when the loss is subset for CV.
    """

    def __init__(self, y, weights=None, normalizer=None):
        self.y = np.asarray(y, dtype=float)
        self.w = np.ones_like(self.y) if weights is None else np.asarray(weights, dtype=float)
        if self.w.shape != self.y.shape:
            raise ValueError("weights and response lengths differ")
        if np.any(self.w < 0) or not np.any(self.w > 0):
            raise ValueError("weights must be nonnegative and not all zero")
        self._fixed = normalizer
        self.normalizer = float(self.w.sum() if normalizer is None else normalizer)

    def __len__(self):
        return self.y.shape[0]

    def subset(self, idx):
        norm = None if self._fixed is None else self._fixed * len(idx) / len(self)
        return LogisticLoss(self.y[idx], self.w[idx], norm)

    def check(self, unpenalized_exists: bool):
        yy = self.y[self.w > 0]
        if unpenalized_exists and (np.all(yy == yy[0])):
            raise SeparationError("response is constant; unpenalized coefficients diverge")

    def rows(self, t):
        return np.logaddexp(0.0, t) - self.y * t

    def value(self, t):
        return float(self.w @ self.rows(t)) / self.normalizer

    def derivs(self, t):
        mu = expit(t)
        s = self.w / self.normalizer
        return self.value(t), s * (mu - self.y), s * mu * (1.0 - mu)

    def score(self, t):
        """Weighted mean out-of-sample loss."""
        return float(self.w @ self.rows(t)) / float(self.w.sum())


class CalibratedPSLoss:
    """sum_i c_i {(a - A_i) t_i + 1(A_i = a) exp((-1)^a t_i)} / normalizer."""

    def __init__(self, treatment, arm, weights, normalizer):
        if arm not in (0, 1):
            raise ValueError("arm must be 0 or 1")
        self.A = np.asarray(treatment, dtype=float)
        self.arm = arm
        self.sign = 1.0 if arm == 0 else -1.0
        self.c = np.asarray(weights, dtype=float)
        self.normalizer = float(normalizer)
        self.ind = (self.A == arm).astype(float)
        self.lin = arm - self.A

    def __len__(self):
        return self.A.shape[0]

    def subset(self, idx):
        return CalibratedPSLoss(self.A[idx], self.arm, self.c[idx],
                                self.normalizer * len(idx) / len(self))

    def check(self, unpenalized_exists: bool):
        pos = self.c > 0
        if not np.any(pos & (self.ind == 1)) or not np.any(pos & (self.ind == 0)):
            raise UnboundedError(f"calibrated PS for arm {self.arm} needs both treatment groups; "
                                 "the objective is unbounded below")

    def rows(self, t):
        with np.errstate(over="ignore", invalid="ignore"):
            e = np.where(self.ind == 1, np.exp(self.sign * t), 0.0)
        return self.lin * t + e

    def value(self, t):
        return float(self.c @ self.rows(t)) / self.normalizer

    def derivs(self, t):
        with np.errstate(over="ignore", invalid="ignore"):
            e = np.where(self.ind == 1, np.exp(self.sign * t), 0.0)
        s = self.c / self.normalizer
        return self.value(t), s * (self.lin + self.sign * e), s * e

    def score(self, t):
        return float(self.c @ self.rows(t)) / float(self.c.sum())


def _penalty_value(b, lam_vec):
    nz = b != 0
    return float(np.sum(lam_vec[nz] * np.abs(b[nz])))


def kkt_residual(grad, b, lam_vec) -> float:
    """Max violation of the subgradient optimality conditions."""
    grad = np.asarray(grad)
    with np.errstate(invalid="ignore"):
        res = np.where(
            b != 0,
            np.abs(grad + lam_vec * np.sign(b)),
            np.maximum(np.abs(grad) - lam_vec, 0.0),
        )
    res = np.where((lam_vec == 0) & (b == 0), np.abs(grad), res)
    return float(res.max()) if res.size else 0.0


def _lam_vec(lam, pen):
    pen = np.asarray(pen, dtype=float)
    with np.errstate(invalid="ignore"):
        return np.where(pen > 0, lam * pen, 0.0)


def fit_penalized(X, loss, lam: float, pen=None, tol: float = 1e-7, max_iter: int = 200,
                  warm_start=None) -> SparseLinearModel:
    """Proximal Newton for ``loss(X b) + lam * sum_j pen_j |b_j|``.

    Raises
    ------
    ConvergenceError
        KKT residual still above ``tol`` after ``max_iter`` Newton steps.
    UnboundedError
        Linear predictor diverges (no finite minimiser).
    """
    X = np.ascontiguousarray(X, dtype=float)
    n, p = X.shape
    if len(loss) != n:
        raise ValueError("design and loss have different row counts")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if pen is None:
        pen = np.ones(p)
        pen[0] = 0.0
    lam_vec = _lam_vec(lam, pen)
    loss.check(bool(np.any(lam_vec == 0)))

    b = np.zeros(p) if warm_start is None else np.array(warm_start, dtype=float)
    b[np.isinf(lam_vec)] = 0.0
    t = X @ b
    val, d1, d2 = loss.derivs(t)
    F = val + _penalty_value(b, lam_vec)
    trace = [F]
    for it in range(max_iter + 1):
        grad = X.T @ d1
        kkt = kkt_residual(grad, b, lam_vec)
        if kkt <= tol:
            return SparseLinearModel(b, float(lam), F, kkt, it, tuple(trace))
        if it == max_iter:
            break
        inner_tol = max(INNER_REL_TOL * kkt, 1e-14)
        # working set: coordinates that are nonzero, unpenalized or close to
        # violating their KKT bound; the full-gradient check above catches the rest
        ws = np.flatnonzero((b != 0) | (lam_vec == 0) | (np.abs(grad) > 0.5 * lam_vec))
        Xw = X[:, ws]
        G = (Xw * d2[:, None]).T @ Xw
        G.flat[:: ws.size + 1] += 1e-12
        zw, _ = quadratic_cd(G, grad[ws], b[ws], lam_vec[ws], inner_tol, 10000)
        z = b.copy()
        z[ws] = zw
        d = z - b
        Xd = X @ d
        pen_b = _penalty_value(b, lam_vec)
        decrease = float(grad @ d) + _penalty_value(z, lam_vec) - pen_b
        if -decrease <= 1e-10 * (1.0 + abs(F)):
            # predicted decrease is below rounding noise in F, so a line search
            # cannot rank the steps; the Newton step itself is tiny and safe
            bn, tn = z, t + Xd
        else:
            step = 1.0
            accepted = False
            for _ in range(60):
                bn = b + step * d
                tn = t + step * Xd
                Fn = loss.value(tn) + _penalty_value(bn, lam_vec)
                if np.isfinite(Fn) and Fn <= F + 1e-4 * step * decrease:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                # no representable decrease left; stop and let the KKT check decide
                break
        b, t = bn, tn
        if np.max(np.abs(t)) > _T_LIMIT:
            raise UnboundedError("linear predictor diverging; objective has no finite minimiser")
        val, d1, d2 = loss.derivs(t)
        F = val + _penalty_value(b, lam_vec)
        trace.append(F)
    grad = X.T @ d1
    kkt = kkt_residual(grad, b, lam_vec)
    if kkt <= tol:
        return SparseLinearModel(b, float(lam), F, kkt, it, tuple(trace))
    raise ConvergenceError("proximal Newton did not converge", kkt, it)


def fit_lasso_logistic(design, response, spec: FitSpec = None, lam: float = 0.0,
                       warm_start=None) -> SparseLinearModel:
    """Weighted Lasso logistic regression, intercept unpenalized by default."""
    spec = spec or FitSpec()
    X = np.asarray(design, dtype=float)
    loss = LogisticLoss(response, spec.sample_weights)
    return fit_penalized(X, loss, lam, spec.penalty(X.shape[1]), spec.tolerance,
                         spec.max_iterations, warm_start)


def _linear_init(init, X):
    if isinstance(init, SparseLinearModel):
        return init.linear_predictor(X)
    t = np.asarray(init, dtype=float)
    if t.shape == (X.shape[0],):
        return t
    if t.shape == (X.shape[1],):
        return X @ t
    raise ValueError("initial model must be a SparseLinearModel, coefficient vector, "
                     "or per-row linear predictor")


def calibrated_ps_loss(design, treatment, arm, or_init, M, normalizer) -> CalibratedPSLoss:
    X = np.asarray(design, dtype=float)
    w = sigmoid_dot(truncate_tau(_linear_init(or_init, X), M))
    return CalibratedPSLoss(treatment, arm, w, normalizer)


def fit_calibrated_ps(design, treatment, arm, or_init, spec: FitSpec = None, lam: float = 0.0,
                      M: float = 2.0, normalizer=None, warm_start=None) -> SparseLinearModel:
    """Calibrated propensity fit for arm ``arm``.

    Minimises ``sum_i gdot(tau(x_i'beta_init)) {(a - A_i) alpha'x_i
    + 1(A_i = a) exp((-1)^a alpha'x_i)} / normalizer + lam ||alpha||_1``.
    ``or_init`` may be a model, a coefficient vector, or per-row linear
    predictors (when rows come from folds with different initial fits).
    ``normalizer`` is the labeled count n (defaults to the row count).
    """
    spec = spec or FitSpec()
    X = np.asarray(design, dtype=float)
    norm = X.shape[0] if normalizer is None else normalizer
    loss = calibrated_ps_loss(X, treatment, arm, or_init, M, norm)
    if spec.sample_weights is not None:
        loss.c = loss.c * np.asarray(spec.sample_weights, dtype=float)
    return fit_penalized(X, loss, lam, spec.penalty(X.shape[1]), spec.tolerance,
                         spec.max_iterations, warm_start)


def calibrated_or_weights(design, arm, ps_init, M) -> np.ndarray:
    X = np.asarray(design, dtype=float)
    s = 1.0 if arm == 0 else -1.0
    return np.exp(truncate_tau(s * _linear_init(ps_init, X), M))


def fit_calibrated_or(design, outcome, arm, ps_init, spec: FitSpec = None, lam: float = 0.0,
                      M: float = 2.0, warm_start=None) -> SparseLinearModel:
    """Calibrated outcome fit on the rows with ``A == arm``.

    Weighted Lasso logistic with weights ``exp(tau((-1)^a x'alpha_init))``,
    normalised by the number of qualifying rows.
    """
    spec = spec or FitSpec()
    X = np.asarray(design, dtype=float)
    if X.shape[0] == 0:
        raise EmptyArmError(f"no labeled rows with A={arm}")
    w = calibrated_or_weights(X, arm, ps_init, M)
    if spec.sample_weights is not None:
        w = w * np.asarray(spec.sample_weights, dtype=float)
    loss = LogisticLoss(outcome, w, normalizer=X.shape[0])
    return fit_penalized(X, loss, lam, spec.penalty(X.shape[1]), spec.tolerance,
                         spec.max_iterations, warm_start)


def lambda_max(design, loss, pen=None, tol=1e-9) -> float:
    """Smallest lambda at which every penalized coefficient is zero."""
    X = np.asarray(design, dtype=float)
    if pen is None:
        pen = np.ones(X.shape[1])
        pen[0] = 0.0
    pen = np.asarray(pen, dtype=float)
    null = fit_penalized(X, loss, np.inf, pen, tol=tol)
    t = X @ null.coefficients
    _, d1, _ = loss.derivs(t)
    g = np.abs(X.T @ d1)
    mask = pen > 0
    if not mask.any():
        return 0.0
    return float(np.max(g[mask] / pen[mask]))


def default_lambda_grid(lam_max: float, n_lambda: int = 50, ratio: float = 0.01) -> np.ndarray:
    return np.geomspace(lam_max, lam_max * ratio, n_lambda)


def fit_path(design, loss, grid, pen=None, tol=1e-7, max_iter=200):
    """Warm-started fits along a decreasing lambda grid.

    The path stops at the first failed fit (smaller penalties only make a
    diverging problem worse); the remaining entries are None.
    """
    X = np.ascontiguousarray(design, dtype=float)
    out = [None] * len(grid)
    warm = None
    for j, lam in enumerate(grid):
        try:
            m = fit_penalized(X, loss, float(lam), pen, tol, max_iter, warm)
        except FitError:
            break
        warm = m.coefficients
        out[j] = m
    return out


def select_lambda_cv(design, response=None, spec: FitSpec = None, folds: int = 10,
                     objective: str = "entropy", seed=0, loss=None,
                     return_scores: bool = False):
    """Pick the grid lambda with the smallest mean out-of-fold loss.

    With ``objective="entropy"`` the loss is the (weighted) logistic
    log-loss of ``response``; any loss object from this module may be
    passed instead through ``loss``, and is scored by its own ``score``.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if objective != "entropy":
        raise ValueError(f"unknown objective {objective!r}")
    spec = spec or FitSpec()
    X = np.asarray(design, dtype=float)
    n, p = X.shape
    if loss is None:
        loss = LogisticLoss(response, spec.sample_weights)
    pen = spec.penalty(p)
    grid = spec.lambda_grid
    if grid is None:
        grid = default_lambda_grid(lambda_max(X, loss, pen))
    grid = np.asarray(grid, dtype=float)
    if grid.size == 1:
        return (float(grid[0]), np.zeros(1)) if return_scores else float(grid[0])

    rng = np.random.default_rng(seed)
    assign = rng.permutation(np.arange(n) % folds)
    scores = np.zeros((folds, grid.size))
    for k in range(folds):
        test = assign == k
        tr = np.flatnonzero(~test)
        te = np.flatnonzero(test)
        try:
            path = fit_path(X[tr], loss.subset(tr), grid, pen, spec.tolerance, spec.max_iterations)
        except FitError:
            scores[k] = np.inf
            continue
        held = loss.subset(te)
        for j, m in enumerate(path):
            scores[k, j] = np.inf if m is None else held.score(X[te] @ m.coefficients)
    mean = scores.mean(axis=0)
    if not np.any(np.isfinite(mean)):
        raise FitError("no lambda in the grid produced a successful fit in every fold")
    best = float(grid[int(np.argmin(mean))])
    return (best, mean) if return_scores else best
