"""Invariant suites shared by ``smmal validate`` and the test-suite.

Each check returns a :class:`CheckResult`; none of them raise on a failed
invariant, so a runner can report every line.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import numpy as np
from scipy.optimize import linprog

from .crossfit import NuisancePredictions
from .dgp import (
    AUC_TO_ALPHA, ScenarioSpec, SurrogateSpec, analytic_auc, empirical_auc, gen_lowdim,
    make_rng, sample_surrogate, true_nuisance,
)
from .estimators import aipw_estimate, confidence_interval, influence_values
from .glm import (
    CalibratedPSLoss, LogisticLoss, calibrated_or_weights, calibrated_ps_loss, fit_penalized,
    kkt_residual, lambda_max,
)
from .splines import SplineBasisSpec, bspline_basis

__all__ = ["CheckResult", "check_reduction", "check_influence_mean", "check_kkt_fuzz",
           "check_calibrated_objective",            "check_auc_calibration", "check_partition_of_unity", "check_normal_quantile",
           "validation_suites", "run_suites"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def random_predictions(n_rows, rng, lo=0.05) -> NuisancePredictions:
    def pair():
        p1 = rng.uniform(lo, 1 - lo, n_rows)
        return np.vstack([1 - p1, p1])
    return NuisancePredictions(pair(), rng.uniform(0, 1, (2, n_rows)), pair(),
                               rng.uniform(0, 1, (2, n_rows)))


def check_reduction(n_fixtures: int = 1000, seed=0, tol: float = 1e-12) -> CheckResult:
    """With R = 1 and rho = 1 the semi-supervised values reduce to AIPW for any Pi, m."""
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_fixtures):
        n = int(rng.integers(2, 60))
        A = rng.integers(0, 2, n).astype(float)
        Y = rng.uniform(-1, 1, n)
        preds = random_predictions(n, rng)
        ssl = float(np.mean(influence_values(np.ones(n), A, Y, preds, 1.0)))
        cmp = aipw_estimate(A, Y, preds.ps, preds.or_).point
        worst = max(worst, abs(ssl - cmp))
    return CheckResult("reduction to AIPW", worst <= tol,
                       f"max |difference| {worst:.2e} over {n_fixtures} fixtures (tol {tol:g})")


def check_influence_mean(N: int = 100_000, n: int = 5000, auc: float = 0.95,
                         seed=0) -> CheckResult:
    """True nuisances plugged in on lowdim data: |mean| <= 3 SD / sqrt(N)."""
    data, truth = gen_lowdim(ScenarioSpec("lowdim", N, n, seed=seed),
                             SurrogateSpec.from_auc(auc, auc))
    X = np.asarray(data.confounders)
    S = np.asarray(data.surrogates)
    preds = NuisancePredictions(
        np.vstack([true_nuisance(truth, "ps", a, X) for a in (0, 1)]),
        np.vstack([true_nuisance(truth, "or", a, X) for a in (0, 1)]),
        np.vstack([truth.imputation_ps(a, X, S) for a in (0, 1)]),
        np.vstack([truth.imputation_or(a, X, S) for a in (0, 1)]),
    )
    V = influence_values(data.label_flag, data.treatment.filled(0), data.outcome.filled(0.0),
                         preds, n / N) - truth.ate
    mean, bound = float(V.mean()), 3.0 * float(V.std(ddof=1)) / np.sqrt(N)
    return CheckResult("influence mean zero", abs(mean) <= bound,
                       f"|mean| {abs(mean):.2e} vs 3 SD/sqrt(N) {bound:.2e} at N={N}")


def _fuzz_problem(rng):
    # n >= 10 p keeps complete separation (no finite minimiser) improbable
    p = int(rng.integers(2, 25))
    n = int(rng.integers(10 * p, 10 * p + 200))
    X = np.hstack([np.ones((n, 1)), rng.standard_normal((n, p - 1))])
    b = np.zeros(p)
    k = int(rng.integers(1, p))
    b[1:k + 1] = rng.normal(0, 1, k)
    t = X @ b + rng.normal(0, 0.3)
    A = (rng.random(n) < 1 / (1 + np.exp(-t))).astype(float)
    if A.min() == A.max():
        A[:2] = (0.0, 1.0)
    kind = int(rng.integers(0, 3))
    if kind == 0:
        loss = LogisticLoss(A)
    elif kind == 1:
        loss = LogisticLoss(A, rng.uniform(0.2, 3.0, n), normalizer=n)
    else:
        loss = CalibratedPSLoss(A, int(rng.integers(0, 2)), rng.uniform(0.05, 0.25, n), n)
    return X, loss, kind


def calibrated_has_minimiser(X, loss: CalibratedPSLoss, lam_vec, margin: float = 0.99) -> bool:
    """LP certificate that the penalized calibrated objective has a finite minimiser.

    Stationarity needs positive weights w_i = exp((-1)^a t_i) on the rows
    with A = a such that sum_i c_i (lin_i + (-1)^a 1(A_i = a) w_i) x_ij / n
    lies within [-lam_j, lam_j]; the LP asks for such weights (bounded away
    from zero, with a small margin on lam).
    """
    ind = loss.ind == 1
    c = loss.c / loss.normalizer
    base = X.T @ (c * loss.lin)
    M = (X[ind] * (c[ind] * loss.sign)[:, None]).T       # p x n_ind
    lam = np.where(np.isfinite(lam_vec), lam_vec * margin, np.inf)
    fin = np.isfinite(lam)
    A_ub = np.vstack([M[fin], -M[fin]])
    b_ub = np.concatenate([lam[fin] - base[fin], lam[fin] + base[fin]])
    res = linprog(np.zeros(ind.sum()), A_ub=A_ub, b_ub=b_ub, bounds=(1e-6, None),
                  method="highs")
    return res.status == 0


def check_kkt_fuzz(n_fits: int = 500, seed=0, tol: float = 1e-6) -> CheckResult:
    """Random Lasso / weighted / calibrated problems at random penalties.

    Calibrated draws whose objective is unbounded below (certified by
    ``calibrated_has_minimiser``) are redrawn; any fit failure on a
    well-posed draw counts against the check.
    """
    rng = make_rng(seed)
    worst, failures, done, skipped = 0.0, 0, 0, 0
    while done < n_fits:
        X, loss, _ = _fuzz_problem(rng)
        pen = np.ones(X.shape[1])
        pen[0] = 0.0
        lmax = lambda_max(X, loss, pen)
        lam = lmax * float(np.exp(rng.uniform(np.log(1e-3), 0.0)))
        lam_vec = np.where(pen > 0, lam, 0.0)
        if isinstance(loss, CalibratedPSLoss) and not calibrated_has_minimiser(X, loss, lam_vec):
            skipped += 1      # no finite minimiser exists, nothing to check
            continue
        try:
            m = fit_penalized(X, loss, lam, pen, tol=1e-8, max_iter=500)
        except Exception:  # noqa: BLE001 - counted as a failure
            failures += 1
            done += 1
            continue
        _, d1, _ = loss.derivs(X @ m.coefficients)
        worst = max(worst, kkt_residual(X.T @ d1, m.coefficients, lam_vec))
        done += 1
    ok = failures == 0 and worst <= tol
    return CheckResult("KKT fuzz", ok,
                       f"{n_fits} fits, {failures} failures, max KKT residual {worst:.2e} "
                       f"(tol {tol:g}); {skipped} draws without a minimiser skipped")


def check_calibrated_objective(n_problems: int = 200, seed=0, tol: float = 1e-6) -> CheckResult:
    """Finite-difference gradients and midpoint convexity of the calibrated losses.

    Both arms of the calibrated PS loss and the exponentially weighted OR
    loss are drawn with random initial fits, evaluated at random points.
    """
    rng = make_rng(seed)
    worst_grad, worst_convex = 0.0, -np.inf
    h = 1e-5
    for _ in range(n_problems):
        n, p = int(rng.integers(20, 80)), int(rng.integers(2, 6))
        X = np.hstack([np.ones((n, 1)), rng.standard_normal((n, p - 1))])
        A = (rng.random(n) < 0.5).astype(float)
        Y = (rng.random(n) < 0.5).astype(float)
        arm = int(rng.integers(0, 2))
        init = rng.normal(0, 0.7, p)
        M = float(rng.uniform(0.5, 3.0))
        losses = [calibrated_ps_loss(X, A, arm, init, M, n)]
        sel = A == arm
        if sel.sum() >= 2:
            w = calibrated_or_weights(X[sel], arm, init, M)
            losses.append((X[sel], LogisticLoss(Y[sel], w, normalizer=int(sel.sum()))))
        for item in losses:
            D, loss = item if isinstance(item, tuple) else (X, item)
            b = rng.normal(0, 0.5, p)
            _, d1, _ = loss.derivs(D @ b)
            fd = np.array([(loss.value(D @ (b + h * e)) - loss.value(D @ (b - h * e))) / (2 * h)
                           for e in np.eye(p)])
            worst_grad = max(worst_grad, float(np.max(np.abs(D.T @ d1 - fd))))
            b2, t = rng.normal(0, 1.0, p), float(rng.uniform(0.05, 0.95))
            gap = (loss.value(D @ (t * b + (1 - t) * b2))
                   - t * loss.value(D @ b) - (1 - t) * loss.value(D @ b2))
            worst_convex = max(worst_convex, float(gap))
    ok = worst_grad <= tol and worst_convex <= tol
    return CheckResult("calibrated objective", ok,
                       f"max gradient error {worst_grad:.2e}, max midpoint gap "
                       f"{worst_convex:.2e} (tol {tol:g})")


def check_auc_calibration(draws: int = 100_000, seed=0) -> CheckResult:
    """Empirical AUC within 0.01 of the tabulated level and 3 SE of the analytic value."""
    rng = make_rng(seed)
    parts, ok = [], True
    for auc, alpha in AUC_TO_ALPHA.items():
        s1 = sample_surrogate(np.ones(draws), alpha, rng)
        s0 = sample_surrogate(np.zeros(draws), alpha, rng)
        emp, se = empirical_auc(np.concatenate([s1, s0]),
                                np.concatenate([np.ones(draws), np.zeros(draws)]), True)
        exact = analytic_auc(alpha)
        good = abs(emp - auc) <= 0.01 and abs(emp - exact) <= 3 * se
        ok &= good
        parts.append(f"{alpha}:{emp:.4f}")
    return CheckResult("surrogate AUC calibration", ok, " ".join(parts))


def check_partition_of_unity(n_points: int = 10_000, seed=0, tol: float = 1e-12) -> CheckResult:
    rng = make_rng(seed)
    worst = 0.0
    for order, dims in ((1, (7,)), (1, (4, 5)), (2, (6,)), (3, (5, 4, 6))):
        box = tuple((-1.0, 2.0) for _ in dims)
        spec = SplineBasisSpec(order, dims, box)
        x = rng.uniform(-1.0, 2.0, (n_points, len(dims)))
        B = bspline_basis(x, spec)
        worst = max(worst, float(np.max(np.abs(B.sum(axis=1) - 1.0))))
    return CheckResult("spline partition of unity", worst <= tol,
                       f"max |sum - 1| {worst:.2e} on {n_points} points")


def check_normal_quantile() -> CheckResult:
    lo, hi = confidence_interval(0.0, 1.0, 100, 0.05)
    w1 = hi
    lo, hi = confidence_interval(0.0, 1.0, 1, 0.32)
    w2 = hi
    ok = abs(w1 - 0.19600) <= 1e-4 and abs(w2 - 0.9945) <= 1e-4
    return CheckResult("normal quantile", ok, f"half-widths {w1:.5f}, {w2:.5f}")


def validation_suites(quick: bool = False) -> List[Callable[[], CheckResult]]:
    return [
        lambda: check_reduction(100 if quick else 1000),
        lambda: check_influence_mean(),
        lambda: check_kkt_fuzz(100 if quick else 500),
        lambda: check_calibrated_objective(50 if quick else 200),
        lambda: check_auc_calibration(),
        lambda: check_partition_of_unity(),
        check_normal_quantile,
    ]


def run_suites(quick: bool = False, echo=print) -> List[CheckResult]:
    out = []
    for fn in validation_suites(quick):
        res = fn()
        if echo:
            echo(res.line())
        out.append(res)
    return out
