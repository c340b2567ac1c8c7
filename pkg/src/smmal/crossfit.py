"""Fold plans and cross-fitted nuisance predictions.

Every prediction for row ``i`` comes from models whose training rows exclude
``fold(i)``; the initial fits of the calibrated pipeline additionally
exclude the fold of the row whose calibration weight they supply.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .datamodel import SemiSupervisedDataset
from .glm import (
    CalibratedPSLoss, EmptyArmError, FitError, FitSpec, LogisticLoss,
    calibrated_or_weights, default_lambda_grid, fit_calibrated_or, fit_calibrated_ps,
    fit_lasso_logistic, lambda_max, select_lambda_cv, sigmoid_dot, truncate_tau,
)
from .splines import fit_spline_fixed, fit_spline_nuisance

log = logging.getLogger(__name__)

__all__ = [
    "FoldPlan", "NuisancePredictions", "SplineLearnerConfig", "DRConfig", "FoldFitError",
    "assign_folds", "crossfit_lowdim", "crossfit_dr",
]


class FoldFitError(FitError):
    """A nuisance fit failed inside a specific fold (or fold pair)."""

    def __init__(self, where, exc):
        super().__init__(f"{where}: {type(exc).__name__}: {exc}")
        self.where = where
        self.cause = exc


@dataclass(frozen=True)
class FoldPlan:
    n_folds: int
    assignment: np.ndarray
    seed: object = None

    def fold(self, k) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def complement(self, k) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)

    def complement2(self, k1, k2) -> np.ndarray:
        return np.flatnonzero((self.assignment != k1) & (self.assignment != k2))

    def restrict(self, mask) -> "FoldPlan":
        """The plan seen by a row subset (e.g. the labeled rows)."""
        return FoldPlan(self.n_folds, np.asarray(self.assignment)[np.asarray(mask)], self.seed)


def assign_folds(N: int, K: int, seed=0) -> FoldPlan:
    """Uniformly random partition into K folds whose sizes differ by at most one."""
    if not 2 <= K <= N:
        raise ValueError(f"need 2 <= K <= N, got K={K}, N={N}")
    from .dgp import make_rng
    rng = make_rng(seed)
    assignment = rng.permutation(np.arange(N) % K)
    assignment.setflags(write=False)
    return FoldPlan(K, assignment, seed)


@dataclass
class NuisancePredictions:
    """Arrays of shape (2, N) indexed ``[arm, row]``; imputation arrays may be None."""

    ps: np.ndarray
    or_: np.ndarray
    imp_ps: Optional[np.ndarray] = None
    imp_or: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict, repr=False)

    def subset(self, idx) -> "NuisancePredictions":
        pick = lambda a: None if a is None else a[:, idx]
        return NuisancePredictions(pick(self.ps), pick(self.or_), pick(self.imp_ps),
                                   pick(self.imp_or), self.diagnostics)


def _child_seed(seed, *path):
    base = seed if isinstance(seed, (tuple, list)) else (seed,)
    return tuple(int(v) for v in base) + tuple(int(v) for v in path)


def _check_arms(A_train, where):
    for a in (0, 1):
        if not np.any(A_train == a):
            raise EmptyArmError(f"{where}: no labeled rows with A={a} in the training split")


# ------------------------------------------------------------ splines

@dataclass
class SplineLearnerConfig:
    order: int = 1
    cv_folds: int = 10
    max_degree: Optional[int] = None     # default floor(sqrt(n)) - 1
    ps_clamp_M: float = 20.0
    degree_selection: str = "global"     # or "per_fold"
    seed: int = 0


def crossfit_lowdim(data: SemiSupervisedDataset, plan: FoldPlan,
                    config: SplineLearnerConfig = None,
                    use_imputation: bool = True) -> NuisancePredictions:
    """Cross-fitted B-spline estimates of pi, mu (on X) and Pi, m (on W = (X, S)).

    With ``degree_selection="global"`` each nuisance's basis size is chosen
    once by CV over all labeled rows and then refit per fold; ``"per_fold"``
    repeats the CV inside every training split.
    """
    cfg = config or SplineLearnerConfig()
    N = data.n_rows
    lab = data.labeled
    A = data.treatment.filled(0).astype(float)
    Y = data.outcome.filled(0.0)
    X_in = np.asarray(data.confounders)[:, 1:]
    W_in = np.hstack([X_in, data.surrogates])
    box_x = [(float(c.min()), float(c.max())) for c in X_in.T]
    box_w = [(float(c.min()), float(c.max())) for c in W_in.T]
    max_deg = cfg.max_degree or int(np.floor(np.sqrt(data.n_labeled))) - 1

    # role -> (inputs, box, response, arm filter, clamp M)
    roles = {
        "ps": (X_in, box_x, A, None, cfg.ps_clamp_M),
        "or1": (X_in, box_x, Y, 1, None),
        "or0": (X_in, box_x, Y, 0, None),
    }
    if use_imputation:
        roles.update({
            "imp_ps": (W_in, box_w, A, None, None),
            "imp_or1": (W_in, box_w, Y, 1, None),
            "imp_or0": (W_in, box_w, Y, 0, None),
        })

    def rows_for(role, base):
        arm = roles[role][3]
        keep = base[lab[base]]
        return keep if arm is None else keep[A[keep] == arm]

    def select(role, rows, seed):
        inp, box, resp, _, M = roles[role]
        return fit_spline_nuisance(inp[rows], resp[rows], max_degree=max_deg, folds=cfg.cv_folds,
                                   order=cfg.order, M=M, seed=seed, domain_box=box)

    selected = {}
    if cfg.degree_selection == "global":
        all_rows = np.arange(N)
        _check_arms(A[lab], "labeled data")
        for r_i, role in enumerate(roles):
            selected[role] = select(role, rows_for(role, all_rows),
                                    _child_seed(cfg.seed, 0, r_i)).basis_spec
    elif cfg.degree_selection != "per_fold":
        raise ValueError(f"unknown degree_selection {cfg.degree_selection!r}")

    out = {role: np.empty(N) for role in roles}
    degrees = {role: [] for role in roles}
    for k in range(plan.n_folds):
        train = plan.complement(k)
        test = plan.fold(k)
        _check_arms(A[train[lab[train]]], f"fold {k}")
        for r_i, role in enumerate(roles):
            inp, box, resp, _, M = roles[role]
            rows = rows_for(role, train)
            try:
                if role in selected:
                    model = fit_spline_fixed(inp[rows], resp[rows], selected[role], M=M)
                else:
                    model = select(role, rows, _child_seed(cfg.seed, 1, k, r_i))
            except (RuntimeError, ValueError) as exc:
                raise FoldFitError(f"fold {k}, model {role}", exc) from exc
            degrees[role].append(model.degree)
            out[role][test] = model.predict(inp[test])

    ps1 = out["ps"]
    preds = NuisancePredictions(
        ps=np.vstack([1.0 - ps1, ps1]),
        or_=np.vstack([out["or0"], out["or1"]]),
        diagnostics={"degrees": degrees},
    )
    if use_imputation:
        p1 = out["imp_ps"]
        preds.imp_ps = np.vstack([1.0 - p1, p1])
        preds.imp_or = np.vstack([out["imp_or0"], out["imp_or1"]])
    return preds


# ------------------------------------------------------ calibrated Lasso

@dataclass
class DRConfig:
    cv_folds: int = 10
    n_lambda: int = 50
    lambda_ratio: float = 0.01
    tolerance: float = 1e-7
    max_iterations: int = 200
    seed: int = 0
    # fixed penalties by role name skip CV for that role (e.g. {"alpha_init": 1e3})
    lambdas: dict = field(default_factory=dict)


_ROLES = ("eta", "zeta0", "zeta1", "alpha_init", "beta0_init", "beta1_init",
          "alpha0", "alpha1", "beta0", "beta1")


def _cv_lambda(cfg, role, X, loss, seed):
    if role in cfg.lambdas:
        return float(cfg.lambdas[role])
    pen = np.ones(X.shape[1])
    pen[0] = 0.0
    grid = default_lambda_grid(lambda_max(X, loss, pen), cfg.n_lambda, cfg.lambda_ratio)
    spec = FitSpec(lambda_grid=grid, tolerance=cfg.tolerance, max_iterations=cfg.max_iterations)
    return select_lambda_cv(X, spec=spec, folds=cfg.cv_folds, seed=seed, loss=loss)


def _select_dr_lambdas(data, cfg, M, use_imputation):
    lab = np.flatnonzero(data.labeled)
    n = lab.size
    A = data.treatment.filled(0)[lab].astype(float)
    Y = data.outcome.filled(0.0)[lab]
    X = np.asarray(data.confounders)[lab]
    W = data.covariates[lab]
    spec = FitSpec(tolerance=cfg.tolerance, max_iterations=cfg.max_iterations)
    lam = {}
    seed = lambda i: _child_seed(cfg.seed, 2, i)
    if use_imputation:
        lam["eta"] = _cv_lambda(cfg, "eta", W, LogisticLoss(A), seed(0))
        for a in (0, 1):
            m = A == a
            lam[f"zeta{a}"] = _cv_lambda(cfg, f"zeta{a}", W[m], LogisticLoss(Y[m]), seed(1 + a))
    lam["alpha_init"] = _cv_lambda(cfg, "alpha_init", X, LogisticLoss(A), seed(3))
    alpha_full = fit_lasso_logistic(X, A, spec, lam["alpha_init"])
    beta_full = {}
    for a in (0, 1):
        m = A == a
        lam[f"beta{a}_init"] = _cv_lambda(cfg, f"beta{a}_init", X[m], LogisticLoss(Y[m]), seed(4 + a))
        beta_full[a] = fit_lasso_logistic(X[m], Y[m], spec, lam[f"beta{a}_init"])
    for a in (0, 1):
        c = sigmoid_dot(truncate_tau(X @ beta_full[a].coefficients, M))
        lam[f"alpha{a}"] = _cv_lambda(cfg, f"alpha{a}", X, CalibratedPSLoss(A, a, c, n), seed(6 + a))
        m = A == a
        w = calibrated_or_weights(X[m], a, alpha_full, M)
        lam[f"beta{a}"] = _cv_lambda(cfg, f"beta{a}", X[m],
                                     LogisticLoss(Y[m], w, normalizer=int(m.sum())), seed(8 + a))
    return lam


def crossfit_dr(data: SemiSupervisedDataset, plan: FoldPlan, config: DRConfig = None,
                M: float = 2.0, use_imputation: bool = True) -> NuisancePredictions:
    """Two-level cross-fitted calibrated Lasso nuisances.

    1. imputation Lasso fits (A ~ W, Y ~ W per arm) on labeled rows outside fold k;
    2. initial Lasso fits (A ~ X, Y ~ X per arm) on labeled rows outside folds k1, k2;
    3. calibrated PS/OR fits on labeled rows outside k1, where a row in fold
       k2 is weighted through the initial fits of pair (k1, k2);
    4. predictions on fold k1: pi(1) = g(tau(x'alpha_1)), pi(0) = g(tau(-x'alpha_0)),
       mu(a) = g(x'beta_a), Pi(1) = g(w'eta) = 1 - Pi(0), m(a) = g(w'zeta_a).

    Penalties are chosen once per nuisance by CV over all labeled rows.
    """
    cfg = config or DRConfig()
    K = plan.n_folds
    if K < 3:
        raise ValueError("two-level cross-fitting needs K >= 3")
    N = data.n_rows
    n = data.n_labeled
    lab = data.labeled
    A = data.treatment.filled(0).astype(float)
    Y = data.outcome.filled(0.0)
    X = np.asarray(data.confounders)
    W = data.covariates
    spec = FitSpec(tolerance=cfg.tolerance, max_iterations=cfg.max_iterations)

    _check_arms(A[lab], "labeled data")
    try:
        lam = _select_dr_lambdas(data, cfg, M, use_imputation)
    except FitError as exc:
        raise FoldFitError("penalty selection", exc) from exc

    def fit(where, fn, *args, **kw):
        try:
            return fn(*args, **kw)
        except FitError as exc:
            raise FoldFitError(where, exc) from exc

    labeled_rows = lambda idx: idx[lab[idx]]

    # step 2: initial fits on out-of-two-folds data; keep per-row predictors
    t_alpha = {}                      # (k1, k2) -> x'alpha_init on labeled rows of fold k2
    t_beta = {0: {}, 1: {}}
    for k1, k2 in itertools.combinations(range(K), 2):
        tr = labeled_rows(plan.complement2(k1, k2))
        _check_arms(A[tr], f"fold pair ({k1}, {k2})")
        a_init = fit(f"pair ({k1},{k2}) alpha_init", fit_lasso_logistic,
                     X[tr], A[tr], spec, lam["alpha_init"])
        b_init = {}
        for a in (0, 1):
            ta = tr[A[tr] == a]
            b_init[a] = fit(f"pair ({k1},{k2}) beta{a}_init", fit_lasso_logistic,
                            X[ta], Y[ta], spec, lam[f"beta{a}_init"])
        for ka, kb in ((k1, k2), (k2, k1)):
            rows = labeled_rows(plan.fold(kb))
            t_alpha[ka, kb] = X[rows] @ a_init.coefficients
            for a in (0, 1):
                t_beta[a][ka, kb] = X[rows] @ b_init[a].coefficients

    ps = np.empty((2, N))
    or_ = np.empty((2, N))
    imp_ps = np.empty((2, N)) if use_imputation else None
    imp_or = np.empty((2, N)) if use_imputation else None
    support = {r: [] for r in _ROLES}
    warm = {}
    for k1 in range(K):
        test = plan.fold(k1)
        # rows of the calibration set, ordered fold by fold to line up with t_alpha/t_beta
        others = [k2 for k2 in range(K) if k2 != k1]
        rows = np.concatenate([labeled_rows(plan.fold(k2)) for k2 in others])
        ta = np.concatenate([t_alpha[k1, k2] for k2 in others])
        tb = {a: np.concatenate([t_beta[a][k1, k2] for k2 in others]) for a in (0, 1)}
        _check_arms(A[rows], f"fold {k1}")

        for a in (0, 1):
            m = fit(f"fold {k1} alpha{a}", fit_calibrated_ps, X[rows], A[rows], a, tb[a], spec,
                    lam[f"alpha{a}"], M, n, warm.get(f"alpha{a}"))
            warm[f"alpha{a}"] = m.coefficients
            support[f"alpha{a}"].append(m.support.size)
            lin = truncate_tau(X[test] @ m.coefficients, M)
            ps[a, test] = expit(lin) if a == 1 else expit(-lin)

            sel = A[rows] == a
            m = fit(f"fold {k1} beta{a}", fit_calibrated_or, X[rows][sel], Y[rows][sel], a,
                    ta[sel], spec, lam[f"beta{a}"], M, warm.get(f"beta{a}"))
            warm[f"beta{a}"] = m.coefficients
            support[f"beta{a}"].append(m.support.size)
            or_[a, test] = expit(X[test] @ m.coefficients)

        if use_imputation:
            # step 1 (single-level): imputation models over W
            tr = labeled_rows(plan.complement(k1))
            eta = fit(f"fold {k1} eta", fit_lasso_logistic, W[tr], A[tr], spec, lam["eta"])
            p1 = expit(W[test] @ eta.coefficients)
            imp_ps[1, test] = p1
            imp_ps[0, test] = 1.0 - p1
            support["eta"].append(eta.support.size)
            for a in (0, 1):
                ta_rows = tr[A[tr] == a]
                z = fit(f"fold {k1} zeta{a}", fit_lasso_logistic, W[ta_rows], Y[ta_rows], spec,
                        lam[f"zeta{a}"])
                imp_or[a, test] = expit(W[test] @ z.coefficients)
                support[f"zeta{a}"].append(z.support.size)

    return NuisancePredictions(ps, or_, imp_ps, imp_or,
                               diagnostics={"lambdas": lam, "support": support})
