"""Simulation designs: mixture-Beta surrogates, a smooth one-dimensional
scenario and AR(1) high-dimensional logistic scenarios."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.special import beta as beta_fn, expit
from scipy.stats import rankdata

from .datamodel import make_dataset

__all__ = [
    "AUC_TO_ALPHA", "SurrogateSpec", "ScenarioSpec", "TruthRecord",
    "make_rng", "sample_surrogate", "analytic_auc", "empirical_auc",
    "gen_lowdim", "gen_highdim", "generate", "true_nuisance", "highdim_ate",
]

# AUC level -> Beta shape parameter
AUC_TO_ALPHA = {0.80: 1.84, 0.90: 2.39, 0.95: 2.99, 0.99: 4.26, 0.999: 5.88}

HIGHDIM_FLAGS = ("correct_both", "wrong_ps", "wrong_or")


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator from an int, a tuple of ints or a SeedSequence."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(list(seed) if isinstance(seed, (tuple, list)) else seed)
    return np.random.Generator(np.random.Philox(seed))


def alpha_for_auc(auc: float) -> float:
    for k, v in AUC_TO_ALPHA.items():
        if abs(k - auc) < 1e-9:
            return v
    raise KeyError(f"AUC {auc} is not one of the tabulated levels {sorted(AUC_TO_ALPHA)}")


@dataclass(frozen=True)
class SurrogateSpec:
    alpha_A: float
    alpha_Y: float

    def __post_init__(self):
        if self.alpha_A < 1 or self.alpha_Y < 1:
            raise ValueError("Beta shape parameters must be >= 1")

    @classmethod
    def from_auc(cls, auc_A: float, auc_Y: float) -> "SurrogateSpec":
        return cls(alpha_for_auc(auc_A), alpha_for_auc(auc_Y))


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: str = "lowdim"
    N: int = 10000
    n_labels: int = 500
    p: Optional[int] = None
    model_flag: str = "correct_both"
    seed: object = 0

    def __post_init__(self):
        if self.scenario not in ("lowdim", "highdim"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if not 0 < self.n_labels < self.N:
            raise ValueError("need 0 < n_labels < N")
        if self.scenario == "highdim":
            if self.p is None or self.p < 3:
                raise ValueError("highdim needs p >= 3")
            if self.model_flag not in HIGHDIM_FLAGS:
                raise ValueError(f"model_flag must be one of {HIGHDIM_FLAGS}")


def sample_surrogate(label, alpha: float, rng) -> np.ndarray:
    """Inverse-CDF draw from Beta(alpha, 1) where label == 1, Beta(1, alpha) otherwise."""
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    label = np.asarray(label)
    u = rng.random(label.shape)
    return np.where(label == 1, u ** (1.0 / alpha), 1.0 - (1.0 - u) ** (1.0 / alpha))


def analytic_auc(alpha: float) -> float:
    """P(S1 > S0) for S1 ~ Beta(alpha, 1), S0 ~ Beta(1, alpha)."""
    return 1.0 - alpha * beta_fn(alpha, alpha + 1.0)


def empirical_auc(scores, labels, return_se: bool = False):
    """Mann-Whitney estimate of the ROC AUC, optionally with its DeLong standard error."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    ranks = rankdata(scores)
    n1 = labels.sum()
    n0 = labels.size - n1
    auc = float((ranks[labels].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))
    if not return_se:
        return auc
    # structural components: share of the other class each score beats
    v10 = (ranks[labels] - rankdata(scores[labels])) / n0
    v01 = 1.0 - (ranks[~labels] - rankdata(scores[~labels])) / n1
    se = float(np.sqrt(v10.var(ddof=1) / n1 + v01.var(ddof=1) / n0))
    return auc, se


def _beta_density(s, alpha, label):
    # Beta(alpha,1) for label 1, Beta(1,alpha) for label 0
    s = np.clip(s, 1e-300, 1 - 1e-16)
    return np.where(label == 1, alpha * s ** (alpha - 1), alpha * (1 - s) ** (alpha - 1))


# ---------------------------------------------------------------- truth

def _lowdim_ps(x):
    return 1.0 - 1.2 / (3.0 - x ** 2)


def _lowdim_or(arm, x):
    return _lowdim_ps(x) if arm == 1 else 1.0 - 1.2 / (3.0 - (1.0 - x) ** 2)


def _hd_factor(X):
    return 1.0 + 0.0625 * X[:, 1] + 0.125 * X[:, 2] - 0.5 * X[:, 3]


def _hd_ps_lin(X, flag):
    lin = 0.5 * X[:, 1] + 0.25 * X[:, 2] + 0.125 * X[:, 3]
    return lin * _hd_factor(X) if flag == "wrong_ps" else lin


def _hd_or_lin(arm, X, flag):
    lin = 0.1 + 0.25 * X[:, 1] + 0.125 * X[:, 2] + 0.0625 * X[:, 3]
    lin = lin if arm == 1 else -lin
    return lin * _hd_factor(X) if flag == "wrong_or" else lin


@dataclass(frozen=True)
class TruthRecord:
    scenario: str
    ate: float
    surrogates: SurrogateSpec
    model_flag: str = "correct_both"
    ate_se: float = 0.0
    ps_coefficients: Optional[tuple] = None
    or_coefficients: Optional[dict] = None

    # confounder matrices include the leading intercept column
    def ps(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.scenario == "lowdim":
            return _lowdim_ps(X[:, 1])
        if self.scenario == "highdim":
            return expit(_hd_ps_lin(X, self.model_flag))
        raise ValueError(f"unknown scenario {self.scenario!r}")

    def outcome(self, arm, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.scenario == "lowdim":
            return _lowdim_or(arm, X[:, 1])
        if self.scenario == "highdim":
            return expit(_hd_or_lin(arm, X, self.model_flag))
        raise ValueError(f"unknown scenario {self.scenario!r}")

    def _s_likelihoods(self, X, S):
        s_a, s_y = S[:, 0], S[:, 1]
        aA, aY = self.surrogates.alpha_A, self.surrogates.alpha_Y
        fy1 = _beta_density(s_y, aY, 1)
        fy0 = _beta_density(s_y, aY, 0)
        h = {}
        for arm in (0, 1):
            mu = self.outcome(arm, X)
            h[arm] = (mu * fy1, mu * fy1 + (1 - mu) * fy0)
        fa = {1: _beta_density(s_a, aA, 1), 0: _beta_density(s_a, aA, 0)}
        return h, fa

    def imputation_ps(self, arm, X, S) -> np.ndarray:
        """P(A = arm | X, S) by Bayes' rule over the surrogate likelihoods."""
        h, fa = self._s_likelihoods(X, S)
        pi1 = self.ps(X)
        j1 = pi1 * fa[1] * h[1][1]
        j0 = (1 - pi1) * fa[0] * h[0][1]
        p1 = j1 / (j1 + j0)
        return p1 if arm == 1 else 1.0 - p1

    def imputation_or(self, arm, X, S) -> np.ndarray:
        """E(Y | A = arm, X, S)."""
        h, _ = self._s_likelihoods(X, S)
        num, den = h[arm]
        return num / den


def true_nuisance(truth: TruthRecord, which: str, arm: int, X) -> np.ndarray:
    if which == "ps":
        p1 = truth.ps(X)
        return p1 if arm == 1 else 1.0 - p1
    if which == "or":
        return truth.outcome(arm, X)
    raise ValueError(f"unknown nuisance {which!r}")


@lru_cache(maxsize=None)
def highdim_ate(model_flag: str = "correct_both", n_nodes: int = 60) -> float:
    """E[mu(1, X) - mu(0, X)] by Gauss-Hermite quadrature over (X1, X2, X3).

    Only the first three AR(1) coordinates enter the outcome models, and
    they are jointly Gaussian with covariance 0.5^|i-j|.
    """
    z, w = np.polynomial.hermite_e.hermegauss(n_nodes)
    w = w / w.sum()
    cov = np.array([[1.0, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 1.0]])
    L = np.linalg.cholesky(cov)
    Z = np.stack(np.meshgrid(z, z, z, indexing="ij"), -1).reshape(-1, 3)
    W = np.einsum("i,j,k->ijk", w, w, w).ravel()
    X3 = Z @ L.T
    X = np.hstack([np.ones((X3.shape[0], 1)), X3])
    diff = expit(_hd_or_lin(1, X, model_flag)) - expit(_hd_or_lin(0, X, model_flag))
    return float(W @ diff)


# ------------------------------------------------------------ generators

def _label_rows(N, n, rng):
    r = np.zeros(N, dtype=int)
    r[rng.choice(N, size=n, replace=False)] = 1
    return r


def _finish(rng, spec, X, pi1, mu, surrogates, truth):
    N = spec.N
    A = (rng.random(N) < pi1).astype(float)
    p_y = np.where(A == 1, mu[1], mu[0])
    Y = (rng.random(N) < p_y).astype(float)
    s_a = sample_surrogate(A, surrogates.alpha_A, rng)
    s_y = sample_surrogate(Y, surrogates.alpha_Y, rng)
    R = _label_rows(N, spec.n_labels, rng)
    data = make_dataset(R, A, Y, X, np.column_stack([s_a, s_y]), bound_M=1.0)
    return data, truth


def gen_lowdim(spec: ScenarioSpec, surrogates: SurrogateSpec):
    """X ~ U(0,1); smooth PS/OR; returns ``(dataset, truth)`` with ATE exactly 0."""
    if spec.N < 10:
        raise ValueError("N must be >= 10")
    rng = make_rng(spec.seed)
    x = rng.random(spec.N)
    X = np.column_stack([np.ones(spec.N), x])
    truth = TruthRecord("lowdim", 0.0, surrogates)
    mu = {a: _lowdim_or(a, x) for a in (0, 1)}
    return _finish(rng, spec, X, _lowdim_ps(x), mu, surrogates, truth)


def ar1_gaussian(N, p, rng) -> np.ndarray:
    U = rng.standard_normal((N, p))
    X = np.empty_like(U)
    X[:, 0] = U[:, 0]
    c = np.sqrt(0.75)
    for j in range(1, p):
        X[:, j] = 0.5 * X[:, j - 1] + c * U[:, j]
    return X


def gen_highdim(spec: ScenarioSpec, surrogates: SurrogateSpec):
    """AR(1) Gaussian confounders, logistic PS/OR with optional misspecification."""
    if spec.scenario != "highdim":
        spec = ScenarioSpec("highdim", spec.N, spec.n_labels, spec.p, spec.model_flag, spec.seed)
    rng = make_rng(spec.seed)
    X = np.hstack([np.ones((spec.N, 1)), ar1_gaussian(spec.N, spec.p, rng)])
    flag = spec.model_flag
    truth = TruthRecord(
        "highdim", highdim_ate(flag), surrogates, flag,
        ps_coefficients=(0.0, 0.5, 0.25, 0.125),
        or_coefficients={1: (0.1, 0.25, 0.125, 0.0625), 0: (-0.1, -0.25, -0.125, -0.0625)},
    )
    pi1 = expit(_hd_ps_lin(X, flag))
    mu = {a: expit(_hd_or_lin(a, X, flag)) for a in (0, 1)}
    return _finish(rng, spec, X, pi1, mu, surrogates, truth)


def generate(spec: ScenarioSpec, surrogates: SurrogateSpec):
    if spec.scenario == "lowdim":
        return gen_lowdim(spec, surrogates)
    return gen_highdim(spec, surrogates)
