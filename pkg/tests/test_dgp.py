import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import expit

from smmal.dgp import (
    AUC_TO_ALPHA, ScenarioSpec, SurrogateSpec, TruthRecord, analytic_auc, ar1_gaussian,
    empirical_auc, gen_highdim, gen_lowdim, highdim_ate, make_rng, sample_surrogate,
    true_nuisance,
)
from smmal.validation import check_auc_calibration

from oracles import FROZEN_ATE


def mc_highdim_ate(flag, draws=10_000_000, seed=2024, chunk=1_000_000):
    rng = make_rng(seed)
    L = np.linalg.cholesky(np.array([[1, .5, .25], [.5, 1, .5], [.25, .5, 1]]))
    s = s2 = 0.0
    truth = TruthRecord("highdim", 0.0, SurrogateSpec(2.0, 2.0), flag)
    for _ in range(draws // chunk):
        X = np.hstack([np.ones((chunk, 1)), rng.standard_normal((chunk, 3)) @ L.T])
        d = truth.outcome(1, X) - truth.outcome(0, X)
        s += d.sum()
        s2 += (d * d).sum()
    m = s / draws
    return m, np.sqrt((s2 / draws - m * m) / draws)


# ------------------------------------------------------------ surrogates

def test_alpha_one_gives_uniform():
    rng = make_rng(0)
    for label in (0, 1):
        s = sample_surrogate(np.full(20000, label), 1.0, rng)
        assert stats.kstest(s, "uniform").pvalue > 1e-3


def test_surrogate_cdfs():
    rng = make_rng(1)
    a = 2.99
    s1 = sample_surrogate(np.ones(50000), a, rng)
    s0 = sample_surrogate(np.zeros(50000), a, rng)
    assert stats.kstest(s1, lambda s: s ** a).pvalue > 1e-3
    assert stats.kstest(s0, lambda s: 1 - (1 - s) ** a).pvalue > 1e-3


def test_empirical_auc_at_095_level():
    rng = make_rng(2)
    n = 100_000
    s1 = sample_surrogate(np.ones(n), 2.99, rng)
    s0 = sample_surrogate(np.zeros(n), 2.99, rng)
    auc = empirical_auc(np.r_[s1, s0], np.r_[np.ones(n), np.zeros(n)])
    assert abs(auc - 0.95) <= 0.005


def test_analytic_auc_against_table():
    assert abs(analytic_auc(1.84) - 0.80) <= 0.005
    for auc, alpha in AUC_TO_ALPHA.items():
        assert abs(analytic_auc(alpha) - auc) <= 0.01


def test_analytic_auc_by_quadrature():
    # P(S1 > S0) = int F0(s) f1(s) ds with F0(s) = 1 - (1 - s)^a and f1(s) = a s^(a-1)
    for a in AUC_TO_ALPHA.values():
        val, _ = integrate.quad(lambda s: (1 - (1 - s) ** a) * a * s ** (a - 1), 0, 1)
        assert abs(val - analytic_auc(a)) <= 1e-10


def test_auc_calibration_suite():
    res = check_auc_calibration(100_000, seed=3)
    assert res.passed, res.detail


def test_surrogate_alpha_below_one_rejected():
    with pytest.raises(ValueError):
        SurrogateSpec(0.5, 2.0)
    with pytest.raises(ValueError):
        sample_surrogate([1], 0.5, make_rng(0))
    with pytest.raises(KeyError):
        SurrogateSpec.from_auc(0.85, 0.95)


# ------------------------------------------------------------ low-dimensional

def test_lowdim_ate_is_zero_by_symmetry():
    f = lambda x: (1 - 1.2 / (3 - x ** 2)) - (1 - 1.2 / (3 - (1 - x) ** 2))
    val, _ = integrate.quad(f, 0, 1)
    assert abs(val) <= 1e-14
    _, truth = gen_lowdim(ScenarioSpec("lowdim", 100, 10), SurrogateSpec(2.0, 2.0))
    assert truth.ate == 0.0


def test_lowdim_mean_propensity_matches_quadrature():
    exact, _ = integrate.quad(lambda x: 1 - 1.2 / (3 - x ** 2), 0, 1)
    d, truth = gen_lowdim(ScenarioSpec("lowdim", 1_000_000, 10, seed=4), SurrogateSpec(2.0, 2.0))
    p = truth.ps(np.asarray(d.confounders))
    assert abs(p.mean() - exact) <= 3 * p.std() / np.sqrt(p.size)


def test_lowdim_labeled_count_and_range():
    d, truth = gen_lowdim(ScenarioSpec("lowdim", 10000, 500, seed=5), SurrogateSpec(2.99, 2.99))
    assert d.n_labeled == 500
    x = np.column_stack([np.ones(1001), np.linspace(0, 1, 1001)])
    p = truth.ps(x)
    assert p.min() >= 0.4 - 1e-12 and p.max() <= 0.6 + 1e-12
    assert np.isclose(p[0], 0.6) and np.isclose(p[-1], 0.4)


def test_true_nuisance_examples():
    low = TruthRecord("lowdim", 0.0, SurrogateSpec(2.0, 2.0))
    assert np.isclose(true_nuisance(low, "ps", 1, [[1.0, 0.0]])[0], 0.6)
    assert np.isclose(true_nuisance(low, "or", 0, [[1.0, 1.0]])[0], 0.6)
    assert np.isclose(true_nuisance(low, "ps", 0, [[1.0, 0.0]])[0], 0.4)
    high = TruthRecord("highdim", 0.0, SurrogateSpec(2.0, 2.0))
    assert true_nuisance(high, "ps", 1, [[1.0, 0.0, 0.0, 0.0, 5.0]])[0] == 0.5
    with pytest.raises(ValueError):
        true_nuisance(TruthRecord("other", 0.0, SurrogateSpec(2.0, 2.0)), "ps", 1, [[1.0, 0.0]])
    with pytest.raises(ValueError):
        true_nuisance(low, "imputation", 1, [[1.0, 0.0]])


def test_imputation_truths_satisfy_conditional_moments():
    # E[(A - Pi*(X, S)) h(X, S)] = 0 and E[1(A=a)(Y - m*(a, X, S)) h(X, S)] = 0 for any h
    N = 400_000
    d, truth = gen_lowdim(ScenarioSpec("lowdim", N, N - 1, seed=6), SurrogateSpec(2.39, 4.26))
    lab = d.labeled
    X = np.asarray(d.confounders)[lab]
    S = np.asarray(d.surrogates)[lab]
    A = d.treatment.compressed()
    Y = d.outcome.compressed()
    hs = [np.ones(len(A)), X[:, 1], S[:, 0], S[:, 1], S[:, 0] * S[:, 1], np.cos(3 * S[:, 1])]
    res_a = A - truth.imputation_ps(1, X, S)
    assert np.allclose(truth.imputation_ps(1, X, S) + truth.imputation_ps(0, X, S), 1.0)
    for a in (0, 1):
        res_y = (A == a) * (Y - truth.imputation_or(a, X, S))
        for h in hs:
            for r in (res_a, res_y):
                v = r * h
                assert abs(v.mean()) <= 3.5 * v.std() / np.sqrt(v.size)


# ------------------------------------------------------------ high-dimensional

def test_ar1_variance_and_lag_correlation():
    X = ar1_gaussian(100_000, 6, make_rng(7))
    n = X.shape[0]
    for j in range(6):
        assert abs(X[:, j].var() - 1.0) <= 3 * np.sqrt(2.0 / n)
    for j in range(5):
        r = np.corrcoef(X[:, j], X[:, j + 1])[0, 1]
        assert abs(r - 0.5) <= 3 * 0.75 / np.sqrt(n)


@pytest.mark.parametrize("flag", sorted(FROZEN_ATE))
def test_quadrature_ate_matches_frozen_monte_carlo(flag):
    m, se = FROZEN_ATE[flag]
    assert se <= 1e-3
    assert abs(highdim_ate(flag) - m) <= 3 * se


@pytest.mark.slow
@pytest.mark.parametrize("flag", ["correct_both", "wrong_or"])
def test_monte_carlo_oracle_reproduces(flag):
    m, se = mc_highdim_ate(flag)
    assert (m, se) == pytest.approx(FROZEN_ATE[flag], rel=1e-12)


def test_highdim_correct_ps_at_origin_and_flags():
    d, truth = gen_highdim(ScenarioSpec("highdim", 2000, 100, p=10, model_flag="wrong_ps", seed=8),
                           SurrogateSpec(2.0, 2.0))
    X = np.asarray(d.confounders)
    assert X.shape == (2000, 11) and np.all(X[:, 0] == 1)
    lin = 0.5 * X[:, 1] + 0.25 * X[:, 2] + 0.125 * X[:, 3]
    fac = 1 + 0.0625 * X[:, 1] + 0.125 * X[:, 2] - 0.5 * X[:, 3]
    assert np.allclose(truth.ps(X), expit(lin * fac))
    assert np.allclose(truth.outcome(1, X), expit(0.1 + 0.25 * X[:, 1] + 0.125 * X[:, 2]
                                                  + 0.0625 * X[:, 3]))
    p = truth.ps(X)
    assert p.min() > 0 and p.max() < 1


def test_generators_are_deterministic():
    spec = ScenarioSpec("highdim", 500, 50, p=5, model_flag="wrong_or", seed=(1, 2, 3))
    a, _ = gen_highdim(spec, SurrogateSpec(2.0, 3.0))
    b, _ = gen_highdim(spec, SurrogateSpec(2.0, 3.0))
    assert np.array_equal(a.confounders, b.confounders)
    assert np.array_equal(a.outcome.filled(-1), b.outcome.filled(-1))
    assert np.array_equal(a.surrogates, b.surrogates)


def test_scenario_spec_validation():
    with pytest.raises(ValueError):
        ScenarioSpec("lowdim", 100, 100)
    with pytest.raises(ValueError):
        ScenarioSpec("highdim", 100, 10, p=2)
    with pytest.raises(ValueError):
        ScenarioSpec("highdim", 100, 10, p=5, model_flag="wrong_both")
    with pytest.raises(ValueError):
        ScenarioSpec("middim", 100, 10)
