import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial.hermite_e import hermegauss
from scipy import stats

from bpre.envmodel import (
    DomainError,
    EnvModel,
    EnvParam,
    FiniteTable,
    LatticeWarning,
    LogNormal,
    Offspring,
    PopulationOverflow,
    TwoPoint,
    env_moment,
    law_from_dict,
    offspring_totals,
    sample_env_param,
    sample_offspring_total,
    tilt,
)

L = EnvModel(LogNormal(-0.15, 0.25))
LSTAR = EnvModel(LogNormal(-0.5, 0.5))


def gauss_hermite_moment(mu, s2, alpha, deg=80):
    x, w = hermegauss(deg)
    return float(np.dot(w, np.exp(alpha * (mu + math.sqrt(s2) * x))) / math.sqrt(2 * math.pi))


@pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0, 1.2, 2.0, 3.0])
def test_lognormal_moment_matches_quadrature(alpha):
    assert env_moment(L, alpha) == pytest.approx(gauss_hermite_moment(-0.15, 0.25, alpha), rel=1e-12)


def test_lognormal_canonical_values():
    assert env_moment(L, 1.2) == pytest.approx(1.0, abs=1e-14)
    assert env_moment(LSTAR, 2.0) == pytest.approx(1.0, abs=1e-14)


def test_finite_table_moment_by_hand():
    law = FiniteTable((0.2, 0.5, 0.3), (0.4, 1.0, 1.7))
    m = EnvModel(law)
    assert env_moment(m, 2.0) == pytest.approx(0.2 * 0.16 + 0.5 + 0.3 * 2.89, rel=1e-14)


def test_negative_alpha_is_domain_error():
    with pytest.raises(DomainError):
        env_moment(L, -0.1)


@pytest.mark.parametrize("law", [LogNormal(-0.5, 0.5), FiniteTable((0.2, 0.5, 0.3), (0.4, 1.0, 1.7))])
@pytest.mark.parametrize("alpha", [0.3, 1.0, 2.5])
def test_log_moment_derivatives_by_finite_differences(law, alpha):
    h = 1e-5
    L0, d1, d2 = law.log_moment(alpha)
    Lp, Lm = law.log_moment(alpha + h)[0], law.log_moment(alpha - h)[0]
    assert d1 == pytest.approx((Lp - Lm) / (2 * h), rel=1e-7)
    assert d2 == pytest.approx((Lp - 2 * L0 + Lm) / h**2, rel=1e-4)


def test_weights_must_sum_to_one():
    with pytest.raises(ValueError, match="sum to 1"):
        TwoPoint((0.7, 0.2), (0.5, 1.9))


def test_two_point_needs_two_atoms():
    with pytest.raises(ValueError):
        TwoPoint((0.5, 0.25, 0.25), (0.5, 1.0, 2.0))


def test_means_positive():
    with pytest.raises(ValueError):
        FiniteTable((0.5, 0.5), (0.0, 2.0))


def test_tilted_table_weights_sum_to_one():
    law = TwoPoint((0.7, 0.3), (0.5, 1.9))
    for a in (0.5, 1.7344, 4.0, 20.0):
        t = law.tilted(a)
        assert math.fsum(t.weights) == pytest.approx(1.0, abs=1e-15)
        assert isinstance(t, TwoPoint)


def test_tilted_lognormal_shifts_mean():
    tm = tilt(LSTAR, 2.0)
    assert tm.model.env_law == LogNormal(0.5, 0.5)
    assert tm.log_lambda == pytest.approx(0.0, abs=1e-15)


def test_lattice_warning():
    with pytest.warns(LatticeWarning):
        EnvModel(TwoPoint((0.5, 0.5), (0.5, 2.0)))
    with pytest.warns(LatticeWarning):
        EnvModel(TwoPoint((0.5, 0.5), (0.25, 2.0)))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        EnvModel(TwoPoint((0.7, 0.3), (0.5, 1.9)))


def test_law_from_dict_round_trip():
    for law in (LogNormal(-0.5, 0.5), TwoPoint((0.7, 0.3), (0.5, 1.9)), FiniteTable((1.0,), (0.8,))):
        assert law_from_dict(law.params()) == law
    with pytest.raises(ValueError):
        law_from_dict({"kind": "Beta"})


def test_env_param_positive():
    with pytest.raises(ValueError):
        EnvParam(0.0)
    p = sample_env_param(L, np.random.default_rng(0))
    assert p.a > 0


def test_offspring_total_edge_cases():
    rng = np.random.default_rng(0)
    assert sample_offspring_total(L, 1.3, 0, rng) == 0
    assert sample_offspring_total(L, 0.0, 10, rng) == 0
    with pytest.raises(ValueError):
        sample_offspring_total(L, 1.0, -1, rng)


def test_offspring_overflow():
    small = EnvModel(LogNormal(0.0, 1.0), cap=1000)
    with pytest.raises(PopulationOverflow):
        sample_offspring_total(small, 50.0, 1000, np.random.default_rng(0))
    tot, sat = offspring_totals(small, np.array([50.0, 0.1]), np.array([1000, 3]), np.random.default_rng(0))
    assert sat.tolist() == [True, False]
    assert tot[0] == 1000


def naive_totals(offspring, a, z, size, rng):
    if offspring is Offspring.POISSON:
        return rng.poisson(a, size=(size, z)).sum(axis=1)
    # numpy's geometric counts trials, so shift to {0, 1, ...}
    return (rng.geometric(1.0 / (1.0 + a), size=(size, z)) - 1).sum(axis=1)


@pytest.mark.parametrize("offspring", list(Offspring))
def test_aggregated_matches_naive_sum(offspring):
    rng = np.random.default_rng(12)
    model = EnvModel(LogNormal(0.0, 1.0), offspring)
    a, z, size = 1.3, 7, 40_000
    agg, _ = offspring_totals(model, np.full(size, a), np.full(size, z), rng)
    naive = naive_totals(offspring, a, z, size, rng)
    # chi-square homogeneity on pooled cells
    hi = int(np.quantile(naive, 0.99))
    bins = np.arange(0, hi + 2)
    c1 = np.bincount(np.minimum(agg, hi + 1), minlength=hi + 2)
    c2 = np.bincount(np.minimum(naive, hi + 1), minlength=hi + 2)
    keep = (c1 + c2) >= 10
    _, p, _, _ = stats.chi2_contingency(np.vstack([c1[keep], c2[keep]]))
    assert p > 1e-3
    assert len(bins) > 5


@pytest.mark.parametrize("offspring", list(Offspring))
def test_large_mean_gaussian_branch_moments(offspring):
    rng = np.random.default_rng(3)
    model = EnvModel(LogNormal(0.0, 1.0), offspring)
    a, z, size = 1.5, 10**8, 20_000
    tot, _ = offspring_totals(model, np.full(size, a), np.full(size, z), rng)
    var = z * a if offspring is Offspring.POISSON else z * (a + a * a)
    assert abs(tot.mean() - z * a) < 5 * math.sqrt(var / size)
    assert tot.var() / var == pytest.approx(1.0, abs=0.05)


def geometric_cumulants_bruteforce(a, kmax=4000):
    p = 1.0 / (1.0 + a)
    k = np.arange(kmax)
    pmf = p * (1 - p) ** k
    m1 = np.dot(pmf, k)
    m2 = np.dot(pmf, (k - m1) ** 2)
    m3 = np.dot(pmf, (k - m1) ** 3)
    return m1, m2, m3


@given(st.floats(0.05, 5.0))
@settings(max_examples=25, deadline=None)
def test_geometric_cumulant_formulas(a):
    k1, k2, k3 = geometric_cumulants_bruteforce(a)
    assert k1 == pytest.approx(a, rel=1e-9)
    assert k2 == pytest.approx(a + a * a, rel=1e-9)
    assert k3 == pytest.approx(a + 3 * a * a + 2 * a**3, rel=1e-8)


def test_describe():
    assert L.describe() == "LogNormal(mu=-0.15;s2=0.25)/poisson"


def test_two_point_reference_values():
    m = EnvModel(TwoPoint((0.7, 0.3), (0.3, 1.9)))
    assert env_moment(m, 2.0) == pytest.approx(0.7 * 0.09 + 0.3 * 3.61, abs=1e-14)
    w = tilt(m, 1.0).model.env_law.weights
    assert w[0] == pytest.approx(0.21 / 0.78, abs=1e-14)
    assert w[1] == pytest.approx(0.57 / 0.78, abs=1e-14)


def test_two_point_sampling_frequency():
    law = TwoPoint((0.7, 0.3), (0.3, 1.9))
    la = law.sample_log(np.random.default_rng(7), 100_000)
    freq = np.mean(np.isclose(la, math.log(0.3)))
    assert abs(freq - 0.7) < 3 * math.sqrt(0.21 / 1e5)


def test_degenerate_law_always_same_mean():
    with pytest.warns(LatticeWarning):
        m = EnvModel(TwoPoint((1.0, 0.0), (2.0, 5.0)))
    assert np.all(m.env_law.sample_log(np.random.default_rng(0), 100) == math.log(2.0))
