import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from bpre.envmodel import DomainError, EnvModel, FiniteTable, LatticeWarning, LogNormal, TwoPoint
from bpre.rates import (
    NoRootError,
    RegimeError,
    SubcriticalityError,
    domain_info,
    legendre,
    log_moment,
    rate_pack,
    solve_alpha_from_rho,
    solve_cramer,
)

L = EnvModel(LogNormal(-0.15, 0.25))
LSTAR = EnvModel(LogNormal(-0.5, 0.5))
TP = EnvModel(TwoPoint((0.7, 0.3), (0.3, 1.9)))


def test_rate_pack_closed_form():
    rp = rate_pack(L, 2.0)
    assert rp.rho == pytest.approx(0.35, abs=1e-15)
    assert rp.sigma == pytest.approx(0.5, abs=1e-15)
    assert rp.log_lambda == pytest.approx(0.2, abs=1e-15)
    assert rp.alpha_bar == pytest.approx(2 - 0.2 / 0.35, abs=1e-14)
    assert rp.rate_n == pytest.approx(0.5, abs=1e-14)
    assert rp.z_regime and rp.w_regime


def test_two_point_rho_at_one():
    # E[A log A] / E[A] with E[A] = 0.21 + 0.57
    num = 0.7 * 0.3 * math.log(0.3) + 0.3 * 1.9 * math.log(1.9)
    rp = rate_pack(TP, 1.0)
    assert rp.lam == pytest.approx(0.78, abs=1e-15)
    assert rp.rho == pytest.approx(num / 0.78, abs=1e-14)
    h = 1e-5
    fd = (log_moment(TP, 1 + h)[0] - log_moment(TP, 1 - h)[0]) / (2 * h)
    assert rp.rho == pytest.approx(fd, abs=1e-9)
    assert rp.rho == pytest.approx(0.144901, abs=1e-6)


def test_regime_flags():
    rp = rate_pack(L, 1.1)
    assert rp.z_regime and not rp.w_regime
    # lambda(2) < lambda(1) here
    assert not rate_pack(EnvModel(LogNormal(-1.0, 0.25)), 2.0).z_regime
    rp = rate_pack(LSTAR, 1.4)
    assert rp.z_regime and not rp.w_regime
    with pytest.raises(RegimeError):
        rp.require_w_regime()
    with pytest.raises(RegimeError):
        rate_pack(L, 0.9).require_z_regime()


def test_rate_pack_domain():
    with pytest.raises(DomainError):
        rate_pack(L, 0.0)
    with pytest.raises(DomainError):
        rate_pack(L, -1.0)


@pytest.mark.parametrize("model,alpha0", [(L, 1.2), (LSTAR, 2.0)])
def test_cramer_roots(model, alpha0):
    cr = solve_cramer(model)
    assert cr.alpha0 == pytest.approx(alpha0, abs=1e-8)
    assert math.exp(log_moment(model, cr.alpha0)[0]) == pytest.approx(1.0, abs=1e-12)


def test_two_point_cramer_root_against_brentq():
    f = lambda s: 0.7 * 0.3**s + 0.3 * 1.9**s - 1.0
    ref = optimize.brentq(f, 0.5, 5.0, xtol=1e-14)
    assert solve_cramer(TP).alpha0 == pytest.approx(ref, abs=1e-10)
    assert solve_cramer(TP).alpha0 == pytest.approx(1.7345, abs=1e-4)


def test_cramer_errors():
    with pytest.raises(SubcriticalityError):
        solve_cramer(EnvModel(LogNormal(0.1, 0.25)))
    # all atoms below one: lambda decreases forever
    with pytest.raises(NoRootError):
        solve_cramer(EnvModel(TwoPoint((0.5, 0.5), (0.5, 0.9))))


@pytest.mark.parametrize("model", [L, LSTAR])
@pytest.mark.parametrize("alpha", [1.1, 1.4, 2.0, 2.4])
def test_legendre_identities(model, alpha):
    rp = rate_pack(model, alpha)
    ls = legendre(model, rp.rho)
    assert ls == pytest.approx(alpha * rp.rho - rp.log_lambda, abs=1e-9)
    assert rp.alpha_bar * rp.rho == pytest.approx(ls, abs=1e-9)
    # tangent to Lambda at alpha meets the axis at alpha_bar
    assert rp.alpha - rp.log_lambda / rp.rho == pytest.approx(rp.alpha_bar, abs=1e-9)


def test_legendre_against_numeric_sup():
    for x in (-0.2, 0.1, 0.5):
        res = optimize.minimize_scalar(lambda s: -(s * x - log_moment(TP, s)[0]), bounds=(-20, 40), method="bounded",
                                       options={"xatol": 1e-12})
        assert legendre(TP, x) == pytest.approx(-res.fun, abs=1e-8)


def test_legendre_domain():
    assert legendre(L, -0.15) == 0.0
    with pytest.raises(DomainError):
        legendre(L, -0.2)
    with pytest.raises(DomainError):
        legendre(TP, math.log(1.9))


@given(st.floats(0.05, 6.0))
@settings(max_examples=60, deadline=None)
def test_solve_alpha_inverts_rho(alpha):
    for model in (LSTAR, TP):
        rho = log_moment(model, alpha)[1]
        assert solve_alpha_from_rho(model, rho) == pytest.approx(alpha, abs=1e-8)


@given(st.floats(0.01, 5.0), st.floats(0.01, 5.0), st.floats(0.0, 1.0))
@settings(max_examples=60, deadline=None)
def test_log_moment_convex(a, b, w):
    for model in (LSTAR, TP):
        mid = log_moment(model, w * a + (1 - w) * b)[0]
        chord = w * log_moment(model, a)[0] + (1 - w) * log_moment(model, b)[0]
        assert mid <= chord + 1e-12


def test_domain_info():
    info = domain_info(LSTAR)
    assert info.alpha_inf == math.inf and info.rho_inf == math.inf
    assert info.alpha_min == pytest.approx(1.0, abs=1e-10)
    tp = domain_info(TP)
    assert tp.rho_inf == pytest.approx(math.log(1.9))
    ref = optimize.minimize_scalar(lambda s: log_moment(TP, s)[0], bounds=(0, 5), method="bounded",
                                   options={"xatol": 1e-12}).x
    assert tp.alpha_min == pytest.approx(ref, abs=1e-6)
    with pytest.warns(LatticeWarning):
        deg = domain_info(EnvModel(FiniteTable((1.0,), (0.8,))))
    assert deg.alpha_min == 0.0
