"""Rate calculus of the log-moment function ``Lambda(alpha) = log E[A**alpha]``.

All derivatives are analytic; the only numerics are one-dimensional root
finds on the strictly increasing ``Lambda'``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .envmodel import DomainError, EnvModel

__all__ = [
    "CramerRoot",
    "DomainInfo",
    "NoRootError",
    "RatePack",
    "RegimeError",
    "SubcriticalityError",
    "domain_info",
    "legendre",
    "log_moment",
    "rate_pack",
    "solve_alpha_from_rho",
    "solve_cramer",
]


class NoRootError(ValueError):
    pass


class SubcriticalityError(ValueError):
    pass


class RegimeError(ValueError):
    """The asymptotic regime does not hold at the requested working point."""


@dataclass(frozen=True)
class RatePack:
    alpha: float
    lam: float
    log_lambda: float
    rho: float
    sigma: float
    alpha_bar: float
    rate_t: float
    rate_n: float
    # regime flags
    z_regime: bool  # alpha > 1 and lambda(alpha) > lambda(1)
    w_regime: bool  # z_regime and alpha > alpha0

    def require_z_regime(self) -> None:
        if not self.z_regime:
            raise RegimeError(
                f"alpha={self.alpha:g} violates alpha > 1 and lambda(alpha) > lambda(1)"
            )

    def require_w_regime(self) -> None:
        self.require_z_regime()
        if not self.w_regime:
            raise RegimeError(f"alpha={self.alpha:g} must exceed the Cramer root")


@dataclass(frozen=True)
class DomainInfo:
    alpha_inf: float
    alpha_min: float
    rho_inf: float


@dataclass(frozen=True)
class CramerRoot:
    alpha0: float
    rho0: float
    sigma0: float


def log_moment(model: EnvModel, alpha: float):
    """``(Lambda, Lambda', Lambda'')`` at ``alpha`` (any real ``alpha`` in the domain)."""
    if alpha >= model.alpha_inf:
        raise DomainError(f"alpha={alpha} beyond alpha_inf={model.alpha_inf}")
    return model.env_law.log_moment(alpha)


def _cramer_alpha(model: EnvModel):
    try:
        return solve_cramer(model).alpha0
    except (NoRootError, SubcriticalityError):
        return None


def rate_pack(model: EnvModel, alpha: float) -> RatePack:
    if not (0.0 < alpha < model.alpha_inf):
        raise DomainError(f"alpha={alpha} outside (0, {model.alpha_inf})")
    L, dL, d2L = log_moment(model, alpha)
    L1 = log_moment(model, 1.0)[0] if model.alpha_inf > 1 else math.inf
    if dL == 0.0:
        alpha_bar = math.nan
    else:
        alpha_bar = alpha - L / dL
    z_ok = alpha > 1.0 and L > L1
    a0 = _cramer_alpha(model)
    w_ok = z_ok and a0 is not None and alpha > a0
    return RatePack(
        alpha=float(alpha),
        lam=math.exp(L),
        log_lambda=L,
        rho=dL,
        sigma=math.sqrt(d2L),
        alpha_bar=alpha_bar,
        rate_t=alpha_bar,
        rate_n=alpha * dL - L,
        z_regime=z_ok,
        w_regime=w_ok,
    )


def _bracket_increasing(f, lo, hi, hi_limit):
    """Grow ``[lo, hi]`` geometrically until ``f`` changes sign."""
    flo = f(lo)
    if flo > 0:
        return None
    fhi = f(hi)
    while fhi < 0:
        lo, flo = hi, fhi
        hi *= 2.0
        if hi >= hi_limit or hi > 1e8:
            return None
        fhi = f(hi)
    return lo, hi


def _bisect_newton(f, df, lo, hi, width=1e-8, rtol=1e-13, maxiter=60):
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    x = 0.5 * (lo + hi)
    for _ in range(maxiter):
        d = df(x)
        if d <= 0:
            break
        step = f(x) / d
        xn = x - step
        if not (lo - width <= xn <= hi + width):
            break
        x = xn
        if abs(step) <= rtol * max(1.0, abs(x)):
            break
    return x


def solve_alpha_from_rho(model: EnvModel, rho: float) -> float:
    """Return ``alpha`` with ``Lambda'(alpha) = rho``."""
    info = domain_info(model)
    f = lambda s: log_moment(model, s)[1] - rho
    df = lambda s: log_moment(model, s)[2]
    if f(0.0) == 0.0:
        return 0.0
    if not (f(0.0) < 0 < (info.rho_inf - rho)):
        raise NoRootError(f"rho={rho} outside ({model.env_law.mean_log}, {info.rho_inf})")
    br = _bracket_increasing(f, 0.0, 1.0, model.alpha_inf)
    if br is None:
        raise NoRootError(f"rho={rho} not attained")
    return _bisect_newton(f, df, *br)


def legendre(model: EnvModel, x: float) -> float:
    """``Lambda*(x) = sup_s (s x - Lambda(s))`` for ``x`` in ``[E log A, rho_inf)``."""
    mean_log = model.env_law.mean_log
    info = domain_info(model)
    if not (mean_log <= x < info.rho_inf):
        raise DomainError(f"x={x} outside [{mean_log}, {info.rho_inf})")
    if x == mean_log:
        return 0.0
    s = solve_alpha_from_rho(model, x)
    return s * x - log_moment(model, s)[0]


def solve_cramer(model: EnvModel) -> CramerRoot:
    if model.env_law.mean_log >= 0:
        raise SubcriticalityError("E log A >= 0: no positive Cramer root")
    f = lambda s: log_moment(model, s)[0]
    df = lambda s: log_moment(model, s)[1]
    a_min = domain_info(model).alpha_min
    if math.isinf(a_min):
        raise NoRootError("lambda(alpha) decreases on the whole domain")
    br = _bracket_increasing(f, max(a_min, 1e-6), 1.0, model.alpha_inf)
    if br is None:
        raise NoRootError("lambda(alpha) stays below 1 on the domain")
    a0 = _bisect_newton(f, df, *br)
    _, rho0, var0 = log_moment(model, a0)
    return CramerRoot(alpha0=a0, rho0=rho0, sigma0=math.sqrt(var0))


def domain_info(model: EnvModel) -> DomainInfo:
    law = model.env_law
    a_inf = model.alpha_inf
    if hasattr(law, "means"):
        logs = [math.log(a) for p, a in zip(law.weights, law.means) if p > 0]
        rho_inf = max(logs)
        if law.log_moment(0.0)[2] == 0.0:
            # degenerate: Lambda is linear and has no interior minimum
            return DomainInfo(a_inf, 0.0, rho_inf)
    else:
        rho_inf = math.inf
    d = lambda s: law.log_moment(s)[1]
    if d(0.0) >= 0:
        return DomainInfo(a_inf, 0.0, rho_inf)
    hi = 1.0
    while d(hi) < 0:
        hi *= 2.0
        if hi > 1e8:
            return DomainInfo(a_inf, math.inf, rho_inf)
    lo = hi / 2.0 if hi > 1.0 else 0.0
    a_min = _bisect_newton(d, lambda s: law.log_moment(s)[2], lo, hi)
    return DomainInfo(a_inf, a_min, rho_inf)
