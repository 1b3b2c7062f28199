"""Monte Carlo estimators built on :mod:`bpre.sim`.

Every estimator takes ``seed`` and ``workers``.  Paths are generated in fixed
blocks with one counter-based stream per block, so results are bit-identical
for any worker count.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import partial
from typing import NamedTuple

import numpy as np
from scipy import stats

from .envmodel import DomainError, EnvModel, Offspring
from .rates import (
    RegimeError,
    log_moment,
    rate_pack,
    solve_alpha_from_rho,
    solve_cramer,
)
from .sim import default_n_max, passage_batch, terminal_batch
from .streams import DEFAULT_BLOCK, run_blocks

__all__ = [
    "CHEB_C",
    "ConditionedSummary",
    "Estimate",
    "MomentRatioSeries",
    "PassagePMF",
    "Prefactor",
    "TailFit",
    "TruncationWarning",
    "WeightedSample",
    "chebyshev_w_bound",
    "conditioned_passage_stats",
    "estimate_ld_prob",
    "estimate_moment_ratio",
    "estimate_passage_pmf",
    "estimate_passage_prob",
    "exact_moments",
    "innovation_second_moment",
    "prefactor_C1",
    "ratio_estimate",
    "tail_index_fit",
    "weighted_ks",
]

# constant in the Chebyshev-type envelope for P[W_N > e^M]; frozen after calibration
CHEB_C = 1.0


class TruncationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float
    n_samples: int
    hits: int
    ess: float
    seed: int
    method: str
    truncated_mass: float = 0.0

    @property
    def rel_stderr(self) -> float:
        return self.stderr / self.value if self.value else math.inf

    def ci(self, z: float = 1.959963984540054):
        return self.value - z * self.stderr, self.value + z * self.stderr


def _summarize(contrib: np.ndarray, seed: int, method: str, truncated_mass: float = 0.0) -> Estimate:
    n = contrib.size
    hits = int(np.count_nonzero(contrib))
    value = float(contrib.mean()) if n else 0.0
    stderr = float(contrib.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    sq = float(np.dot(contrib, contrib))
    ess = float(contrib.sum() ** 2 / sq) if sq > 0 else 0.0
    return Estimate(value, stderr, n, hits, ess, seed, method, truncated_mass)


def ratio_estimate(num: np.ndarray, den: np.ndarray):
    """Ratio ``sum(num) / sum(den)`` of per-path contributions with delta-method stderr."""
    n = num.size
    mden = den.mean()
    if mden == 0:
        return math.nan, math.nan
    r = num.sum() / den.sum()
    resid = num - r * den
    se = resid.std(ddof=1) / (math.sqrt(n) * abs(mden))
    return float(r), float(se)


def _method_label(alpha) -> str:
    return "naive" if alpha is None else f"tilted({alpha:.10g})"


# ----------------------------------------------------------------------------
# fixed-horizon large deviations


def _ld_block(size, rng, model, target, n, log_level, tilt_alpha):
    term = terminal_batch(model, n, size, rng, tilt_alpha, offspring=(target != "Pi"))
    if target == "Pi":
        hit = term.s > log_level
    else:
        level = term.z if target == "Z" else term.w
        # saturated paths count as exceeding every threshold
        hit = (level > math.exp(log_level)) | term.saturated
    return np.where(hit, np.exp(term.log_weight), 0.0)


def _check_below_cap(model: EnvModel, log_level: float) -> None:
    # saturated paths count as hits, which is only harmless far below the cap
    if log_level >= math.log(model.cap) - 1.0:
        raise DomainError(f"threshold exp({log_level:.4g}) is not below the population cap {model.cap}")


def check_ld_regime(model: EnvModel, target: str, rho: float) -> float:
    """Return the tilt ``alpha`` for ``rho`` after checking the target's regime."""
    if target not in ("Z", "Pi", "W"):
        raise ValueError(f"unknown target {target!r}")
    alpha = solve_alpha_from_rho(model, rho)
    if target == "Pi":
        return alpha
    rp = rate_pack(model, alpha)
    if target == "Z":
        rp.require_z_regime()
    else:
        rp.require_w_regime()
    return alpha


def estimate_ld_prob(model: EnvModel, target: str, rho: float, n: int, N: int,
                     method: str = "tilted", seed: int = 0, workers: int = 1,
                     tilt_alpha: float | None = None) -> Estimate:
    """Estimate ``P[X_n > exp(rho * n)]`` for ``X`` in ``{Z, Pi, W}``.

    The tilted method samples the environment at ``alpha`` solving
    ``Lambda'(alpha) = rho`` unless ``tilt_alpha`` is given.
    """
    alpha = check_ld_regime(model, target, rho)
    if target != "Pi":
        _check_below_cap(model, rho * n)
    if method == "naive":
        tilt_alpha = None
    elif method == "tilted":
        tilt_alpha = alpha if tilt_alpha is None else tilt_alpha
    else:
        raise ValueError(f"unknown method {method!r}")
    fn = partial(_ld_block, model=model, target=target, n=n, log_level=rho * n, tilt_alpha=tilt_alpha)
    contrib = np.concatenate(run_blocks(fn, N, seed, workers, salt=1)) if N else np.zeros(0)
    return _summarize(contrib, seed, _method_label(tilt_alpha))


# ----------------------------------------------------------------------------
# moments of Z_n and of the perpetuity


def _conditional_poly(offspring: Offspring, order: int):
    """``E[X**order | z, a]`` for a sum ``X`` of ``z`` offspring with mean ``a``.

    Returned as ``{(power_of_z, power_of_a): coefficient}``.
    """
    if order == 0:
        return {(0, 0): 1.0}
    if offspring is Offspring.POISSON:
        table = {
            1: {(1, 1): 1.0},
            2: {(2, 2): 1.0, (1, 1): 1.0},
            3: {(3, 3): 1.0, (2, 2): 3.0, (1, 1): 1.0},
        }
    else:
        # cumulants z*a, z*(a + a^2), z*(a + 3a^2 + 2a^3)
        table = {
            1: {(1, 1): 1.0},
            2: {(2, 2): 1.0, (1, 1): 1.0, (1, 2): 1.0},
            3: {(3, 3): 1.0, (2, 2): 3.0, (2, 3): 3.0, (1, 1): 1.0, (1, 2): 3.0, (1, 3): 2.0},
        }
    if order not in table:
        raise ValueError("exact moments are available for orders 1, 2, 3")
    return table[order]


def exact_moments(model: EnvModel, order: int, k_max: int, target: str = "Z") -> np.ndarray:
    """Exact ``E[X_k**order]`` for ``k = 0..k_max`` by moment recursion.

    ``target="Z"`` gives the population, ``target="R"`` the perpetuity
    ``R_k = sum_{j<=k} Pi_{j-1}`` (``R_0 = 1``).
    """
    lam = [math.exp(log_moment(model, j)[0]) for j in range(order + 1)]
    m = np.zeros((k_max + 1, order + 1))
    m[0, :] = 1.0
    if target == "Z":
        polys = [_conditional_poly(model.offspring, j) for j in range(order + 1)]
        for k in range(1, k_max + 1):
            for j in range(order + 1):
                m[k, j] = sum(c * lam[pa] * m[k - 1, pz] for (pz, pa), c in polys[j].items())
    elif target == "R":
        # R_k = 1 + A R_{k-1} in law
        for k in range(1, k_max + 1):
            for j in range(order + 1):
                m[k, j] = sum(math.comb(j, i) * lam[i] * m[k - 1, i] for i in range(j + 1))
    else:
        raise ValueError(f"unknown target {target!r}")
    return m[:, order]


def innovation_second_moment(model: EnvModel, k: int) -> float:
    """Exact ``E|Z_k - A_{k-1} Z_{k-1}|^2``."""
    lam = [math.exp(log_moment(model, j)[0]) for j in range(3)]
    poly = _conditional_poly(model.offspring, 2)
    ez = exact_moments(model, 1, k - 1)[-1] if k >= 1 else 1.0
    # only the z-linear part survives once the squared mean is removed
    return sum(c * lam[pa] for (pz, pa), c in poly.items() if pz == 1) * ez


@dataclass
class MomentRatioSeries:
    alpha: float
    u: np.ndarray
    mode: str
    c_limit: float
    target: str = "Z"
    stderr: np.ndarray | None = None
    c_limit_stderr: float = 0.0


def _check_moment_regime(model: EnvModel, target: str, alpha: float) -> None:
    if target == "Z":
        if alpha > 1 and not rate_pack(model, alpha).z_regime:
            raise RegimeError(f"alpha={alpha:g}: lambda(alpha) <= lambda(1), normalized moments diverge")
    elif target == "R":
        a0 = solve_cramer(model).alpha0
        if not alpha > a0:
            raise RegimeError(f"alpha={alpha:g} must exceed the Cramer root {a0:g}")
    else:
        raise ValueError(f"unknown target {target!r}")


def default_k_max(model: EnvModel, alpha: float) -> int:
    """Horizon after which the geometric correction falls below 1e-3."""
    L = lambda s: log_moment(model, s)[0]
    gap = max(L(1.0), L(alpha / 2.0)) - L(alpha)
    if gap >= 0:
        raise RegimeError("no geometric convergence at this alpha")
    return max(3, math.ceil(math.log(1e-3) / gap))


def _moment_block(size, rng, model, target, alpha, k_max):
    """Per-path ``X_k**alpha * exp(-alpha S_k)`` for ``k = 0..k_max`` under the alpha-tilt."""
    from .envmodel import offspring_totals, sample_log_env, tilt

    tm = tilt(model, alpha)
    out = np.empty((size, k_max + 1))
    out[:, 0] = 1.0
    z = np.ones(size, dtype=np.int64)
    r = np.ones(size)
    s = np.zeros(size)
    prod = np.ones(size)
    for k in range(1, k_max + 1):
        la = sample_log_env(tm.model, rng, size)
        s += la
        if target == "Z":
            z, _ = offspring_totals(model, np.exp(la), z, rng)
            x = z.astype(float)
        else:
            prod = prod * np.exp(la)
            r = r + prod
            x = r
        out[:, k] = np.exp(alpha * np.log(np.where(x > 0, x, 1.0)) - alpha * s) * (x > 0)
    return out


def estimate_moment_ratio(model: EnvModel, target: str, alpha: float, k_max: int | None = None,
                          N: int | None = None, seed: int = 0, workers: int = 1) -> MomentRatioSeries:
    """Series ``u_k = E[X_k**alpha] / lambda(alpha)**k``.

    ``N=None`` selects the exact recursion (integer ``alpha`` in 1..3);
    otherwise ``N`` alpha-tilted paths are used.
    """
    _check_moment_regime(model, target, alpha)
    if k_max is None:
        k_max = 1 if alpha == 1 else default_k_max(model, alpha)
    L = log_moment(model, alpha)[0]
    if N is None:
        order = round(alpha)
        if abs(alpha - order) > 1e-8 or order not in (1, 2, 3):
            raise ValueError("exact mode needs alpha in {1, 2, 3}")
        m = exact_moments(model, order, k_max, target)
        u = m * np.exp(-L * np.arange(k_max + 1))
        return MomentRatioSeries(float(alpha), u, "exact-recursion", float(u[-1]), target)
    fn = partial(_moment_block, model=model, target=target, alpha=alpha, k_max=k_max)
    vals = np.concatenate(run_blocks(fn, N, seed, workers, block=min(DEFAULT_BLOCK, 20_000), salt=2))
    u = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(N)
    tail = vals[:, -3:].mean(axis=1)
    c = float(tail.mean())
    c_se = float(tail.std(ddof=1) / math.sqrt(N))
    return MomentRatioSeries(float(alpha), u, "mc", c, target, se, c_se)


class Prefactor(NamedTuple):
    value: float
    stderr: float
    c_z: float
    alpha: float
    sigma: float
    exact: bool


def prefactor_C1(model: EnvModel, rho: float, N: int = 200_000, seed: int = 0, workers: int = 1) -> Prefactor:
    """``c_Z(alpha) / (alpha sigma(alpha) sqrt(2 pi))`` at the ``alpha`` solving ``Lambda' = rho``."""
    alpha = solve_alpha_from_rho(model, rho)
    rp = rate_pack(model, alpha)
    rp.require_z_regime()
    order = round(alpha)
    scale = 1.0 / (alpha * rp.sigma * math.sqrt(2 * math.pi))
    if abs(alpha - order) < 1e-8 and order in (2, 3):
        # run the recursion until the increments are below double precision
        gap = max(log_moment(model, 1.0)[0], log_moment(model, order / 2.0)[0]) - rp.log_lambda
        k_max = max(10, math.ceil(math.log(1e-17) / gap))
        c = estimate_moment_ratio(model, "Z", float(order), k_max=k_max).c_limit
        return Prefactor(c * scale, 0.0, c, alpha, rp.sigma, True)
    series = estimate_moment_ratio(model, "Z", alpha, N=N, seed=seed, workers=workers)
    return Prefactor(series.c_limit * scale, series.c_limit_stderr * scale, series.c_limit, alpha, rp.sigma, False)


# ----------------------------------------------------------------------------
# first passage


def _passage_block(size, rng, model, t, kind, n_max, tilt_alpha):
    pb = passage_batch(model, t, kind, n_max, size, rng, tilt_alpha)
    return np.stack([pb.T.astype(float), pb.log_weight, pb.truncated.astype(float)])


def _passage_runs(model, t, kind, n_max, N, tilt_alpha, seed, workers, salt):
    fn = partial(_passage_block, model=model, t=t, kind=kind, n_max=n_max, tilt_alpha=tilt_alpha)
    out = np.concatenate(run_blocks(fn, N, seed, workers, salt=salt), axis=1)
    return out[0].astype(np.int64), out[1], out[2].astype(bool)


def estimate_passage_prob(model: EnvModel, t: float, kind: str, N: int, seed: int = 0,
                          workers: int = 1, n_max: int | None = None, tilt_alpha: float | None = None) -> Estimate:
    """``P[T_t < inf]``, i.e. ``P[sup Z > t]`` (kind Z) or ``P[W_inf > t]`` (kind W).

    Defaults to the Cramer tilt ``alpha0``.
    """
    _check_below_cap(model, math.log(t))
    cr = solve_cramer(model)
    if tilt_alpha is None:
        tilt_alpha = cr.alpha0
    if n_max is None:
        n_max = default_n_max(model, t, cr.rho0)
    T, log_w, trunc = _passage_runs(model, t, kind, n_max, N, tilt_alpha, seed, workers, salt=3)
    w = np.exp(log_w)
    contrib = np.where(T >= 0, w, 0.0)
    return _summarize(contrib, seed, _method_label(tilt_alpha), float(w[trunc].sum() / N))


@dataclass
class PassagePMF:
    t: float
    kind: str
    rho: float
    alpha: float
    n_t: int
    theta: float
    window: list
    pmf: dict
    le: dict
    ge: dict
    finite: Estimate
    truncated_mass: float
    _T: np.ndarray = field(repr=False, default=None)
    _w: np.ndarray = field(repr=False, default=None)

    def lower_ratio(self, n: int | None = None):
        """``P[T <= n] / P[T = n]`` with delta-method stderr."""
        n = self.n_t if n is None else n
        fin = self._T >= 0
        return ratio_estimate(np.where(fin & (self._T <= n), self._w, 0.0),
                              np.where(self._T == n, self._w, 0.0))

    def upper_ratio(self, n: int | None = None):
        """``P[n <= T < inf] / P[T = n]`` with delta-method stderr."""
        n = self.n_t if n is None else n
        return ratio_estimate(np.where(self._T >= n, self._w, 0.0),
                              np.where(self._T == n, self._w, 0.0))


def check_passage_regime(model: EnvModel, rho: float, kind: str) -> float:
    if model.env_law.mean_log >= 0:
        raise RegimeError("passage asymptotics need E log A < 0")
    alpha = solve_alpha_from_rho(model, rho)
    rp = rate_pack(model, alpha)
    if kind == "W":
        rp.require_w_regime()
    else:
        rp.require_z_regime()
    return alpha


def estimate_passage_pmf(model: EnvModel, t: float, kind: str, rho: float, window, N: int,
                         seed: int = 0, workers: int = 1, n_max: int | None = None) -> PassagePMF:
    """Weighted estimates of ``P[T_t = n]`` and both tails for ``n`` in ``window``."""
    _check_below_cap(model, math.log(t))
    from .sim import passage_query

    alpha = check_passage_regime(model, rho, kind)
    q = passage_query(t, rho)
    window = list(window)
    if n_max is None:
        n_max = default_n_max(model, t)
    n_max = max(n_max, max(window) + 1)
    T, log_w, trunc = _passage_runs(model, t, kind, n_max, N, alpha, seed, workers, salt=4)
    w = np.exp(log_w)
    fin = T >= 0
    label = _method_label(alpha)
    trunc_mass = float(w[trunc].sum() / N)
    pmf = {n: _summarize(np.where(T == n, w, 0.0), seed, label, trunc_mass) for n in window}
    le = {n: _summarize(np.where(fin & (T <= n), w, 0.0), seed, label, trunc_mass) for n in window}
    ge = {n: _summarize(np.where(T >= n, w, 0.0), seed, label, trunc_mass) for n in window}
    finite = _summarize(np.where(fin, w, 0.0), seed, label, trunc_mass)
    if finite.value > 0 and trunc_mass > 1e-3 * finite.value:
        warnings.warn(f"truncated mass {trunc_mass:.3g} exceeds 1e-3 of P[T<inf]", TruncationWarning)
    return PassagePMF(t, kind, rho, alpha, q.n, q.theta, window, pmf, le, ge, finite, trunc_mass, T, w)


@dataclass
class WeightedSample:
    values: np.ndarray
    weights: np.ndarray
    normalizer: float

    def __post_init__(self):
        if self.weights.size and not (np.all(np.isfinite(self.weights)) and np.all(self.weights > 0)):
            raise ValueError("weights must be finite and positive")

    def mean(self) -> float:
        return float(np.dot(self.values, self.weights) / self.weights.sum())


def weighted_ks(values, weights, cdf=stats.norm.cdf) -> float:
    """Sup distance between the weighted empirical CDF of ``values`` and ``cdf``.

    Returns nan for an empty sample.
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if values.size == 0:
        return math.nan
    x, inv = np.unique(values, return_inverse=True)
    mass = np.bincount(inv, weights=weights)
    after = np.cumsum(mass) / mass.sum()
    before = np.concatenate([[0.0], after[:-1]])
    f = cdf(x)
    return float(max(np.max(np.abs(after - f)), np.max(np.abs(before - f))))


@dataclass
class ConditionedSummary:
    sample: WeightedSample
    log_t: float
    mean_ratio: float
    mean_ratio_stderr: float
    ks: float
    normalizer: Estimate
    truncated_mass: float
    alpha0: float
    rho0: float
    sigma0: float

    @property
    def truncated_fraction(self) -> float:
        v = self.normalizer.value
        return self.truncated_mass / v if v > 0 else math.inf


def conditioned_passage_stats(model: EnvModel, t: float, kind: str = "W", N: int = 100_000,
                              seed: int = 0, workers: int = 1, n_max: int | None = None) -> ConditionedSummary:
    """Law of ``T_t`` given ``T_t < inf`` from alpha0-tilted runs."""
    _check_below_cap(model, math.log(t))
    cr = solve_cramer(model)
    if not cr.alpha0 > 1:
        raise RegimeError(f"Cramer root {cr.alpha0:g} must exceed 1")
    if n_max is None:
        n_max = default_n_max(model, t, cr.rho0)
    T, log_w, trunc = _passage_runs(model, t, kind, n_max, N, cr.alpha0, seed, workers, salt=5)
    w = np.exp(log_w)
    fin = T >= 0
    sample = WeightedSample(T[fin].astype(float), w[fin], float(w[fin].sum() / N))
    log_t = math.log(t)
    num = np.where(fin, w * T / log_t, 0.0)
    den = np.where(fin, w, 0.0)
    mean_ratio, mean_se = ratio_estimate(num, den)
    scale = cr.sigma0 * cr.rho0 ** -1.5 * math.sqrt(log_t)
    ks = weighted_ks((sample.values - log_t / cr.rho0) / scale, sample.weights)
    trunc_mass = float(w[trunc].sum() / N)
    normalizer = _summarize(den, seed, _method_label(cr.alpha0), trunc_mass)
    return ConditionedSummary(sample, log_t, mean_ratio, mean_se, ks, normalizer, trunc_mass,
                              cr.alpha0, cr.rho0, cr.sigma0)


class TailFit(NamedTuple):
    slope: float
    intercept: float
    slope_stderr: float
    intercept_stderr: float


def tail_index_fit(probs) -> TailFit:
    """Least-squares line through ``(log t, log P)``."""
    pts = [(float(t), float(p)) for t, p in probs]
    if len(pts) < 4:
        raise ValueError("tail fit needs at least 4 grid points")
    if any(not p > 0 for _, p in pts) or any(not t > 0 for t, _ in pts):
        raise ValueError("tail fit needs positive thresholds and probabilities")
    x = np.log([t for t, _ in pts])
    if np.ptp(x) == 0:
        raise ValueError("degenerate threshold grid")
    y = np.log([p for _, p in pts])
    fit = stats.linregress(x, y)
    return TailFit(float(fit.slope), float(fit.intercept), float(fit.stderr), float(fit.intercept_stderr))


def chebyshev_w_bound(model: EnvModel, alpha: float, N: int, M: float, eps: float = 1e-2, c: float = CHEB_C) -> float:
    """Upper envelope ``c N^{2(alpha+1)} exp(-M(alpha+eps) + N Lambda + N rho eps + c N eps^2)``."""
    L, rho, _ = log_moment(model, alpha)
    expo = -M * (alpha + eps) + N * L + N * rho * eps + c * N * eps**2
    return c * N ** (2 * (alpha + 1)) * math.exp(expo)
