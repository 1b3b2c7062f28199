"""Path simulation for branching processes in random environment.

Paths are simulated in vectorized batches.  Under a tilt at ``alpha`` only the
environment marginal is reweighted; offspring totals are always drawn from the
untilted conditional law, so the likelihood ratio after ``k`` generations is
``exp(k * Lambda(alpha) - alpha * S_k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .envmodel import EnvModel, offspring_totals, sample_log_env, tilt

__all__ = [
    "Batch",
    "PassageBatch",
    "PassageQuery",
    "PassageRecord",
    "Trajectory",
    "batch_identity_residuals",
    "identity_residuals",
    "passage_batch",
    "passage_query",
    "perpetuity",
    "simulate_batch",
    "simulate_trajectory",
    "simulate_until",
    "terminal_batch",
    "trajectory_rows",
]


def _env_sampler(model: EnvModel, tilt_alpha):
    """Return ``(law_model, log_lambda, alpha)`` used to draw environments."""
    if tilt_alpha is None or tilt_alpha == 0:
        return model, 0.0, 0.0
    tm = tilt(model, tilt_alpha)
    return tm.model, tm.log_lambda, tm.alpha


@dataclass
class Trajectory:
    z: np.ndarray
    log_a: np.ndarray
    s: np.ndarray
    w_total: np.ndarray
    weight: float
    tilt_alpha: float | None = None
    saturated: bool = False

    @property
    def n(self) -> int:
        return len(self.log_a)

    @property
    def a(self) -> np.ndarray:
        return np.exp(self.log_a)


@dataclass
class Batch:
    """Full paths of ``size`` trajectories, row-major ``(size, n + 1)``."""

    z: np.ndarray
    log_a: np.ndarray
    log_weight: np.ndarray
    saturated: np.ndarray
    tilt_alpha: float | None = None

    @property
    def s(self) -> np.ndarray:
        out = np.zeros((self.log_a.shape[0], self.log_a.shape[1] + 1))
        np.cumsum(self.log_a, axis=1, out=out[:, 1:])
        return out

    @property
    def w_total(self) -> np.ndarray:
        return _saturating_cumsum(self.z)

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            z=self.z[i].copy(),
            log_a=self.log_a[i].copy(),
            s=self.s[i],
            w_total=self.w_total[i],
            weight=float(np.exp(self.log_weight[i])),
            tilt_alpha=self.tilt_alpha,
            saturated=bool(self.saturated[i]),
        )

    def __len__(self):
        return self.z.shape[0]


def _saturating_cumsum(z: np.ndarray, cap: int = 2**62) -> np.ndarray:
    w = np.empty_like(z)
    acc = np.zeros(z.shape[:-1], dtype=np.int64)
    for k in range(z.shape[-1]):
        acc = np.where(acc > cap - z[..., k], cap, acc + z[..., k])
        w[..., k] = acc
    return w


def simulate_batch(model: EnvModel, n: int, size: int, rng, tilt_alpha=None) -> Batch:
    if n < 0:
        raise ValueError("n must be nonnegative")
    law, log_lam, alpha = _env_sampler(model, tilt_alpha)
    z = np.zeros((size, n + 1), dtype=np.int64)
    z[:, 0] = 1
    log_a = np.empty((size, n))
    sat = np.zeros(size, dtype=bool)
    for k in range(n):
        la = sample_log_env(law, rng, size)
        log_a[:, k] = la
        z[:, k + 1], s_k = offspring_totals(model, np.exp(la), z[:, k], rng)
        sat |= s_k
    log_w = n * log_lam - alpha * log_a.sum(axis=1)
    return Batch(z, log_a, log_w, sat, tilt_alpha)


def simulate_trajectory(model: EnvModel, n: int, tilt_alpha=None, rng=None) -> Trajectory:
    rng = np.random.default_rng() if rng is None else rng
    return simulate_batch(model, n, 1, rng, tilt_alpha).trajectory(0)


@dataclass
class Terminal:
    """Generation-``n`` state of a batch without storing the paths."""

    z: np.ndarray
    w: np.ndarray
    s: np.ndarray
    log_weight: np.ndarray
    saturated: np.ndarray
    z_max: np.ndarray


def terminal_batch(model: EnvModel, n: int, size: int, rng, tilt_alpha=None, offspring=True) -> Terminal:
    """Simulate ``size`` paths to generation ``n`` keeping only running summaries.

    With ``offspring=False`` only the environment walk ``S`` is drawn.
    """
    law, log_lam, alpha = _env_sampler(model, tilt_alpha)
    cap = model.cap
    z = np.ones(size, dtype=np.int64)
    w = np.ones(size, dtype=np.int64)
    z_max = z.copy()
    s = np.zeros(size)
    sat = np.zeros(size, dtype=bool)
    for _ in range(n):
        la = sample_log_env(law, rng, size)
        s += la
        if offspring:
            z, s_k = offspring_totals(model, np.exp(la), z, rng)
            sat |= s_k
            w = np.where(w > cap - z, cap, w + z)
            np.maximum(z_max, z, out=z_max)
    log_w = n * log_lam - alpha * s
    return Terminal(z, w, s, log_w, sat, z_max)


@dataclass(frozen=True)
class PassageQuery:
    t: float
    rho: float
    n: int
    theta: float


def passage_query(t: float, rho: float) -> PassageQuery:
    """Pair ``t`` with ``n = floor(log t / rho)`` and the fractional part ``theta``."""
    x = math.log(t) / rho
    n = math.floor(x)
    return PassageQuery(t=t, rho=rho, n=n, theta=x - n)


@dataclass
class PassageRecord:
    t_threshold: float
    kind: str
    T: float  # math.inf when the threshold is never crossed
    weight: float
    terminal: int
    truncated: bool

    @property
    def finite(self) -> bool:
        return math.isfinite(self.T)


@dataclass
class PassageBatch:
    """Vectorized passage outcomes; ``T == -1`` encodes an infinite passage time."""

    t_threshold: float
    kind: str
    T: np.ndarray
    log_weight: np.ndarray
    terminal: np.ndarray
    truncated: np.ndarray
    saturated: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def finite(self) -> np.ndarray:
        return self.T >= 0

    def record(self, i: int) -> PassageRecord:
        T = int(self.T[i])
        return PassageRecord(
            t_threshold=self.t_threshold,
            kind=self.kind,
            T=float(T) if T >= 0 else math.inf,
            weight=float(np.exp(self.log_weight[i])),
            terminal=int(self.terminal[i]),
            truncated=bool(self.truncated[i]),
        )


def passage_batch(model: EnvModel, t: float, kind: str, n_max: int, size: int, rng, tilt_alpha=None) -> PassageBatch:
    """Run ``size`` paths until ``Z`` (or the running total ``W``) exceeds ``t``.

    A path stops at the first crossing, at extinction, or after ``n_max``
    generations (truncated).  The log likelihood ratio is evaluated at the
    stopping index.
    """
    if kind not in ("Z", "W"):
        raise ValueError(f"unknown passage kind {kind!r}")
    if not t > 0 or n_max < 1:
        raise ValueError("need t > 0 and n_max >= 1")
    law, log_lam, alpha = _env_sampler(model, tilt_alpha)
    cap = model.cap
    T = np.full(size, -1, dtype=np.int64)
    log_w = np.zeros(size)
    terminal = np.ones(size, dtype=np.int64)
    truncated = np.zeros(size, dtype=bool)
    saturated = np.zeros(size, dtype=bool)
    # generation 0: Z_0 = W_0 = 1
    if 1 > t:
        T[:] = 0
        return PassageBatch(t, kind, T, log_w, terminal, truncated, saturated)
    idx = np.arange(size)
    z = np.ones(size, dtype=np.int64)
    w = np.ones(size, dtype=np.int64)
    s = np.zeros(size)
    for k in range(1, n_max + 1):
        if idx.size == 0:
            break
        la = sample_log_env(law, rng, idx.size)
        s += la
        z, sat_k = offspring_totals(model, np.exp(la), z, rng)
        saturated[idx] |= sat_k
        w = np.where(w > cap - z, cap, w + z)
        level = z if kind == "Z" else w
        hit = (level > t) | sat_k
        dead = (z == 0) & ~hit
        stop = hit | dead
        if k == n_max:
            truncated[idx[~stop]] = True
            stop = np.ones_like(stop)
        if stop.any():
            done = idx[stop]
            T[idx[hit]] = k
            log_w[done] = k * log_lam - alpha * s[stop]
            terminal[done] = level[stop]
            keep = ~stop
            idx, z, w, s = idx[keep], z[keep], w[keep], s[keep]
    return PassageBatch(t, kind, T, log_w, terminal, truncated, saturated)


def simulate_until(model: EnvModel, t: float, kind: str = "Z", n_max: int | None = None,
                   tilt_alpha=None, rng=None, rho0: float | None = None) -> PassageRecord:
    """Single-path version of :func:`passage_batch`.

    When ``n_max`` is omitted it defaults to ``50 * ceil(log t / rho0)``.
    """
    rng = np.random.default_rng() if rng is None else rng
    if n_max is None:
        n_max = default_n_max(model, t, rho0)
    return passage_batch(model, t, kind, n_max, 1, rng, tilt_alpha).record(0)


def default_n_max(model: EnvModel, t: float, rho0: float | None = None) -> int:
    if rho0 is None:
        from .rates import solve_cramer

        rho0 = solve_cramer(model).rho0
    return 50 * max(1, math.ceil(math.log(max(t, math.e)) / rho0))


def perpetuity(log_a, m: int, n: int) -> float:
    """``R_{m,n} = A_m + A_m A_{m+1} + ... + A_m ... A_{n-1}``."""
    log_a = np.asarray(log_a, dtype=float)
    if not (0 <= m < n <= len(log_a)):
        raise IndexError(f"need 0 <= m < n <= {len(log_a)}, got m={m}, n={n}")
    total = 0.0
    prod = 1.0
    for k in range(m, n):
        prod *= math.exp(log_a[k])
        total += prod
    return total


def _identity_terms(a: np.ndarray, z: np.ndarray, m: int, n: int):
    """Vectorized pieces of the telescoping identities for paths in rows.

    Returns ``(innov, pi_tail, r_tail, head, w_mn, zr)`` where for
    ``k = m+1..n`` (columns) ``innov = Z_k - A_{k-1} Z_{k-1}``,
    ``pi_tail = Pi_{k,n-1}`` and ``r_tail = R_{k,n}``.
    """
    size = a.shape[0]
    # suffix products Pi_{k,n-1} and perpetuities R_{k,n} = A_k (1 + R_{k+1,n})
    pi_suf = np.ones((size, n - m + 1))
    r_suf = np.zeros((size, n - m + 1))
    for k in range(n - 1, m - 1, -1):
        c = k - m
        pi_suf[:, c] = a[:, k] * pi_suf[:, c + 1]
        r_suf[:, c] = a[:, k] * (1.0 + r_suf[:, c + 1])
    ks = np.arange(m + 1, n + 1)
    innov = z[:, ks] - a[:, ks - 1] * z[:, ks - 1]
    head = z[:, m] * pi_suf[:, 0]
    w_mn = z[:, m + 1:n + 1].sum(axis=1)
    zr = z[:, m] * r_suf[:, 0]
    return innov, pi_suf[:, 1:], r_suf[:, 1:], head, w_mn, zr


def batch_identity_residuals(batch: "Batch", m: int, n: int, relative: bool = True) -> np.ndarray:
    """Residuals of the three identities for every path; shape ``(size, 3)``."""
    if not (0 <= m < n <= batch.log_a.shape[1]):
        raise IndexError(f"need 0 <= m < n <= {batch.log_a.shape[1]}, got m={m}, n={n}")
    a = np.exp(batch.log_a)
    z = batch.z.astype(float)
    innov, pi_t, r_t, head, w_mn, zr = _identity_terms(a, z, m, n)
    t12 = innov * pi_t
    t3 = innov * (1.0 + r_t)
    zn = z[:, n]
    r1 = head - zn + t12.sum(axis=1)
    r2 = zn - head - t12.sum(axis=1)
    r3 = w_mn - zr - t3.sum(axis=1)
    out = np.stack([r1, r2, r3], axis=1)
    if relative:
        s12 = np.abs(head) + np.abs(zn) + np.abs(t12).sum(axis=1)
        s3 = w_mn + np.abs(zr) + np.abs(t3).sum(axis=1)
        out /= np.maximum(1.0, np.stack([s12, s12, s3], axis=1))
    return out


def identity_residuals(traj: Trajectory, m: int, n: int, relative: bool = False):
    """Residuals of three exact telescoping identities on a realized path.

    (i)   ``Z_m Pi_{m,n-1} - Z_n - sum_k (A_{k-1} Z_{k-1} - Z_k) Pi_{k,n-1}``
    (ii)  ``Z_n - Z_m Pi_{m,n-1} - sum_k (Z_k - A_{k-1} Z_{k-1}) Pi_{k,n-1}``
    (iii) ``W_{m,n} - Z_m R_{m,n} - sum_k (Z_k - A_{k-1} Z_{k-1}) (1 + R_{k,n})``

    with ``k`` running over ``m+1..n`` and ``Pi_{k,j} = A_k ... A_j`` (empty
    product 1).  With ``relative=True`` each residual is divided by the sum of
    absolute values of its terms (at least 1).
    """
    if not (0 <= m < n <= traj.n):
        raise IndexError(f"need 0 <= m < n <= {traj.n}, got m={m}, n={n}")
    one = Batch(traj.z[None, :], traj.log_a[None, :], np.zeros(1), np.zeros(1, dtype=bool))
    return tuple(float(x) for x in batch_identity_residuals(one, m, n, relative)[0])


def trajectory_rows(batch: Batch, log_lambda: float = 0.0, alpha: float = 0.0, first_id: int = 0):
    """Yield ``(path_id, k, Z_k, log_A_k, S_k, W_k, weight_k)`` rows; ``log_A_n`` is empty."""
    s = batch.s
    w = batch.w_total
    n = batch.log_a.shape[1]
    for i in range(len(batch)):
        for k in range(n + 1):
            la = repr(float(batch.log_a[i, k])) if k < n else ""
            wk = math.exp(k * log_lambda - alpha * s[i, k])
            yield (first_id + i, k, int(batch.z[i, k]), la, repr(float(s[i, k])), int(w[i, k]), repr(wk))
