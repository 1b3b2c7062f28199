"""Random-environment laws, offspring families and exponential tilting.

An environment law is the distribution of the mean ``A`` of one generation's
offspring law.  Given a realized mean ``a`` the offspring count of a single
individual is Poisson(a) or geometric on {0, 1, 2, ...} with mean ``a``.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "DomainError",
    "EnvModel",
    "EnvParam",
    "FiniteTable",
    "LatticeWarning",
    "LogNormal",
    "Offspring",
    "PopulationOverflow",
    "TiltedModel",
    "TwoPoint",
    "DEFAULT_CAP",
    "GAUSS_POISSON_THRESHOLD",
    "env_moment",
    "law_from_dict",
    "offspring_totals",
    "sample_env_param",
    "sample_log_env",
    "sample_offspring_total",
    "tilt",
]

DEFAULT_CAP = 2**62
# Poisson means above this are drawn from a continuity-corrected Gaussian.
GAUSS_POISSON_THRESHOLD = 1e7


class DomainError(ValueError):
    """Raised when a parameter lies outside the moment domain of a law."""


class PopulationOverflow(OverflowError):
    """Raised when a single offspring total exceeds the population cap."""


class LatticeWarning(UserWarning):
    pass


class Offspring(str, enum.Enum):
    POISSON = "poisson"
    GEOMETRIC = "geometric"


@dataclass(frozen=True)
class LogNormal:
    """``log A ~ Normal(mu, s2)``."""

    mu: float
    s2: float

    kind = "LogNormal"

    def __post_init__(self):
        if not self.s2 > 0:
            raise ValueError("s2 must be positive")

    @property
    def alpha_inf(self) -> float:
        return math.inf

    @property
    def mean_log(self) -> float:
        return self.mu

    def log_moment(self, alpha):
        """Return ``(Lambda, Lambda', Lambda'')`` at ``alpha``."""
        alpha = float(alpha)
        return (
            alpha * self.mu + 0.5 * alpha * alpha * self.s2,
            self.mu + alpha * self.s2,
            self.s2,
        )

    def tilted(self, alpha: float) -> "LogNormal":
        return LogNormal(self.mu + alpha * self.s2, self.s2)

    def sample_log(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.normal(self.mu, math.sqrt(self.s2), size=size)

    def params(self) -> dict:
        return {"kind": self.kind, "mu": self.mu, "s2": self.s2}


@dataclass(frozen=True)
class FiniteTable:
    """Discrete law ``P[A = means[i]] = weights[i]``."""

    weights: tuple
    means: tuple

    kind = "FiniteTable"

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        m = tuple(float(x) for x in self.means)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        if len(w) != len(m) or not w:
            raise ValueError("weights and means must be non-empty and of equal length")
        if any(x < 0 for x in w):
            raise ValueError("weights must be nonnegative")
        if abs(sum(w) - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        if any(not x > 0 for x in m):
            raise ValueError("means must be positive")

    @property
    def _support(self):
        # atoms with zero weight never occur and do not enter any moment
        return [(p, a) for p, a in zip(self.weights, self.means) if p > 0]

    @property
    def alpha_inf(self) -> float:
        return math.inf

    @property
    def mean_log(self) -> float:
        return sum(p * math.log(a) for p, a in self._support)

    def log_moment(self, alpha):
        p, a = map(np.asarray, zip(*self._support))
        la = np.log(a)
        logterms = np.log(p) + float(alpha) * la
        lam = logsumexp(logterms)
        q = np.exp(logterms - lam)
        rho = float(np.dot(q, la))
        var = float(np.dot(q, (la - rho) ** 2))
        return float(lam), rho, var

    def tilted(self, alpha: float) -> "FiniteTable":
        lam = self.log_moment(alpha)[0]
        w = [
            math.exp(math.log(p) + alpha * math.log(a) - lam) if p > 0 else 0.0
            for p, a in zip(self.weights, self.means)
        ]
        # renormalize the rounding residue so the weights-sum invariant holds
        s = math.fsum(w)
        return type(self)._from_arrays(tuple(x / s for x in w), self.means)

    @classmethod
    def _from_arrays(cls, weights, means):
        return FiniteTable(weights, means)

    def sample_log(self, rng: np.random.Generator, size) -> np.ndarray:
        idx = rng.choice(len(self.means), size=size, p=np.asarray(self.weights))
        return np.log(np.asarray(self.means))[idx]

    def lattice_suspect(self, max_den: int = 100, tol: float = 1e-9) -> bool:
        """True if every pair of nonzero ``log a_i`` has a small-denominator rational ratio."""
        logs = [math.log(a) for _, a in self._support]
        nz = [x for x in logs if x != 0.0]
        if len(logs) <= 1:
            return True
        if len(nz) <= 1:
            return True
        for x in nz[1:]:
            r = x / nz[0]
            approx = Fraction(r).limit_denominator(max_den)
            if abs(r - float(approx)) > tol:
                return False
        return True

    def params(self) -> dict:
        return {"kind": self.kind, "weights": list(self.weights), "means": list(self.means)}


class TwoPoint(FiniteTable):
    kind = "TwoPoint"

    def __post_init__(self):
        super().__post_init__()
        if len(self.weights) != 2:
            raise ValueError("TwoPoint needs exactly two atoms")

    @classmethod
    def _from_arrays(cls, weights, means):
        return TwoPoint(weights, means)


def law_from_dict(spec: dict):
    """Build an environment law from ``{"kind": ..., **params}``."""
    kind = spec.get("kind")
    if kind == "LogNormal":
        return LogNormal(float(spec["mu"]), float(spec["s2"]))
    if kind == "FiniteTable":
        return FiniteTable(tuple(spec["weights"]), tuple(spec["means"]))
    if kind == "TwoPoint":
        return TwoPoint(tuple(spec["weights"]), tuple(spec["means"]))
    raise ValueError(f"unknown environment law {kind!r}")


@dataclass(frozen=True)
class EnvModel:
    """Environment law plus offspring family.

    Parameters
    ----------
    env_law : LogNormal | FiniteTable | TwoPoint
    offspring : Offspring
        Family of a single individual's offspring law given its mean.
    cap : int
        Saturation level for population counts.
    """

    env_law: object
    offspring: Offspring = Offspring.POISSON
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        object.__setattr__(self, "offspring", Offspring(self.offspring))
        if isinstance(self.env_law, FiniteTable) and self.env_law.lattice_suspect():
            warnings.warn(
                f"log-environment law {self.env_law.params()} looks lattice",
                LatticeWarning,
                stacklevel=3,
            )

    @property
    def alpha_inf(self) -> float:
        return self.env_law.alpha_inf

    def describe(self) -> str:
        p = self.env_law.params()
        body = ";".join(f"{k}={v}" for k, v in p.items() if k != "kind")
        return f"{p['kind']}({body})/{self.offspring.value}"


@dataclass(frozen=True)
class EnvParam:
    a: float

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("environment mean must be positive")


@dataclass(frozen=True)
class TiltedModel:
    """Base model whose environment marginal is reweighted by ``A**alpha / lambda(alpha)``."""

    base: EnvModel
    alpha: float
    log_lambda: float
    model: EnvModel = field(repr=False)


def _check_domain(model: EnvModel, alpha: float) -> None:
    if not (0.0 <= alpha < model.alpha_inf):
        raise DomainError(f"alpha={alpha} outside moment domain [0, {model.alpha_inf})")


def env_moment(model: EnvModel, alpha: float) -> float:
    """``lambda(alpha) = E[A**alpha]``."""
    _check_domain(model, alpha)
    return math.exp(model.env_law.log_moment(alpha)[0])


def tilt(model: EnvModel, alpha: float) -> TiltedModel:
    _check_domain(model, alpha)
    law = model.env_law if alpha == 0 else model.env_law.tilted(alpha)
    with warnings.catch_warnings():
        # tilting never changes the support, so lattice status is inherited
        warnings.simplefilter("ignore", LatticeWarning)
        tilted_model = EnvModel(law, model.offspring, model.cap)
    return TiltedModel(
        base=model,
        alpha=float(alpha),
        log_lambda=model.env_law.log_moment(alpha)[0],
        model=tilted_model,
    )


def sample_log_env(model: EnvModel, rng: np.random.Generator, size) -> np.ndarray:
    """Vector of iid ``log A`` draws."""
    return model.env_law.sample_log(rng, size)


def sample_env_param(model: EnvModel, rng: np.random.Generator) -> EnvParam:
    return EnvParam(float(np.exp(sample_log_env(model, rng, None))))


def _poisson(lam: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    out = np.empty(lam.shape, dtype=float)
    big = lam > GAUSS_POISSON_THRESHOLD
    if big.any():
        lb = lam[big]
        out[big] = np.floor(lb + np.sqrt(lb) * rng.standard_normal(lb.shape) + 0.5)
        small = ~big
        out[small] = rng.poisson(lam[small])
    else:
        out = rng.poisson(lam).astype(float)
    return np.maximum(out, 0.0)


def offspring_totals(model: EnvModel, a, z, rng: np.random.Generator):
    """Sum of ``z`` iid offspring counts with mean ``a``, elementwise.

    Returns ``(totals, saturated)``: int64 counts clipped at ``model.cap`` and
    the boolean mask of clipped entries.
    """
    a = np.asarray(a, dtype=float)
    z = np.asarray(z, dtype=np.int64)
    a, z = np.broadcast_arrays(a, z)
    out = np.zeros(z.shape, dtype=float)
    live = z > 0
    if live.any():
        zl = z[live].astype(float)
        al = a[live]
        if model.offspring is Offspring.POISSON:
            out[live] = _poisson(zl * al, rng)
        else:
            # negative binomial(z, 1/(1+a)) as a Gamma(z, scale a)-mixed Poisson
            pos = al > 0
            lam = np.zeros_like(zl)
            lam[pos] = rng.gamma(zl[pos], al[pos])
            out[live] = _poisson(lam, rng)
    saturated = out >= model.cap
    totals = np.where(saturated, model.cap, out).astype(np.int64)
    return totals, saturated


def sample_offspring_total(model: EnvModel, theta: EnvParam | float, z: int, rng) -> int:
    if z < 0:
        raise ValueError("population count must be nonnegative")
    a = theta.a if isinstance(theta, EnvParam) else float(theta)
    if z == 0 or a == 0:
        return 0
    total, sat = offspring_totals(model, a, z, rng)
    if sat:
        raise PopulationOverflow(f"offspring total exceeds cap {model.cap}")
    return int(total)
