"""Named experiments that compare estimators against closed-form predictions.

Each experiment returns an :class:`ExperimentReport` whose rows carry the
measured value, the prediction, a comparison rule and the key of the
tolerance it is judged by.  The tolerances themselves are echoed in the
report, so :func:`check_report` can re-derive every verdict from the rows.

Comparison rules (``m`` measured, ``p`` predicted, ``tol`` tolerance):

======  ====================================  =========================
rule    passes when                           utilization
======  ====================================  =========================
abs     ``|m - p| <= tol``                    ``|m - p| / tol``
rel     ``|m / p - 1| <= tol``                ``|m / p - 1| / tol``
sigma   ``|m - p| <= tol * stderr``           ``|m - p| / (tol stderr)``
le      ``m - p <= tol``                      ``(m - p) / tol``
ge      ``p - m <= tol``                      ``(p - m) / tol``
info    always (not part of the verdict)      --
======  ====================================  =========================

A row passes exactly when its utilization is at most 1; the report's
``worst_ratio`` is the largest utilization over judged rows.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from scipy.special import gammaln

from .envmodel import EnvModel, FiniteTable, LogNormal, Offspring, law_from_dict
from .estimate import (
    _conditional_poly,
    conditioned_passage_stats,
    estimate_ld_prob,
    estimate_moment_ratio,
    estimate_passage_pmf,
    estimate_passage_prob,
    exact_moments,
    prefactor_C1,
    tail_index_fit,
)
from .rates import RegimeError, log_moment, rate_pack, solve_alpha_from_rho, solve_cramer
from .sim import batch_identity_residuals, simulate_batch
from .streams import stream

__all__ = [
    "DEFAULT_PARAMS",
    "DEFAULT_TOLERANCES",
    "EXPERIMENTS",
    "CheckResult",
    "ExperimentError",
    "ExperimentReport",
    "ReportSchemaError",
    "Row",
    "check_report",
    "default_D",
    "pi_tail_exact",
    "run_experiment",
    "theory_prediction",
]

EXPERIMENTS = ("identities", "petrov", "thm21", "prop31", "thm22", "thm23", "thm24", "tails")
RULES = ("abs", "rel", "sigma", "le", "ge", "info")

DEFAULT_PARAMS = {
    "identities": {"n_paths": 10_000, "n": 30, "m_grid": [0, 5, 15], "families": ["poisson", "geometric"]},
    "petrov": {"rho": 0.35, "n_grid": [10, 20, 30, 40], "N": 200_000},
    "thm21": {"rho": 0.35, "n_grid": [10, 20, 30, 40], "N": 200_000},
    "prop31": {
        "alpha": 2, "k_max": 60, "u_ref": 4.96318, "mc_k": 10, "mc_N": 200_000,
        "sub_model": {"kind": "LogNormal", "mu": -1.0, "s2": 0.25}, "sub_k_max": 60, "envelope_c": 2.0,
    },
    "thm22": {
        "kind": "Z", "rho_lower": 0.7, "rho_upper": 0.2, "n": 40, "theta": 0.5,
        "theta_grid": [0.125, 0.375, 0.625, 0.875], "N": 1_000_000,
    },
    "thm23": {"alpha": 6.0, "D": None, "n_grid": [10, 12, 14, 16], "N": 200_000},
    "thm24": {"kind": "W", "log_t_grid": [8, 10, 12], "N": 100_000},
    "tails": {"log_t_grid": [4, 6, 8, 10], "N": 100_000},
}

DEFAULT_TOLERANCES = {
    "identities": {"residual": 1e-9},
    "petrov": {"sigma": 3.0, "rel_stderr": 0.03},
    "thm21": {"final": 0.25, "approach": 0.0, "plateau": 0.0},
    "prop31": {"monotone": 0.0, "u_ref": 1e-6, "recursion": 1e-9, "mc": 3.0, "envelope": 0.0},
    "thm22": {"lower": 0.15, "upper": 0.25, "theta": 0.2},
    "thm23": {"decay": 0.0},
    "thm24": {"mean": 0.05, "ks": 0.08, "truncation": 1e-3},
    "tails": {"slope_sup": 0.1, "slope_total": 0.15},
}


class ExperimentError(RuntimeError):
    """An estimator failed at a specific grid point."""


class ReportSchemaError(ValueError):
    pass


@dataclass
class Row:
    key: str
    point: str
    measured: float
    predicted: float
    stderr: float = 0.0
    rule: str = "info"

    @property
    def ratio(self) -> float:
        if self.predicted == 0:
            return math.nan
        return self.measured / self.predicted


@dataclass
class ExperimentReport:
    name: str
    rows: list
    verdict: bool
    worst_ratio: float
    runtime_seconds: float
    seed: int
    config_echo: dict = field(default_factory=dict)

    def table(self) -> list[dict]:
        return [dict(asdict(r), ratio=r.ratio) for r in self.rows]


@dataclass(frozen=True)
class CheckResult:
    passed: bool
    worst_ratio: float
    row_passed: tuple


def _utilization(row: Row, tol: float) -> float:
    m, p, rule = row.measured, row.predicted, row.rule
    if rule == "abs":
        dev = abs(m - p)
    elif rule == "rel":
        dev = abs(m / p - 1.0) if p != 0 else math.inf
    elif rule == "sigma":
        dev, tol = abs(m - p), tol * row.stderr
    elif rule == "le":
        dev = m - p
    elif rule == "ge":
        dev = p - m
    else:
        raise ReportSchemaError(f"unknown rule {rule!r}")
    if math.isnan(dev):
        return math.inf
    if math.isinf(tol):
        return 0.0
    if tol == 0:
        return 0.0 if dev <= 0 else math.inf
    return dev / tol


def check_report(report: ExperimentReport, tolerances: dict | None = None) -> CheckResult:
    """Re-evaluate every row; ``tolerances`` defaults to the ones echoed in the report."""
    tols = report.config_echo.get("tolerances", {}) if tolerances is None else tolerances
    flags, worst = [], 0.0
    for row in report.rows:
        if not isinstance(row, Row) or row.rule not in RULES:
            raise ReportSchemaError(f"malformed row {row!r}")
        if row.rule == "info":
            flags.append(True)
            continue
        if row.key not in tols:
            raise ReportSchemaError(f"no tolerance for row key {row.key!r}")
        u = _utilization(row, float(tols[row.key]))
        flags.append(u <= 1.0)
        worst = max(worst, u)
    return CheckResult(all(flags), worst, tuple(flags))


# ----------------------------------------------------------------------------
# closed-form oracles


def pi_tail_exact(model: EnvModel, rho: float, n: int) -> float:
    """Exact ``P[Pi_n > exp(rho n)]`` for Gaussian or small finite log-environments."""
    law = model.env_law
    if isinstance(law, LogNormal):
        return float(stats.norm.sf((rho - law.mu) * math.sqrt(n / law.s2)))
    if isinstance(law, FiniteTable):
        atoms = [(p, math.log(a)) for p, a in zip(law.weights, law.means) if p > 0]
        if len(atoms) > 6:
            raise ValueError("exact enumeration supports at most 6 atoms")
        logp = np.log([p for p, _ in atoms])
        la = np.array([x for _, x in atoms])
        total = 0.0
        for cut in itertools.combinations(range(n + len(atoms) - 1), len(atoms) - 1):
            edges = (-1,) + cut + (n + len(atoms) - 1,)
            counts = np.diff(edges) - 1
            if counts @ la > rho * n:
                total += math.exp(gammaln(n + 1) - gammaln(counts + 1).sum() + counts @ logp)
        return total
    raise ValueError(f"no exact tail for {type(law).__name__}")


def default_D(model: EnvModel, alpha: float) -> float:
    """A cutoff constant just above ``(2 alpha + 3) / |Lambda(alpha)|``."""
    L = log_moment(model, alpha)[0]
    if L == 0:
        raise RegimeError("Lambda(alpha) = 0: no admissible cutoff constant")
    return (2 * alpha + 3) / abs(L) + 0.5


def _second_moment_closed(model: EnvModel, k: np.ndarray):
    """``E[Z_k^2] / lambda(2)^k`` and its limit from the geometric series."""
    lam1, lam2 = (math.exp(log_moment(model, j)[0]) for j in (1, 2))
    b = sum(c * math.exp(log_moment(model, pa)[0]) for (pz, pa), c in _conditional_poly(model.offspring, 2).items()
            if pz == 1)
    r = lam1 / lam2
    finite = 1.0 + (b / lam2) * (1.0 - r ** k) / (1.0 - r)
    limit = 1.0 + (b / lam2) / (1.0 - r) if r < 1 else math.inf
    return finite, limit


def theory_prediction(name: str, model: EnvModel, params: dict | None = None) -> dict:
    """Closed-form predictions for experiment ``name`` over its grid."""
    p = _params(name, params)
    if name == "identities":
        return {"residual": 0.0}
    if name == "petrov":
        alpha = solve_alpha_from_rho(model, p["rho"])
        rp = rate_pack(model, alpha)
        lstar = alpha * p["rho"] - rp.log_lambda
        asym = [math.exp(-n * lstar) / (alpha * rp.sigma * math.sqrt(2 * math.pi * n)) for n in p["n_grid"]]
        exact = [pi_tail_exact(model, p["rho"], n) for n in p["n_grid"]]
        return {"alpha": alpha, "asymptotic": asym, "exact": exact}
    if name == "thm21":
        pf = prefactor_C1(model, p["rho"], N=p["N"])
        rp = rate_pack(model, pf.alpha)
        curve = [pf.value / math.sqrt(n) * math.exp(-rp.rate_n * n) for n in p["n_grid"]]
        return {"alpha": pf.alpha, "C1": pf.value, "C1_stderr": pf.stderr, "rate_n": rp.rate_n, "curve": curve}
    if name == "prop31":
        alpha = p["alpha"]
        if alpha != 2:
            return {"alpha": alpha}
        rate_pack(model, alpha).require_z_regime()
        finite, limit = _second_moment_closed(model, np.arange(p["k_max"] + 1))
        return {"alpha": alpha, "u": finite, "limit": limit}
    if name == "thm22":
        out = {}
        a_lo = solve_alpha_from_rho(model, p["rho_lower"])
        rp = rate_pack(model, a_lo)
        rp.require_z_regime()
        if not rp.lam > 1:
            raise RegimeError(f"lower-tail ratio needs lambda(alpha) > 1 at rho={p['rho_lower']}")
        out["lower"] = rp.lam / (rp.lam - 1.0)
        out["theta_factor"] = [rp.lam ** -th for th in p["theta_grid"]]
        a_up = solve_alpha_from_rho(model, p["rho_upper"])
        rq = rate_pack(model, a_up)
        rq.require_z_regime()
        if not rq.lam < 1:
            raise RegimeError(f"upper-tail ratio needs lambda(alpha) < 1 at rho={p['rho_upper']}")
        out["upper"] = 1.0 / (1.0 - rq.lam)
        return out
    if name == "thm23":
        alpha = p["alpha"]
        rp = rate_pack(model, alpha)
        rp.require_w_regime()
        if not rp.log_lambda > 0:
            raise RegimeError("cutoff needs Lambda(alpha) > 0")
        D = default_D(model, alpha) if p["D"] is None else float(p["D"])
        if not D > (2 * alpha + 3) / rp.log_lambda:
            raise RegimeError(f"D={D:g} must exceed (2 alpha + 3) / Lambda(alpha)")
        n_bar = [math.floor(n - D * math.log(n)) for n in p["n_grid"]]
        return {"alpha": alpha, "rho": rp.rho, "rate_n": rp.rate_n, "D": D, "n_bar": n_bar, "limit": 0.0}
    if name == "thm24":
        cr = solve_cramer(model)
        if not cr.alpha0 > 1:
            raise RegimeError("conditioned limits need alpha0 > 1")
        return {
            "mean_ratio": 1.0 / cr.rho0,
            "center": [lt / cr.rho0 for lt in p["log_t_grid"]],
            "scale": [cr.sigma0 * cr.rho0 ** -1.5 * math.sqrt(lt) for lt in p["log_t_grid"]],
        }
    if name == "tails":
        return {"slope": -solve_cramer(model).alpha0}
    raise ValueError(f"unknown experiment {name!r}")


# ----------------------------------------------------------------------------
# experiments


def _params(name: str, params: dict | None) -> dict:
    if name not in DEFAULT_PARAMS:
        raise ValueError(f"unknown experiment {name!r}; expected one of {', '.join(EXPERIMENTS)}")
    p = dict(DEFAULT_PARAMS[name])
    unknown = set(params or {}) - set(p)
    if unknown:
        raise ValueError(f"unknown parameters for {name}: {sorted(unknown)}")
    p.update(params or {})
    return p


def _tolerances(name: str, tolerances) -> dict:
    tols = dict(DEFAULT_TOLERANCES[name])
    if tolerances is None:
        return tols
    if isinstance(tolerances, (int, float)):
        return {k: float(tolerances) for k in tols}
    unknown = set(tolerances) - set(tols)
    if unknown:
        raise ValueError(f"unknown tolerance keys for {name}: {sorted(unknown)}")
    tols.update({k: float(v) for k, v in tolerances.items()})
    return tols


def _at(point: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except RegimeError:
        raise
    except Exception as exc:
        raise ExperimentError(f"{point}: {exc}") from exc


def _exp_identities(model, p, seed, workers):
    rows = []
    for j, fam in enumerate(p["families"]):
        fm = EnvModel(model.env_law, Offspring(fam), model.cap)
        batch = simulate_batch(fm, p["n"], p["n_paths"], stream(seed, (6 << 32) | j))
        worst = np.zeros(3)
        for m in p["m_grid"]:
            res = np.abs(batch_identity_residuals(batch, m, p["n"]))
            worst = np.maximum(worst, res.max(axis=0))
        for name, v in zip(("pi_forward", "pi_backward", "total_perpetuity"), worst):
            rows.append(Row("residual", f"{fam}:{name}", float(v), 0.0, 0.0, "le"))
    return rows


def _exp_petrov(model, p, seed, workers):
    th = theory_prediction("petrov", model, p)
    rows = []
    for n, asym, exact in zip(p["n_grid"], th["asymptotic"], th["exact"]):
        est = _at(f"n={n}", estimate_ld_prob, model, "Pi", p["rho"], n, p["N"], seed=seed, workers=workers)
        rows.append(Row("sigma", f"n={n}", est.value, exact, est.stderr, "sigma"))
        rows.append(Row("rel_stderr", f"n={n}", est.rel_stderr, 0.0, 0.0, "le"))
        rows.append(Row("asymptotic", f"n={n}", exact, asym, 0.0, "info"))
    return rows


def _exp_thm21(model, p, seed, workers):
    th = theory_prediction("thm21", model, p)
    C1 = th["C1"]
    r = []
    rows = []
    for n in p["n_grid"]:
        est = _at(f"n={n}", estimate_ld_prob, model, "Z", p["rho"], n, p["N"], seed=seed, workers=workers)
        scale = math.sqrt(n) * math.exp(th["rate_n"] * n)
        r.append(est.value * scale)
        rows.append(Row("r_n", f"n={n}", est.value * scale, C1, est.stderr * scale, "info"))
    gap = [abs(x - C1) for x in r]
    rows.append(Row("final", f"n={p['n_grid'][-1]}", r[-1], C1, rows[-1].stderr, "rel"))
    rows.append(Row("approach", f"n={p['n_grid'][0]}..{p['n_grid'][-1]}", gap[-1] - gap[0], 0.0, 0.0, "le"))
    if len(gap) >= 2:
        rows.append(Row("plateau", f"n={p['n_grid'][-2]}..{p['n_grid'][-1]}", gap[-1] - gap[-2], 0.0, 0.0, "le"))
    return rows


def _exp_prop31(model, p, seed, workers):
    alpha, k_max = p["alpha"], p["k_max"]
    rows = []
    ex = _at("exact", estimate_moment_ratio, model, "Z", alpha, k_max=k_max)
    rows.append(Row("monotone", f"k=1..{k_max}", float(np.min(np.diff(ex.u))), 0.0, 0.0, "ge"))
    rows.append(Row("u_ref", f"k={k_max}", float(ex.u[-1]), p["u_ref"], 0.0, "abs"))
    if alpha == 2:
        th = theory_prediction("prop31", model, p)
        dev = float(np.max(np.abs(ex.u - th["u"]) / th["u"]))
        rows.append(Row("recursion", f"k=0..{k_max}", dev, 0.0, 0.0, "le"))
        rows.append(Row("limit", "k=inf", float(ex.u[-1]), th["limit"], 0.0, "info"))
    k = p["mc_k"]
    mc = _at(f"mc k={k}", estimate_moment_ratio, model, "Z", alpha, k_max=k, N=p["mc_N"], seed=seed, workers=workers)
    rows.append(Row("mc", f"k={k}", float(mc.u[k]), float(ex.u[k]), float(mc.stderr[k]), "sigma"))
    # strongly subcritical companion: lambda(2) < lambda(1)
    sub = EnvModel(law_from_dict(p["sub_model"]), model.offspring, model.cap)
    L1, L2 = log_moment(sub, 1.0)[0], log_moment(sub, 2.0)[0]
    if not (L2 < L1 and log_moment(sub, 1.0)[1] < 0):
        raise RegimeError("sub_model must satisfy lambda(2) < lambda(1) and E[A log A] < 0")
    kk = np.arange(p["sub_k_max"] + 1)
    v = exact_moments(sub, 2, p["sub_k_max"]) * np.exp(-L1 * kk)
    c = p["envelope_c"]
    rows.append(Row("envelope", "lower", float(v.min()), 1.0, 0.0, "ge"))
    rows.append(Row("envelope", "upper", float(np.max(v[1:] / (c * kk[1:] ** c))), 1.0, 0.0, "le"))
    return rows


def _exp_thm22(model, p, seed, workers):
    th = theory_prediction("thm22", model, p)
    kind, n = p["kind"], p["n"]
    rows = []

    def pmf_at(rho, theta, j):
        t = math.exp(rho * (n + theta))
        alpha = solve_alpha_from_rho(model, rho)
        w = math.ceil(default_D(model, alpha) * math.log(n))
        window = range(max(1, n - w), n + w + 1)
        return _at(f"rho={rho:g},theta={theta:g}", estimate_passage_pmf, model, t, kind, rho, window,
                   p["N"], seed=seed + j, workers=workers)

    lo = pmf_at(p["rho_lower"], p["theta"], 0)
    r, se = lo.lower_ratio(n)
    rows.append(Row("lower", f"rho={p['rho_lower']:g},n={n}", r, th["lower"], se, "rel"))
    up = pmf_at(p["rho_upper"], p["theta"], 1)
    r, se = up.upper_ratio(n)
    rows.append(Row("upper", f"rho={p['rho_upper']:g},n={n}", r, th["upper"], se, "rel"))
    # Theta sweep at fixed n: P[T = n] t^alpha_bar sqrt(log t) / lambda^(-Theta) should be flat
    rp = rate_pack(model, solve_alpha_from_rho(model, p["rho_lower"]))
    vals, ses = [], []
    for j, (theta, fac) in enumerate(zip(p["theta_grid"], th["theta_factor"])):
        pm = pmf_at(p["rho_lower"], theta, 2 + j)
        lt = math.log(pm.t)
        scale = math.exp(rp.alpha_bar * lt) * math.sqrt(lt) / fac
        vals.append(pm.pmf[n].value * scale)
        ses.append(pm.pmf[n].stderr * scale)
    mean = float(np.mean(vals))
    for theta, v, s in zip(p["theta_grid"], vals, ses):
        rows.append(Row("theta", f"theta={theta:g}", v / mean, 1.0, s / mean, "rel"))
    return rows


def _exp_thm23(model, p, seed, workers):
    th = theory_prediction("thm23", model, p)
    rows, r = [], []
    for n, nb in zip(p["n_grid"], th["n_bar"]):
        # the speed needed to reach exp(rho n) within n_bar generations
        est = _at(f"n={n}", estimate_ld_prob, model, "W", th["rho"] * n / nb, nb, p["N"], seed=seed, workers=workers)
        scale = math.exp(0.5 * math.log(n) + th["rate_n"] * n)
        r.append(est.value * scale)
        rows.append(Row("r_n", f"n={n},n_bar={nb}", r[-1], 0.0, est.stderr * scale, "info"))
    for k in range(max(1, len(r) - 2), len(r)):
        rows.append(Row("decay", f"n={p['n_grid'][k - 1]}->{p['n_grid'][k]}", r[k] - r[k - 1], 0.0, 0.0, "le"))
    return rows


def _exp_thm24(model, p, seed, workers):
    th = theory_prediction("thm24", model, p)
    rows = []
    grid = p["log_t_grid"]
    for i, lt in enumerate(grid):
        cs = _at(f"log t={lt:g}", conditioned_passage_stats, model, math.exp(lt), p["kind"], p["N"],
                 seed=seed + i, workers=workers)
        rule = "info" if i < len(grid) - 1 else None
        pt = f"log t={lt:g}"
        rows.append(Row("mean", pt, cs.mean_ratio, th["mean_ratio"], cs.mean_ratio_stderr, rule or "rel"))
        rows.append(Row("ks", pt, cs.ks, 0.0, 0.0, rule or "le"))
        rows.append(Row("truncation", pt, cs.truncated_fraction, 0.0, 0.0, rule or "le"))
    return rows


def _exp_tails(model, p, seed, workers):
    th = theory_prediction("tails", model, p)
    rows = []
    for key, kind in (("slope_sup", "Z"), ("slope_total", "W")):
        pts = []
        for i, lt in enumerate(p["log_t_grid"]):
            est = _at(f"{kind} log t={lt:g}", estimate_passage_prob, model, math.exp(lt), kind, p["N"],
                      seed=seed + i, workers=workers)
            pts.append((math.exp(lt), est.value))
            rows.append(Row(f"p_{kind}", f"log t={lt:g}", est.value, 0.0, est.stderr, "info"))
        fit = _at(f"{kind} fit", tail_index_fit, pts)
        rows.append(Row(key, kind, fit.slope, th["slope"], fit.slope_stderr, "abs"))
    return rows


_RUNNERS = {
    "identities": _exp_identities,
    "petrov": _exp_petrov,
    "thm21": _exp_thm21,
    "prop31": _exp_prop31,
    "thm22": _exp_thm22,
    "thm23": _exp_thm23,
    "thm24": _exp_thm24,
    "tails": _exp_tails,
}


def run_experiment(name: str, model: EnvModel, params: dict | None = None, tolerances=None,
                   seed: int = 0, workers: int = 1) -> ExperimentReport:
    """Run experiment ``name`` and judge it against ``tolerances``.

    ``tolerances`` may be a mapping of row keys to values (missing keys use
    the defaults) or a single number applied to every key.
    """
    p = _params(name, params)
    tols = _tolerances(name, tolerances)
    start = time.perf_counter()
    rows = _RUNNERS[name](model, p, seed, workers)
    runtime = time.perf_counter() - start
    echo = {"model": model.describe(), "params": p, "tolerances": tols, "workers": workers}
    report = ExperimentReport(name, rows, False, math.nan, runtime, seed, echo)
    chk = check_report(report)
    report.verdict, report.worst_ratio = chk.passed, chk.worst_ratio
    return report
