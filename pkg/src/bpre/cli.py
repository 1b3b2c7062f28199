"""Command-line entry point: ``bpre {rate,simulate,estimate,experiment} --config run.json``.

Exit codes: 0 success, 1 I/O or schema error, 2 regime error, 3 failed
experiment verdict.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from . import __version__
from .envmodel import DomainError, EnvModel, law_from_dict
from .estimate import estimate_ld_prob, estimate_passage_prob
from .rates import NoRootError, RegimeError, SubcriticalityError, rate_pack, solve_cramer
from .sim import simulate_batch, trajectory_rows
from .streams import resolve_workers, stream
from .verify import DEFAULT_PARAMS, EXPERIMENTS, run_experiment

EXIT_OK, EXIT_IO, EXIT_REGIME, EXIT_VERDICT = 0, 1, 2, 3
COMMANDS = ("rate", "simulate", "estimate", "experiment")

RATE_COLUMNS = ["alpha", "lambda", "Lambda", "rho", "sigma", "alpha_bar", "rate_n", "alpha0", "rho0", "sigma0"]
ESTIMATE_COLUMNS = ["target", "rho_or_alpha", "n", "t", "method", "value", "stderr", "ess", "hits",
                    "n_samples", "truncated_mass", "seed"]
TRAJECTORY_COLUMNS = ["path_id", "k", "Z_k", "log_A_k", "S_k", "W_k", "weight_k"]
REPORT_COLUMNS = ["key", "point", "measured", "predicted", "stderr", "ratio", "rule", "tolerance", "pass"]

_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["env_law"],
            "properties": {
                "env_law": {
                    "type": "object",
                    "required": ["kind"],
                    "oneOf": [
                        {
                            "additionalProperties": False,
                            "required": ["kind", "mu", "s2"],
                            "properties": {"kind": {"const": "LogNormal"}, "mu": {"type": "number"}, "s2": _pos},
                        },
                        {
                            "additionalProperties": False,
                            "required": ["kind", "weights", "means"],
                            "properties": {
                                "kind": {"enum": ["TwoPoint", "FiniteTable"]},
                                "weights": {"type": "array", "minItems": 1,
                                            "items": {"type": "number", "minimum": 0}},
                                "means": {"type": "array", "minItems": 1, "items": _pos},
                            },
                        },
                    ],
                },
                "offspring": {"enum": ["poisson", "geometric"]},
            },
        },
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "workers": _posint,
        "output_dir": {"type": "string", "minLength": 1},
        "rate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"alpha_grid": {"type": "array", "minItems": 1, "items": _pos}},
        },
        "simulate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": _posint,
                "paths": _posint,
                "tilt_alpha": {"type": ["number", "null"], "minimum": 0},
            },
        },
        "estimate": {
            "type": "object",
            "additionalProperties": False,
            "required": ["target"],
            "properties": {
                "target": {"enum": ["Z", "Pi", "W", "passage_Z", "passage_W"]},
                "rho": {"type": "number"},
                "alpha": _pos,
                "n_grid": {"type": "array", "minItems": 1, "items": _posint},
                "log_t_grid": {"type": "array", "minItems": 1, "items": _pos},
                "N": _posint,
                "method": {"enum": ["tilted", "naive"]},
            },
        },
        "experiment": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {"name": {"enum": list(EXPERIMENTS)}, "params": {"type": "object"}},
        },
        "tolerances": {
            "type": "object",
            "propertyNames": {"enum": list(EXPERIMENTS)},
            "additionalProperties": {
                "oneOf": [
                    {"type": "number", "minimum": 0},
                    {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
                ]
            },
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "output_dir": "out",
    "simulate": {"n": 30, "paths": 10, "tilt_alpha": None},
    "estimate": {"N": 100_000, "method": "tilted"},
}


class ConfigError(ValueError):
    """Schema violation, reported with the offending key path."""


@dataclass
class RunConfig:
    model: dict
    seed: int = 0
    workers: int = 1
    output_dir: str = "out"
    sections: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)

    def build_model(self) -> EnvModel:
        return EnvModel(law_from_dict(self.model["env_law"]), self.model.get("offspring", "poisson"))

    def to_dict(self) -> dict:
        out = {"model": self.model, "seed": self.seed, "workers": self.workers, "output_dir": self.output_dir}
        out.update(self.sections)
        if self.tolerances:
            out["tolerances"] = self.tolerances
        return out

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _path(err) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def parse_config(text: str) -> RunConfig:
    """Validate a JSON run configuration and fill documented defaults."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{_path(e)}: {e.message}")
    law = doc["model"]["env_law"]
    if "weights" in law:
        if len(law["weights"]) != len(law["means"]):
            raise ConfigError("model/env_law: weights and means must have equal length")
        if abs(math.fsum(law["weights"]) - 1.0) > 1e-12:
            raise ConfigError("model/env_law/weights: weights must sum to 1")
        if law["kind"] == "TwoPoint" and len(law["weights"]) != 2:
            raise ConfigError("model/env_law: TwoPoint needs exactly two atoms")
    model = {"env_law": dict(law), "offspring": doc["model"].get("offspring", "poisson")}
    est = doc.get("estimate")
    if est is not None:
        ld = est["target"] in ("Z", "Pi", "W")
        if ld and ("rho" in est) == ("alpha" in est):
            raise ConfigError("estimate: give exactly one of rho or alpha")
        if ld and "n_grid" not in est:
            raise ConfigError("estimate: 'n_grid' is required for this target")
        if not ld and "log_t_grid" not in est:
            raise ConfigError("estimate: 'log_t_grid' is required for passage targets")
    if "experiment" in doc:
        name = doc["experiment"]["name"]
        unknown = set(doc["experiment"].get("params", {})) - set(DEFAULT_PARAMS[name])
        if unknown:
            raise ConfigError(f"experiment/params: unknown keys {sorted(unknown)}")
    sections = {}
    for cmd in COMMANDS:
        if cmd in doc:
            sec = dict(DEFAULTS.get(cmd, {}))
            sec.update(doc[cmd])
            sections[cmd] = sec
    return RunConfig(
        model=model,
        seed=doc.get("seed", DEFAULTS["seed"]),
        workers=doc.get("workers", DEFAULTS["workers"]),
        output_dir=doc.get("output_dir", DEFAULTS["output_dir"]),
        sections=sections,
        tolerances=doc.get("tolerances", {}),
    )


# ----------------------------------------------------------------------------
# output


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _header(cfg: RunConfig, model: EnvModel, workers: int) -> str:
    return f"# model={model.describe()}, seed={cfg.seed}, workers={workers}, version={__version__}\n"


def _write_csv(path: Path, header: str, columns, rows, force: bool, extra_header: str = "") -> None:
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    buf = io.StringIO()
    buf.write(header + extra_header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def _cramer_or_none(model):
    try:
        return solve_cramer(model)
    except (NoRootError, SubcriticalityError):
        return None


def cmd_rate(cfg: RunConfig, model, workers, out: Path, force: bool) -> int:
    cr = _cramer_or_none(model)
    grid = cfg.sections.get("rate", {}).get("alpha_grid")
    if grid is None:
        if cr is None:
            raise RegimeError("no Cramer root; give rate.alpha_grid explicitly")
        grid = [cr.alpha0]
    rows = []
    for a in grid:
        rp = rate_pack(model, float(a))
        c = (cr.alpha0, cr.rho0, cr.sigma0) if cr else (None, None, None)
        rows.append((rp.alpha, rp.lam, rp.log_lambda, rp.rho, rp.sigma, rp.alpha_bar, rp.rate_n, *c))
    path = out / f"rate_{cfg.seed}.csv"
    _write_csv(path, _header(cfg, model, workers), RATE_COLUMNS, rows, force)
    sys.stdout.write(path.read_text())
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, model, workers, out: Path, force: bool) -> int:
    sec = cfg.sections.get("simulate", DEFAULTS["simulate"])
    alpha = sec.get("tilt_alpha")
    log_lam = model.env_law.log_moment(alpha)[0] if alpha else 0.0
    batch = simulate_batch(model, sec["n"], sec["paths"], stream(cfg.seed, 0), alpha)
    rows = trajectory_rows(batch, log_lam, alpha or 0.0)
    extra = f"# tilt_alpha={alpha}\n"
    _write_csv(out / f"trajectories_{cfg.seed}.csv", _header(cfg, model, workers), TRAJECTORY_COLUMNS, rows,
               force, extra)
    return EXIT_OK


def cmd_estimate(cfg: RunConfig, model, workers, out: Path, force: bool) -> int:
    sec = cfg.sections["estimate"]
    target, N = sec["target"], sec["N"]
    rows = []
    if target in ("Z", "Pi", "W"):
        rho = sec["rho"] if "rho" in sec else model.env_law.log_moment(sec["alpha"])[1]
        for n in sec["n_grid"]:
            e = estimate_ld_prob(model, target, rho, n, N, method=sec["method"], seed=cfg.seed, workers=workers)
            rows.append((target, rho, n, None, e.method, e.value, e.stderr, e.ess, e.hits, e.n_samples,
                         e.truncated_mass, cfg.seed))
    else:
        kind = target.split("_")[1]
        alpha0 = solve_cramer(model).alpha0
        tilt_alpha = None if sec["method"] == "naive" else alpha0
        for lt in sec["log_t_grid"]:
            t = math.exp(lt)
            e = estimate_passage_prob(model, t, kind, N, seed=cfg.seed, workers=workers, tilt_alpha=tilt_alpha)
            rows.append((target, alpha0, None, t, e.method, e.value, e.stderr, e.ess, e.hits, e.n_samples,
                         e.truncated_mass, cfg.seed))
    _write_csv(out / f"estimate_{target}_{cfg.seed}.csv", _header(cfg, model, workers), ESTIMATE_COLUMNS, rows,
               force)
    return EXIT_OK


def cmd_experiment(cfg: RunConfig, model, workers, out: Path, force: bool) -> int:
    sec = cfg.sections["experiment"]
    name = sec["name"]
    rep = run_experiment(name, model, sec.get("params"), cfg.tolerances.get(name), seed=cfg.seed, workers=workers)
    tols = rep.config_echo["tolerances"]
    from .verify import check_report

    flags = check_report(rep).row_passed
    rows = [
        (r.key, r.point, float(r.measured), float(r.predicted), float(r.stderr), float(r.ratio), r.rule,
         None if r.rule == "info" else tols[r.key], ok)
        for r, ok in zip(rep.rows, flags)
    ]
    echo = json.dumps({"params": rep.config_echo["params"], "tolerances": tols}, sort_keys=True)
    _write_csv(out / f"report_{name}_{cfg.seed}.csv", _header(cfg, model, workers), REPORT_COLUMNS, rows, force,
               f"# config={echo}\n")
    verdict = out / f"verdict_{name}_{cfg.seed}.txt"
    if verdict.exists() and not force:
        raise FileExistsError(f"{verdict} exists; pass --force to overwrite")
    verdict.write_text(f"{name},{'pass' if rep.verdict else 'fail'},{rep.worst_ratio!r}\n")
    sys.stdout.write(verdict.read_text())
    return EXIT_OK if rep.verdict else EXIT_VERDICT


_DISPATCH = {"rate": cmd_rate, "simulate": cmd_simulate, "estimate": cmd_estimate, "experiment": cmd_experiment}


def dispatch(command: str, cfg: RunConfig, force: bool = False) -> int:
    """Run ``command`` and map failures onto exit codes."""
    if command in ("estimate", "experiment") and command not in cfg.sections:
        print(f"error: config has no '{command}' section", file=sys.stderr)
        return EXIT_IO
    try:
        model = cfg.build_model()
        workers = resolve_workers(cfg.workers)
        return _DISPATCH[command](cfg, model, workers, Path(cfg.output_dir), force)
    except (RegimeError, DomainError, NoRootError, SubcriticalityError) as exc:
        print(f"regime error: {exc}", file=sys.stderr)
        return EXIT_REGIME
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bpre", description="Branching processes in random environment.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--workers", type=int, help="override the config worker count")
        p.add_argument("--out", help="output directory (created if missing)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            print("config error: seed must be an unsigned 64-bit integer", file=sys.stderr)
            return EXIT_IO
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = max(1, args.workers)
    if args.out is not None:
        cfg.output_dir = args.out
    return dispatch(args.command, cfg, args.force)


if __name__ == "__main__":
    sys.exit(main())
