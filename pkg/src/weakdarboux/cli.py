"""Batch front end.

Every command reads a case (catalog name or inline expressions), writes
``report.json`` and field CSVs to ``--out`` and exits with

    0  success
    2  hypothesis violation (SPD, margin, not flat, not an immersion)
    3  numerical failure (chart, Newton, sweep, grid)
    4  configuration error

Reports are deterministic apart from their ``timestamp`` field.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

import numpy as np

from . import io
from .corpus import CaseSpec, get_case, list_cases
from .errors import ConfigError, DarbouxError, EvaluationDomainError, HypothesisViolation, NumericalFailure
from .fields import Bump, SweepPlan
from .flatten import (CURVATURE_TOL, ImmersionField, classical_curvature_pairing, darboux_from_immersion,
                      darboux_scale, default_battery, distributional_curvature, flatten_metric, image_sweep_plan,
                      immersion_from_darboux, procrustes, verify_immersion)
from .beltrami import CHART_TOL, build_chart
from .geometry import gaussian_curvature_classical, perturbed_metric
from .weakprod import PairingConfig, classical_darboux_residual, weak_darboux_residual

COMMANDS = ("curvature", "darboux-check", "conformal", "flatten", "immerse", "extract", "verify", "corpus")
MIN_RESOLUTION = 64
DEFAULTS = {"resolution": 128, "out": "out", "seed": 0, "target": "g"}
DEFAULT_TOL = {"darboux-check": 1e-3, "flatten": CURVATURE_TOL, "immerse": 5e-3, "verify": 5e-3,
               "extract": 5e-3, "conformal": CHART_TOL, "curvature": None, "corpus": 1e-10}


class CliExit(Exception):
    def __init__(self, code, error=None):
        super().__init__(code)
        self.code = code
        self.error = error


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="weakdarboux", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", metavar="command")
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--case", help="catalog case name, or use --config for an inline case")
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--resolution", type=int, help="nodes per axis (>= 64)")
        s.add_argument("--sweep", help='comma separated mollification radii, e.g. "0.06,0.04,0.03,0.02"')
        s.add_argument("--out", help="output directory")
        s.add_argument("--tolerance", type=float)
        s.add_argument("--seed", type=int)
    return p


# ---------------------------------------------------------------------------
# configuration


def _parse_sweep(text):
    try:
        eps = [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse sweep {text!r}") from exc
    return eps


def resolve_config(args) -> dict:
    """Merge defaults, the config file and command line flags (flags win)."""
    cfg = dict(DEFAULTS)
    if args.config:
        loaded = io.read_json(args.config)
        if not isinstance(loaded, dict):
            raise ConfigError("config must be a JSON object")
        sv = loaded.get("schema_version", 1)
        if sv != io.SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {sv}")
        cfg.update({k: v for k, v in loaded.items() if k != "schema_version"})
    for key in ("case", "resolution", "out", "tolerance", "seed"):
        v = getattr(args, key)
        if v is not None:
            cfg[key] = v
    if args.sweep is not None:
        cfg["sweep"] = _parse_sweep(args.sweep)
    if cfg.get("tolerance") is None:
        cfg["tolerance"] = DEFAULT_TOL[args.command]
    cfg["command"] = args.command
    if args.command != "corpus" and cfg.get("case") is None:
        raise ConfigError("no case given (use --case or a config with a case entry)")
    n = cfg["resolution"]
    if not isinstance(n, int) or n < MIN_RESOLUTION:
        raise ConfigError(f"resolution must be an integer >= {MIN_RESOLUTION}, got {n!r}")
    if cfg.get("target") not in ("g", "h"):
        raise ConfigError("target must be 'g' (the metric) or 'h' (g - du^2)")
    for key in ("immersion", "metric_dir"):
        if cfg.get(key) is not None and not Path(cfg[key]).exists():
            raise ConfigError(f"{key} file {cfg[key]!r} does not exist", location=[cfg[key]])
    return cfg


def case_from_config(cfg) -> CaseSpec:
    c = cfg["case"]
    if isinstance(c, str):
        return get_case(c)
    if not isinstance(c, dict) or "metric" not in c or "domain" not in c:
        raise ConfigError("inline case needs 'metric' {E, F, G} and 'domain' [xmin, xmax, ymin, ymax]")
    m = c["metric"]
    try:
        metric = tuple(str(m[k]) for k in ("E", "F", "G"))
        domain = tuple(float(v) for v in c["domain"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed inline case: {exc}") from exc
    if len(domain) != 4 or domain[1] <= domain[0] or domain[3] <= domain[2]:
        raise ConfigError("domain must be [xmin, xmax, ymin, ymax] with positive extent")
    e = c.get("direction")
    return CaseSpec(c.get("name", "inline"), domain, metric, u=c.get("u"),
                    direction=None if e is None else tuple(float(v) for v in e),
                    margin=float(c.get("margin", 0.05)), darboux_solution=bool(c.get("darboux_solution", False)))


def _battery(cfg, grid):
    if cfg.get("battery"):
        try:
            return [Bump(tuple(float(v) for v in b["center"]), float(b["radius"])) for b in cfg["battery"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed bump battery entry: {exc}") from exc
    return default_battery(grid)


def _plan(cfg, grid, image=False, chart=None):
    if cfg.get("sweep"):
        try:
            return SweepPlan(tuple(cfg["sweep"]))
        except DarbouxError as exc:
            raise ConfigError(f"invalid sweep: {exc.message}") from exc
    return image_sweep_plan(chart) if image else SweepPlan.geometric(grid)


def _metric(case, cfg, grid):
    g = case.metric_field(grid)
    if cfg.get("metric_dir"):
        g = io.read_metric(cfg["metric_dir"])
    if cfg["target"] == "h":
        return perturbed_metric(g, case.u_field(g.grid))
    return g


def _bump_dict(b):
    return {"center": [float(v) for v in b.center], "radius": float(b.radius)}


# ---------------------------------------------------------------------------
# commands


def cmd_corpus(cfg, out):
    names = [cfg["case"]] if cfg.get("case") else list_cases()
    rows = []
    for n in names:
        case = get_case(n) if isinstance(n, str) else case_from_config(cfg)
        rows.append({"case": case.to_dict(), "self_check": case.self_check(tol=cfg["tolerance"])})
    return {"cases": rows}


def cmd_curvature(cfg, out):
    case = case_from_config(cfg)
    grid = case.grid(cfg["resolution"])
    h = _metric(case, cfg, grid)
    K = gaussian_curvature_classical(h)
    io.write_field_csv(out / "K.csv", K)
    chart = build_chart(h)
    plan = _plan(cfg, grid, image=True, chart=chart)
    rows = []
    for b in _battery(cfg, h.grid):
        dv = distributional_curvature(b, chart, PairingConfig(plan))
        cl = classical_curvature_pairing(b, h, K)
        rows.append({**_bump_dict(b), "distributional": dv.to_dict(), "classical": cl,
                     "ratio": dv.limit / cl if abs(cl) > 1e-12 else None})
    ratios = [r["ratio"] for r in rows if r["ratio"] is not None]
    return {"classical": {"max": float(K.values.max()), "min": float(K.values.min())}, "battery": rows,
            "ratio_mean": float(np.mean(ratios)) if ratios else None, "chart_quality": chart.quality}


def cmd_darboux_check(cfg, out):
    case = case_from_config(cfg)
    grid = case.grid(cfg["resolution"])
    g = case.metric_field(grid)
    u = case.u_field(grid)
    res = classical_darboux_residual(g, u)
    io.write_field_csv(out / "classical_residual.csv", res)
    inner = np.abs(res.values[2:-2, 2:-2])
    pc = PairingConfig(_plan(cfg, grid), margin=case.margin)
    rows = []
    for b in _battery(cfg, grid):
        wr = weak_darboux_residual(g, u, b.sample(grid), pc)
        scale = darboux_scale(wr, b, g)
        rows.append({**_bump_dict(b), "residual": wr.residual, "uncertainty": wr.uncertainty,
                     "relative": abs(wr.residual) / scale, "lhs": wr.lhs.to_dict(), "rhs": wr.rhs.to_dict()})
    ok = all(r["relative"] <= cfg["tolerance"] or abs(r["residual"]) <= 2 * r["uncertainty"] for r in rows)
    return {"classical_residual": {"max": float(inner.max()), "mean": float(inner.mean())},
            "residual": max(abs(r["residual"]) for r in rows), "weak": rows, "solution": bool(ok)}


def cmd_conformal(cfg, out):
    case = case_from_config(cfg)
    grid = case.grid(cfg["resolution"])
    h = _metric(case, cfg, grid)
    chart = build_chart(h, chart_tol=cfg["tolerance"])
    io.write_chart(out / "chart", chart)
    return {"quality": chart.quality, "image_grid": chart.image_grid.to_dict(), "chart_dir": "chart"}


def cmd_flatten(cfg, out):
    case = case_from_config(cfg)
    grid = case.grid(cfg["resolution"])
    h = _metric(case, cfg, grid)
    plan_cfg = PairingConfig(SweepPlan(tuple(cfg["sweep"]))) if cfg.get("sweep") else None
    imm = flatten_metric(h, battery=_battery(cfg, grid), cfg=plan_cfg, curvature_tol=cfg["tolerance"])
    io.write_immersion(out / "phi.csv", imm)
    d = imm.details
    alignment = None
    oracle = case.flat_map if cfg["target"] == "h" else (case.immersion[:2] if case.flat and case.immersion else None)
    if oracle is not None:
        ref = CaseSpec("oracle", case.domain, case.metric, flat_map=tuple(oracle)).flat_map_fields(grid)
        R, t, dev = procrustes(imm.points(), np.stack([c.values.ravel() for c in ref], axis=-1))
        alignment = {"rotation": R, "translation": t, "max_deviation": dev}
    return {"flat": True, "curvature_battery": [b["value"] for b in d["curvature_battery"]],
            "pullback_residual": {"max": imm.pullback_residual["max"], "mean": imm.pullback_residual["mean"]},
            "loop_defect": d["loop_defect"], "alignment": alignment, "harmonic_defect": d["harmonic_defect"],
            "chart_quality": d["chart_quality"]}


def cmd_immerse(cfg, out):
    case = case_from_config(cfg)
    grid = case.grid(cfg["resolution"])
    g = case.metric_field(grid)
    u = case.u_field(grid)
    r = immersion_from_darboux(g, u, margin=case.margin, battery=_battery(cfg, grid))
    io.write_immersion(out / "immersion.csv", r)
    rep = dict(r.pullback_residual)
    rep["pass"] = bool(rep["relative"] <= cfg["tolerance"])
    d = r.details
    return {"pullback_residual": rep, "flat_pullback_residual": d["flat_pullback_residual"],
            "weak_darboux": d["weak_darboux"], "loop_defect": d["loop_defect"], "immersion_file": "immersion.csv"}


def _immersion_input(cfg, case, grid):
    if cfg.get("immersion"):
        r = io.read_immersion(cfg["immersion"])
        if not r.grid.same_as(grid):
            raise ConfigError("immersion file grid does not match the case grid at this resolution",
                              location=[cfg["immersion"]])
        return r
    return ImmersionField(grid, case.immersion_fields(grid))


def cmd_extract(cfg, out):
    case = case_from_config(cfg)
    grid = case.grid(cfg["resolution"])
    g = case.metric_field(grid)
    r = _immersion_input(cfg, case, grid)
    e = cfg.get("direction") or case.direction
    if e is None:
        raise ConfigError("extract needs a direction e (config 'direction' or a case with one)")
    res = darboux_from_immersion(r, e, g, margin=case.margin, battery=_battery(cfg, grid),
                                 immersion_tol=cfg["tolerance"])
    io.write_field_csv(out / "u.csv", res.pop("u"))
    return res


def cmd_verify(cfg, out):
    case = case_from_config(cfg)
    grid = case.grid(cfg["resolution"])
    g = case.metric_field(grid)
    r = _immersion_input(cfg, case, grid)
    rep, field = verify_immersion(r, g, cfg["tolerance"])
    io.write_field_csv(out / "pullback_defect.csv", field)
    if not rep["pass"]:
        raise HypothesisViolation(f"pullback residual {rep['relative']:.3g} exceeds tolerance {cfg['tolerance']:.3g}",
                                  code="not-immersion")
    return {"pullback_residual": rep}


HANDLERS = {"curvature": cmd_curvature, "darboux-check": cmd_darboux_check, "conformal": cmd_conformal,
            "flatten": cmd_flatten, "immerse": cmd_immerse, "extract": cmd_extract, "verify": cmd_verify,
            "corpus": cmd_corpus}


def exit_code(exc) -> int:
    if isinstance(exc, (ConfigError, EvaluationDomainError)):
        return 4
    if isinstance(exc, HypothesisViolation):
        return 2
    if isinstance(exc, NumericalFailure):
        return 3
    return 3


def run(argv=None, timestamp=None):
    """Run one command; returns ``(exit_code, report_dict)``."""
    cfg = {}
    out = None
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise ConfigError("no command given; choose one of " + ", ".join(COMMANDS))
        cfg = resolve_config(args)
        out = Path(cfg["out"])
        body = HANDLERS[args.command](cfg, out)
        code = 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes a coded report
        if isinstance(exc, DarbouxError):
            err = exc.to_dict()
        else:
            traceback.print_exc(file=sys.stderr)
            err = {"code": "internal", "message": f"{type(exc).__name__}: {exc}", "location": None}
        code = exit_code(exc)
        body = {"error": err}
        if cfg.get("command") == "flatten" and err["code"] == "not-flat":
            body["flat"] = False
        print(io.dumps(err), file=sys.stderr, end="")
    body["exit_code"] = code
    if out is None:
        return code, body
    doc = io.write_report(out / "report.json", body, cfg, timestamp)
    return code, doc


def main(argv=None):
    code, _ = run(argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
