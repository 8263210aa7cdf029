"""Config-driven experiment runner.

Usage::

    python -m canardkit find-canard --config configs/find_canard.yaml --seed 0 --out runs/fc

Every run writes ``manifest.json`` (inputs, versions, wall time),
``report.json`` and one CSV per curve into the output directory.  Exit
status is 0 on success, 2 when the method correctly reports that no
certificate exists (winding zero, failed covering, ...), 1 on errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys as _sys
import time
from importlib import metadata, resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

SUBCOMMANDS = ("critical-points", "trace-branches", "intersections", "find-canard", "continuation",
               "chaos-verify", "magnitude", "predator-prey", "degree-selftest", "perturb")
THREADS_ENV = "CANARDKIT_THREADS"
EXIT_OK, EXIT_ERROR, EXIT_NO_CERTIFICATE = 0, 1, 2


class ConfigError(ValueError):
    pass


class NoCertificate(RuntimeError):
    """Raised inside a handler when the method reports a negative verdict."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def load_schema() -> dict:
    return json.loads(resources.files("canardkit").joinpath("config_schema.json").read_text())


def validate_config(cfg) -> dict:
    """Schema check; the first error is reported with its JSON path."""
    if cfg is None:
        cfg = {}
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/" + "/".join(str(p) for p in e.absolute_path)
        raise ConfigError(f"invalid config at {where}: {e.message}")
    return cfg


def load_config(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    try:
        cfg = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return validate_config(cfg), raw


def build_system(cfg: dict):
    from .sysdef import BoundingBox, builtin_system

    if "system" not in cfg:
        raise ConfigError("invalid config at /: 'system' is required for this subcommand")
    params = dict(cfg["system"].get("params", {}))
    if "epsilon" in cfg:
        params["eps"] = cfg["epsilon"]
    s = builtin_system(cfg["system"]["name"], params)
    if "box" in cfg:
        import dataclasses

        s = dataclasses.replace(s, box=BoundingBox.from_intervals(cfg["box"]))
    return s


def _slowfast(cfg):
    from .sysdef import SlowFastSystem

    s = build_system(cfg)
    if not isinstance(s, SlowFastSystem):
        raise ConfigError(f"system {cfg['system']['name']!r} is planar; this subcommand needs a slow-fast system")
    return s


def _planar(cfg):
    from .sysdef import PlanarParamSystem

    s = build_system(cfg)
    if not isinstance(s, PlanarParamSystem):
        raise ConfigError(f"system {cfg['system']['name']!r} is not a planar family")
    return s


# ---------------------------------------------------------------------------
# report helpers
# ---------------------------------------------------------------------------

def jsonable(obj):
    """Plain JSON types; non-finite floats become the strings 'inf', '-inf', 'nan'."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else ("nan" if math.isnan(v) else ("inf" if v > 0 else "-inf"))
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def curve(columns, data) -> dict:
    data = np.asarray(data, float)
    if data.ndim != 2 or data.shape[1] != len(columns):
        raise ValueError(f"curve data shape {data.shape} does not match columns {columns}")
    return {"columns": list(columns), "data": data}


def emit_plotdata(report: dict, outdir) -> list[str]:
    """One CSV per entry of ``report['curves']``; returns the file names written."""
    curves = report.get("curves") or {}
    if not curves:
        return []
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(curves):
        c = curves[name]
        fname = f"{name}.csv"
        with open(out / fname, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(c["columns"])
            for row in np.asarray(c["data"], float):
                w.writerow([f"{v:.17g}" for v in row])
        written.append(fname)
    return written


def _versions() -> dict:
    import scipy
    import sympy

    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"canardkit": pkg, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "sympy": sympy.__version__, "pyyaml": yaml.__version__,
            "jsonschema": metadata.version("jsonschema")}


def _limiting_curves(chart) -> dict:
    """The singular limit as three pieces: Γ_a up to τ, Γ_r up to σ and the jump at x*."""
    from .canard import limiting_curve

    L = limiting_curve(chart)
    na = int(np.sum(chart.ga.t >= chart.tau))
    nr = int(np.sum(chart.gr.t <= chart.sigma))
    cols = ["x1", "x2", "y"]
    return {"limiting_gamma_a": curve(cols, L[:na]),
            "limiting_gamma_r": curve(cols, L[na:na + nr]),
            "limiting_vertical": curve(cols, L[na + nr:])}


def _orbit_curve(pc) -> dict:
    cols = ["t"] + [f"s{i}" for i in range(pc.states.shape[1])]
    return curve(cols, np.column_stack([pc.t, pc.states]))


def _branch_curve(br) -> dict:
    P = br.polyline()
    cols = ["t", "p", "q", "h", "x1", "x2", "y"][:P.shape[1]]
    return curve(cols, P)


def _record(cfg, block, geom) -> int:
    k = int(cfg.get(block, {}).get("record", 1))
    if k > len(geom.records):
        raise NoCertificate(f"record {k} requested but only {len(geom.records)} transversal crossings found")
    return k - 1


def _geometry(cfg, s):
    from .canard import prepare_geometry

    br = cfg.get("branches", {})
    return prepare_geometry(s, arclength=br.get("arclength", 12.0), p_seed=br.get("p_seed", 1e-6))


# ---------------------------------------------------------------------------
# subcommands: each returns a report dict with a boolean "passed"
# ---------------------------------------------------------------------------

def cmd_critical_points(cfg, rng):
    from .slowgeom import certify_nondegeneracy, find_critical_points

    s = _slowfast(cfg)
    cps = find_critical_points(s, s.box)
    rows = []
    for cp in cps:
        rep = certify_nondegeneracy(s, cp)
        rows.append({"w": cp.w, "residual": cp.residual, "certification": rep.as_dict(), "passed": rep.passed})
    return {"critical_points": rows, "passed": bool(rows) and all(r["passed"] for r in rows)}


def cmd_trace_branches(cfg, rng, g=None):
    g = g or _geometry(cfg, _slowfast(cfg))
    return {"certification": g.certification,
            "branches": {b.kind: {"arclength": b.arclength, "stop_reason": b.stop_reason,
                                  "certificate": b.certificate, "n_points": len(b.t)} for b in (g.ga, g.gr)},
            "curves": {"gamma_a": _branch_curve(g.ga), "gamma_r": _branch_curve(g.gr)},
            "passed": True}


def cmd_intersections(cfg, rng):
    g = _geometry(cfg, _slowfast(cfg))
    rep = cmd_trace_branches(cfg, rng, g)
    recs = [r.as_dict() for r in g.records]
    rep["records"] = recs
    rep["passed"] = bool(recs) and all(r["jump_certificate"] is not False for r in recs)
    return rep


def cmd_find_canard(cfg, rng):
    from .canard import build_section_chart, locate_periodic_canard

    s = _slowfast(cfg)
    g = _geometry(cfg, s)
    k = _record(cfg, "find_canard", g)
    chart = build_section_chart(s, g.records[k], (g.ga, g.gr), cfg.get("alpha"))
    opts = cfg.get("find_canard", {})
    pc = locate_periodic_canard(s, chart, cfg.get("tolerances", {}).get("refine", 1e-10),
                                check_winding=opts.get("check_winding", True),
                                use_quadrisection=opts.get("quadrisection", False))
    d = pc.as_dict()
    winding = pc.winding.degree if pc.winding is not None else None
    return {"record": g.records[k].as_dict(), "chart": chart.as_dict(), "sgnA": chart.sgnA, "canard": d,
            "winding": winding, "sigma_minus_tau": chart.sigma - chart.tau,
            "curves": {"orbit": _orbit_curve(pc), **_limiting_curves(chart)},
            "passed": (winding is None or winding == chart.sgnA) and pc.closure < 1e-6}


def cmd_continuation(cfg, rng):
    from .canard import build_section_chart, epsilon_continuation

    if "continuation" not in cfg:
        raise ConfigError("invalid config at /: 'continuation' block is required")
    s = _slowfast(cfg)
    g = _geometry(cfg, s)
    k = _record(cfg, "continuation", g)
    chart = build_section_chart(s, g.records[k], (g.ga, g.gr), cfg.get("alpha"))
    rows = epsilon_continuation(s, chart, cfg["continuation"]["eps_list"],
                                cfg.get("tolerances", {}).get("refine", 1e-10))
    out, curves = [], dict(_limiting_curves(chart))
    for i, r in enumerate(rows):
        row = {"epsilon": r.epsilon, "status": r.status, "hausdorff": r.hausdorff}
        if r.canard is not None:
            row.update(T_min=r.canard.T_min, closure=r.canard.closure,
                       winding=None if r.canard.winding is None else r.canard.winding.degree)
            curves[f"orbit_{i:02d}_eps_{r.epsilon:g}"] = _orbit_curve(r.canard)
        out.append(row)
    h = [r["hausdorff"] for r in out if r["hausdorff"] is not None]
    decreasing = all(b < a for a, b in zip(h, h[1:]))
    complete = all(r["status"] == "ok" for r in out) and len(out) == len(cfg["continuation"]["eps_list"])
    return {"rows": out, "hausdorff_decreasing": decreasing, "sigma_minus_tau": chart.sigma - chart.tau,
            "curves": curves, "passed": complete and decreasing}


def cmd_chaos_verify(cfg, rng):
    from .chaos import entropy_lower_bound, parse_symbols

    opts = cfg.get("chaos", {})
    L = int(opts.get("itinerary_length", 6))
    if opts.get("model", "affine") == "affine":
        import itertools

        from .chaos import AffineHorseshoe, realize_itinerary

        hs = AffineHorseshoe()
        cm = hs.covering_matrix(opts.get("grid_n", 16))
        its = [realize_itinerary(hs, hs.boxes, w) for w in itertools.product(range(hs.K), repeat=L)] if L else []
        periodic = []
        for word in opts.get("periodic", []):
            omega = parse_symbols(word)
            res = realize_itinerary(hs, hs.boxes, omega, periodic=True)
            exact = hs.periodic_point(omega)
            periodic.append({"word": word, "point": res.point, "closed_form": exact,
                             "error": float(np.max(np.abs(res.point - exact)))})
        max_res = max((r.max_residual for r in its), default=0.0)
        ent = entropy_lower_bound(hs.K, cm)
        return {"model": "affine", "covering": cm.as_dict(), "entropy": ent.as_dict(),
                "itineraries": {"length": L, "count": len(its), "max_residual": max_res},
                "periodic": periodic,
                "passed": cm.all_pass and not ent.withheld and max_res < 1e-8
                and all(p["error"] < 1e-8 for p in periodic)}
    from .canard import prepare_geometry
    from .chaos import build_multi_chart, realize_slowfast_itineraries, verify_slowfast_coverings

    s = _slowfast(cfg)
    g = prepare_geometry(s)
    idx = [k - 1 for k in opts.get("records", [1, 2])]
    if max(idx) >= len(g.records):
        raise NoCertificate(f"records {opts.get('records')} requested but {len(g.records)} crossings found")
    charts = build_multi_chart(s, [g.records[k] for k in idx], cfg.get("alpha"), branches=(g.ga, g.gr))
    cm = verify_slowfast_coverings(s, charts, opts.get("grid_n", 16), opts.get("interior_n", 8),
                                   opts.get("v_levels", 3), cfg.get("tolerances", {}).get("refine", 1e-10))
    ent = entropy_lower_bound(len(charts), cm)
    its = None
    if L and cm.all_pass:
        its = realize_slowfast_itineraries(s, charts, L)
    curves = {f"chart_{k + 1}": curve(["p", "q"], ch.polygon()) for k, ch in enumerate(charts)}
    curves.update(gamma_a=_branch_curve(g.ga), gamma_r=_branch_curve(g.gr))
    return {"model": "slowfast", "records": [g.records[k].as_dict() for k in idx],
            "covering": cm.as_dict(), "entropy": ent.as_dict(),
            "itineraries": None if its is None else {"length": L, "count": len(its.results), **its.as_dict()},
            "curves": curves,
            "passed": cm.all_pass and not ent.withheld and (L == 0 or its.max_residual < 1e-8)}


def cmd_magnitude(cfg, rng):
    from .planar import BracketError, GateError, equilibrium_gate, magnitude_continuation

    s = _planar(cfg)
    opts = cfg.get("magnitude", {})
    targets = [float(t) for t in opts.get("targets", [])] + [tuple(p) for p in opts.get("points", [])]
    if not targets:
        raise ConfigError("invalid config at /magnitude: give 'targets' or 'points'")
    rows, curves, ok = [], {}, True
    for i, tgt in enumerate(targets):
        try:
            res = magnitude_continuation(s, tgt, opts.get("mode", "early"), opts.get("bracket"),
                                         n_samples=opts.get("n_samples", 9))
        except (BracketError, GateError) as exc:
            rows.append({"target": tgt, "status": "no-certificate", "reason": exc.reason, "error": str(exc)})
            ok = False
            continue
        d = res.as_dict()
        d["status"] = "ok"
        d["equilibrium_gate"] = equilibrium_gate(s, res.a_eps).as_dict()
        rows.append(d)
        name = f"cycle_{i:02d}_{tgt:g}" if isinstance(tgt, float) else f"cycle_{i:02d}_{tgt[0]:g}_{tgt[1]:g}"
        curves[name] = curve(["t", "x", "y"], np.column_stack([res.t, res.states]))
        ok = ok and res.gates_sound and res.closure < 1e-7
    return {"epsilon": s.epsilon, "results": rows, "curves": curves, "passed": ok}


def cmd_predator_prey(cfg, rng):
    from .planar import equilibrium_gate, geometry_of, simulate_delayed_loss

    s = _planar(cfg)
    if s.meta.get("family") != "predator_prey":
        raise ConfigError("invalid config at /system/name: predator-prey needs the predator_prey system")
    geo = geometry_of(s)
    opts = cfg.get("predator_prey", {})
    res = simulate_delayed_loss(s, opts.get("x0", 0.5), opts.get("y0", 0.3), y_axis=opts.get("y_axis", 1e-4),
                                t_max=opts.get("t_max", 20.0))
    gate = equilibrium_gate(s, geo.a_star)
    return {"geometry": geo.as_dict(), "delayed_loss": res.as_dict(), "gate_at_a_star": gate.as_dict(),
            "curves": {"trajectory": curve(["t", "x", "y"], np.column_stack([res.t, res.states]))},
            "passed": res.rel_error < 0.05}


def cmd_degree_selftest(cfg, rng):
    from .degree import degree_selftest

    rows = degree_selftest()
    return {"cases": rows, "passed": all(r["passed"] for r in rows)}


def cmd_perturb(cfg, rng):
    from .canard import build_section_chart, perturbation_robustness

    s = _slowfast(cfg)
    g = _geometry(cfg, s)
    opts = cfg.get("perturb", {})
    k = _record(cfg, "perturb", g)
    chart = build_section_chart(s, g.records[k], (g.ga, g.gr), cfg.get("alpha"))
    out = perturbation_robustness(s, chart, {"kind": opts.get("kind", "both")}, opts.get("deltas", [1e-3]),
                                  cfg.get("tolerances", {}).get("refine", 1e-8))
    out["sgnA"] = chart.sgnA
    out["passed"] = bool(out["rows"]) and all(r["persists"] and r["winding"] == chart.sgnA for r in out["rows"])
    return out


HANDLERS = {
    "critical-points": cmd_critical_points,
    "trace-branches": cmd_trace_branches,
    "intersections": cmd_intersections,
    "find-canard": cmd_find_canard,
    "continuation": cmd_continuation,
    "chaos-verify": cmd_chaos_verify,
    "magnitude": cmd_magnitude,
    "predator-prey": cmd_predator_prey,
    "degree-selftest": cmd_degree_selftest,
    "perturb": cmd_perturb,
}


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def _certified_failure(exc) -> bool:
    """Domain errors that mean 'no certificate' rather than a crash."""
    from .canard import CanardError
    from .chaos import ItineraryError

    return isinstance(exc, (NoCertificate, CanardError, ItineraryError))


def run(subcommand: str, config_path=None, seed: int | None = None, outdir=None) -> int:
    """Run one subcommand; returns the process exit status."""
    t0 = time.time()
    if subcommand not in HANDLERS:
        print(f"error: unknown subcommand {subcommand!r}", file=_sys.stderr)
        return EXIT_ERROR
    try:
        if config_path is None:
            if subcommand != "degree-selftest":
                raise ConfigError(f"{subcommand} needs --config")
            cfg, raw = {}, b""
        else:
            cfg, raw = load_config(config_path)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_ERROR
    seed = int(seed if seed is not None else cfg.get("seed", 0))
    rng = np.random.default_rng(seed)
    out = Path(outdir or cfg.get("output") or f"runs/{subcommand}")
    status, err = EXIT_OK, None
    try:
        report = HANDLERS[subcommand](cfg, rng)
        if not report.get("passed", True):
            status = EXIT_NO_CERTIFICATE
    except Exception as exc:  # noqa: BLE001 - every failure is reported in the manifest
        report = {"passed": False, "error": f"{type(exc).__name__}: {exc}"}
        status = EXIT_NO_CERTIFICATE if _certified_failure(exc) else EXIT_ERROR
        err = report["error"]
        if isinstance(exc, ConfigError):
            status = EXIT_ERROR
    out.mkdir(parents=True, exist_ok=True)
    files = emit_plotdata(report, out)
    report = dict(report)
    report.pop("curves", None)
    report.update(subcommand=subcommand, curve_files=files, exit_status=status)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(jsonable(report), fh, indent=1, sort_keys=True)
    manifest = {
        "subcommand": subcommand,
        "config_path": None if config_path is None else str(config_path),
        "config_sha256": hashlib.sha256(raw).hexdigest(),
        "config": jsonable(cfg),
        "seed": seed,
        "threads": os.environ.get(THREADS_ENV),
        "versions": _versions(),
        "wall_time_s": time.time() - t0,
        "exit_status": status,
        "files": ["report.json", *files],
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    if err:
        print(f"error: {err}", file=_sys.stderr)
    verdict = {EXIT_OK: "pass", EXIT_NO_CERTIFICATE: "no certificate", EXIT_ERROR: "error"}[status]
    print(f"{subcommand}: {verdict} ({time.time() - t0:.1f} s) -> {out}")
    return status


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="canardkit", description=__doc__.split("\n")[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="YAML experiment file (see src/canardkit/config_schema.json)")
    ap.add_argument("--seed", type=int, default=None, help="random seed (default: config 'seed' or 0)")
    ap.add_argument("--out", help="output directory (default: config 'output' or runs/<subcommand>)")
    args = ap.parse_args(argv)
    return run(args.subcommand, args.config, args.seed, args.out)


if __name__ == "__main__":
    raise SystemExit(main())
