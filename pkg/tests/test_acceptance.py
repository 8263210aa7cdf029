"""Acceptance criteria 1-10, one test each, with the stated tolerances and time limits."""
import itertools
import math
import time

import numpy as np
import sympy as sp
from scipy.optimize import brentq

from canardkit import planar as P
from canardkit.canard import build_section_chart, epsilon_continuation, locate_periodic_canard, prepare_geometry
from canardkit.canard import perturbation_robustness
from canardkit.chaos import (
    AffineHorseshoe, build_multi_chart, entropy_lower_bound, parse_symbols, realize_itinerary,
    realize_slowfast_itineraries, verify_slowfast_coverings,
)
from canardkit.degree import degree_selftest
from canardkit.slowgeom import certify_nondegeneracy, find_critical_points
from canardkit.sysdef import builtin_system


def test_01_critical_point(criterion):
    t0 = time.time()
    s = builtin_system("paper3d", {"a": 3, "eps": 0.1})
    cps = find_critical_points(s)
    cp = cps[0]
    v = certify_nondegeneracy(s, cp).values
    # symbolic oracle at the origin, where the adapted frame is the identity
    x1, x2, y = sp.symbols("x1 x2 y")
    X1, X2 = -3 * x2 + y / 3, x1 + 1
    Yf = x1 + y**2 + x2 * y
    at = {x1: 0, x2: 0, y: 0}
    oracle = {
        "nev1": float(sp.sqrt(X1**2 + X2**2).subs(at)),
        "nev2": float(sp.sqrt(sp.diff(Yf, x1) ** 2 + sp.diff(Yf, x2) ** 2).subs(at)),
        "nev3": float(sp.diff(Yf, y, 2).subs(at)),
        "olE": float((2 * sp.diff(X1, x2) * sp.diff(Yf, y, 2) - sp.diff(X1, y) * sp.diff(Yf, x1)).subs(at)),
        "ol1E": float(sp.diff(X1, y).subs(at)),
    }
    err = max(abs(v[k] - oracle[k]) for k in oracle)
    ok = (len(cps) == 1 and np.max(np.abs(cp.w)) < 1e-10 and cp.residual < 1e-10 and err < 1e-9
          and (oracle["nev1"], oracle["nev2"], oracle["nev3"]) == (1.0, 1.0, 2.0)
          and math.isclose(oracle["olE"], -37 / 3) and math.isclose(oracle["ol1E"], 1 / 3))
    assert criterion(1, ok, f"critical point {cp.w}, residual {cp.residual:.1e}, oracle error {err:.1e}",
                     time.time() - t0, 1.0)


def test_02_transversal_crossing(criterion):
    t0 = time.time()
    g = prepare_geometry(builtin_system("paper3d", {"a": 3, "eps": 0.1}))
    good = [r for r in g.records if abs(r.A) > 1e-3 and r.jump_certificate]
    ok = len(good) >= 1
    assert criterion(2, ok, f"{len(good)} transversal crossings with passing jump certificate "
                            f"(first |A| = {abs(good[0].A):.3f})" if good else "no crossing",
                     time.time() - t0, 10.0)


def test_03_periodic_canard(criterion):
    t0 = time.time()
    s = builtin_system("paper3d", {"a": 3, "eps": 0.1})
    g = prepare_geometry(s)
    chart = build_section_chart(s, g.records[0], (g.ga, g.gr))
    pc = locate_periodic_canard(s, chart)
    frac = pc.certificate["fraction_in_repulsive_tube"]
    ok = pc.winding.degree == chart.sgnA and pc.closure < 1e-6 and frac >= 0.10
    assert criterion(3, ok, f"winding {pc.winding.degree} = sgn(A) {chart.sgnA}, closure {pc.closure:.1e}, "
                            f"repelling-tube fraction {frac:.2f}", time.time() - t0, 60.0)


def test_04_epsilon_continuation(criterion):
    t0 = time.time()
    s = builtin_system("paper3d", {"a": 3, "eps": 0.1})
    g = prepare_geometry(s)
    chart = build_section_chart(s, g.records[0], (g.ga, g.gr))
    rows = epsilon_continuation(s, chart, [0.1, 0.05, 0.025, 0.0125])
    h = [r.hausdorff for r in rows]
    complete = len(rows) == 4 and all(r.status == "ok" for r in rows)
    gap = chart.sigma - chart.tau
    t_last = rows[-1].canard.T_min if complete else math.nan
    ok = complete and all(b < a for a, b in zip(h, h[1:])) and abs(t_last - gap) < 0.1 * gap
    assert criterion(4, ok, f"Hausdorff {[round(v, 4) for v in h]}, T_min {t_last:.4f} vs sigma - tau {gap:.4f}",
                     time.time() - t0, 300.0)


def test_05_perturbation_robustness(criterion):
    t0 = time.time()
    s = builtin_system("paper3d", {"a": 3, "eps": 0.1})
    g = prepare_geometry(s)
    chart = build_section_chart(s, g.records[0], (g.ga, g.gr))
    out = perturbation_robustness(s, chart, {"kind": "both"}, [1e-3], 1e-8)
    row = out["rows"][0]
    # X-hat oscillates on the scale delta^2 and is not resolved by the integrator, so the
    # perturbed return map is only known to a noise floor well below delta: the canard
    # counts as re-located when shooting lands inside the certified parallelogram (checked by
    # locate_periodic_canard) and closes to within delta; the shift from the unperturbed
    # orbit is reported, not judged
    ok = row["persists"] and row["winding"] == chart.sgnA and row["closure"] < 1e-3
    assert criterion(5, ok, f"delta 1e-3: winding {row.get('winding')}, closure {row.get('closure', math.nan):.1e}, "
                            f"Hausdorff shift {row.get('displacement', math.nan):.1e}", time.time() - t0, 120.0)


def test_06_degree_selftest(criterion):
    t0 = time.time()
    rows = degree_selftest()
    expected = [1, -1, 2, 0, 1, -1]
    got = [r["degree"] for r in rows]
    ok = got == expected and all(isinstance(d, int) for d in got)
    assert criterion(6, ok, f"degrees {got}", time.time() - t0, 1.0)


def test_07_affine_horseshoe(criterion):
    t0 = time.time()
    hs = AffineHorseshoe()
    cm = hs.covering_matrix()
    margins = [min(r.exit_margin, r.containment_margin) for row in cm.reports for r in row]
    its = [realize_itinerary(hs, hs.boxes, w) for w in itertools.product(range(2), repeat=6)]
    res = max(r.max_residual for r in its)
    p2 = realize_itinerary(hs, hs.boxes, parse_symbols("12"), periodic=True).point
    # x0 -> 3 (x0 + 1.5) -> -3 (3 (x0 + 1.5) - 1.5) = x0 gives x0 = -0.9
    p2_err = float(np.max(np.abs(p2 - [-0.9, 0.0])))
    ent = entropy_lower_bound(2, cm)
    ok = (cm.all_pass and min(margins) > 0 and len(its) == 64 and res < 1e-8 and p2_err < 1e-8
          and not ent.withheld and ent.value == math.log(2))
    assert criterion(7, ok, f"coverings pass (min margin {min(margins):.2f}), 64 itineraries residual {res:.1e}, "
                            f"period-2 error {p2_err:.1e}, entropy {ent.value:.4f}", time.time() - t0, 30.0)


def test_08_designed_chaos(criterion):
    t0 = time.time()
    s = builtin_system("paper3d_twist", {"a": 3, "b": -1, "eps": 0.01})
    g = prepare_geometry(s)
    picked = [g.records[0], g.records[3]]
    transversal = all(abs(r.A) > 1e-3 and r.jump_certificate for r in picked)
    charts = build_multi_chart(s, picked, branches=(g.ga, g.gr))
    cm = verify_slowfast_coverings(s, charts)
    ent = entropy_lower_bound(2, cm)
    its = realize_slowfast_itineraries(s, charts, 6) if cm.all_pass else None
    ok = (transversal and cm.all_pass and not ent.withheld and ent.value == math.log(2) and bool(ent.evidence)
          and its is not None and len(its.results) == 64 and its.max_residual < 1e-8)
    detail = (f"{len(g.records)} crossings, charts at sigma {[round(c.sigma, 3) for c in charts]}, "
              f"4 coverings {'pass' if cm.all_pass else 'FAIL'}, entropy "
              f"{'withheld' if ent.withheld else f'{ent.value:.4f}'} ({ent.evidence})")
    if its is not None:
        detail += f", 64 itineraries residual {its.max_residual:.1e}"
    assert criterion(8, ok, detail, time.time() - t0, 600.0)


def test_09_planar_magnitude(criterion):
    t0 = time.time()
    eps = 0.01
    s = builtin_system("lienard", {"F": "y**2", "eps": eps})
    errs = []
    for alpha in (0.25, 0.5, 0.75):
        r = P.magnitude_continuation(s, alpha, a_bracket=(-0.2, 0.2), n_samples=5)
        errs.append(r.error if r.closure < 1e-7 and r.gates_sound else math.inf)
    # e_a = (F(a), 0) = (a^2, 0), J = [[0, 1], [-1/eps, 2a/eps]]
    gate_ok = True
    for a in (-0.2, 0.2, 0.3):
        gt = P.equilibrium_gate(s, a)
        gate_ok &= (np.array_equal(gt.equilibrium, [a * a, 0.0]) and gt.det == 1 / eps
                    and math.isclose(gt.trace, 2 * a / eps, rel_tol=1e-15))
    ok = max(errs) < 1e-2 and gate_ok
    assert criterion(9, ok, f"magnitude errors {[f'{e:.1e}' for e in errs]}, gate algebra exact: {gate_ok}",
                     time.time() - t0, 300.0)


def test_10_delayed_loss(criterion):
    t0 = time.time()
    xi = P.xi0_solve(1, 1, 0.5).value
    oracle = brentq(lambda x: x * math.exp(-x) - 0.5 * math.exp(-0.5), 1.0, 10.0, xtol=1e-14)
    r = P.simulate_delayed_loss(builtin_system("predator_prey", {"eps": 1e-3}), 0.5, 0.3, y_axis=1e-4)
    ok = (abs(xi - 1.756) < 1e-3 and abs(xi - oracle) < 1e-10 and r.rel_error < 0.05
          and r.axis_samples > 0 and r.invariant_drift < 1e-3)
    assert criterion(10, ok, f"xi0 {xi:.6f} (oracle {oracle:.6f}), jump {r.x_jump:.5f} ({100 * r.rel_error:.2f}%), "
                             f"axis drift {r.invariant_drift:.1e}", time.time() - t0, 120.0)
