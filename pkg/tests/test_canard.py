import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from canard_oracles import paper3d_sheet_y
from canardkit.canard import (
    CanardError, ShiftOperator, build_section_chart, epsilon_continuation, eval_return_map, limiting_curve,
    locate_periodic_canard, output_uv, perturbation_robustness, prepare_geometry,
)
from canardkit.sysdef import builtin_system


# -- chart -----------------------------------------------------------------

def test_chart_origin(chart):
    np.testing.assert_allclose(chart.uv(chart.pq_star), 0.0, atol=1e-12)


@pytest.mark.parametrize("dt", [-0.05, 0.02, 0.05])
def test_attracting_branch_has_v_zero(chart, dt):
    uv = chart.uv(chart.ga.pq_at(chart.tau + dt))
    assert abs(uv[1]) < 1e-8
    assert uv[0] == pytest.approx(-dt, abs=1e-8)


def _flight_time(a, x0, target, sheet, t_max=0.5):
    """Reduced-flow time from x0 to the curve ``target`` (an (n, 2) polyline), by bisection."""
    def rhs(t, x):
        y = paper3d_sheet_y(x, sheet)
        return [-a * x[1] + y / 3, x[0] + 1]

    def side(x):
        d = np.linalg.norm(target - x, axis=1)
        k = int(np.clip(np.argmin(d), 1, len(target) - 2))
        tan = target[k + 1] - target[k - 1]
        return tan[0] * (x[1] - target[k, 1]) - tan[1] * (x[0] - target[k, 0])

    sign = 1.0 if side(np.asarray(x0)) != 0 else 0.0
    sol_f = solve_ivp(rhs, (0, t_max), x0, rtol=1e-12, atol=1e-14, dense_output=True)
    sol_b = solve_ivp(rhs, (0, -t_max), x0, rtol=1e-12, atol=1e-14, dense_output=True)
    g = lambda t: side(sol_f.sol(t) if t >= 0 else sol_b.sol(t))  # noqa: E731
    ts = np.linspace(-t_max, t_max, 201)
    vals = [g(t) for t in ts]
    k = min((i for i in range(200) if vals[i] * vals[i + 1] <= 0), key=lambda i: abs(ts[i]))
    return sign * brentq(g, ts[k], ts[k + 1], xtol=1e-14)


def test_chart_matches_time_of_flight(chart):
    """u = attracting-flow time to Γ_r, v = repelling-flow time to Γ_a."""
    fr = chart.frame
    tr = np.linspace(chart.sigma - 0.6, chart.sigma + 0.6, 24001)
    ta = np.linspace(chart.tau - 0.6, chart.tau + 0.6, 24001)
    Gr = np.array([chart.gr.w_at(t)[:2] for t in tr])
    Ga = np.array([chart.ga.w_at(t)[:2] for t in ta])
    a = chart.alpha / 2
    for uv in [(0.3 * a, 0.2 * a), (-0.5 * a, 0.4 * a), (0.7 * a, -0.6 * a), (-0.2 * a, -0.8 * a), (0.0, 0.5 * a)]:
        x0 = fr.x_from_pq(chart.inverse(uv))
        u = _flight_time(3.0, x0, Gr, "attractive")
        v = _flight_time(3.0, x0, Ga, "repulsive")
        assert u == pytest.approx(uv[0], abs=1e-6)
        assert v == pytest.approx(uv[1], abs=1e-6)


def test_alpha_too_large_is_rejected(paper3d, geometry):
    with pytest.raises(Exception):
        build_section_chart(paper3d, geometry.records[0], (geometry.ga, geometry.gr), alpha=5.0)


# -- return map ---------------------------------------------------------------

def test_boundary_sides(paper3d, chart):
    """The side towards the fold jumps (clamped to sigma + 2 alpha), the other falls (sigma - 2 alpha)."""
    a = chart.alpha / 2
    vm = chart.sgnA * 0.5 * a
    for u in (-0.5 * a, 0.0, 0.5 * a):
        pq = chart.inverse((u, a * chart.sgnA))
        assert chart.side_of(pq) == "R-"
        ev = eval_return_map(paper3d, chart, pq)
        assert ev.classification == "destabilizing"
        np.testing.assert_allclose(output_uv(chart, ev), [0.0, -2 * chart.alpha], atol=1e-12)
        pq = chart.inverse((u, -a * chart.sgnA))
        assert chart.side_of(pq) == "R+"
        ev = eval_return_map(paper3d, chart, pq)
        assert ev.classification == "stabilizing"
        np.testing.assert_allclose(output_uv(chart, ev), [0.0, 2 * chart.alpha], atol=1e-12)
    assert chart.side_of(chart.inverse((0.0, vm))) == "other"


def test_fixed_point_is_near_canard(paper3d, chart, canard01):
    ev = eval_return_map(paper3d, chart, canard01.fixed_point)
    assert ev.case == 4 and ev.classification == "near-canard"
    assert 0.0 < ev.blend < 1.0


# -- periodic canard ---------------------------------------------------------------

def test_periodic_canard(chart, canard01):
    assert canard01.winding.degree == chart.sgnA == 1
    assert canard01.closure < 1e-6
    assert canard01.certificate["fraction_in_repulsive_tube"] >= 0.1
    assert canard01.certificate["inside_parallelogram"]
    assert canard01.T_min < chart.sigma - chart.tau
    d = canard01.as_dict()
    assert d["winding"]["degree"] == 1 and d["epsilon"] == 0.1


def test_orbit_csv_roundtrip(canard01, tmp_path):
    p = tmp_path / "orbit.csv"
    canard01.orbit_csv(p)
    data = np.loadtxt(p, delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data[:, 1:], canard01.states)


def test_zero_winding_is_reported(paper3d, geometry):
    """A crossing without a certificate raises instead of returning an orbit."""
    ch = build_section_chart(paper3d, geometry.records[6], (geometry.ga, geometry.gr))
    with pytest.raises(CanardError, match="winding 0"):
        locate_periodic_canard(paper3d, ch)


def test_auxiliary_contracting_block():
    s = builtin_system("paper3d", {"a": 3, "eps": 0.1, "aux_decay": 1.0})
    g = prepare_geometry(s)
    ch = build_section_chart(s, g.records[0], (g.ga, g.gr))
    S = ShiftOperator(s, ch)
    assert S(np.array([0.5]))[0] == pytest.approx(0.5 * math.exp(-(ch.sigma - ch.tau)), rel=1e-9)
    pc = locate_periodic_canard(s, ch)
    assert pc.winding.degree == ch.sgnA
    assert any("product degree 1" in n for n in pc.notes)
    assert abs(pc.z_hat[0]) < 1e-6
    assert pc.closure < 1e-6


# -- continuation -------------------------------------------------------------

def test_limiting_curve_pieces(chart):
    L = limiting_curve(chart)
    x = chart.record.x_star
    tail = L[-200:]
    np.testing.assert_allclose(tail[:, :2], np.tile(x, (200, 1)))
    assert tail[0, 2] == pytest.approx(chart.record.y_sigma)
    assert tail[-1, 2] == pytest.approx(chart.record.y_tau)


def test_single_entry_continuation(paper3d, chart):
    rows = epsilon_continuation(paper3d, chart, [0.1])
    assert len(rows) == 1 and rows[0].status == "ok"
    assert rows[0].hausdorff > 0


def test_continuation_truncates_above_threshold(paper3d, chart):
    rows = epsilon_continuation(paper3d, chart, [2.0, 0.1])
    assert len(rows) == 1
    assert rows[0].status.startswith("truncated") and rows[0].canard is None


def test_continuation_needs_decreasing_list(paper3d, chart):
    with pytest.raises(ValueError):
        epsilon_continuation(paper3d, chart, [0.05, 0.1])


# -- robustness ---------------------------------------------------------------

def test_zero_perturbation_reproduces_orbit(paper3d, chart, canard01):
    rep = perturbation_robustness(paper3d, chart, {"kind": "both"}, [0.0], baseline=canard01)
    row = rep["rows"][0]
    assert row["persists"] and row["winding"] == 1
    np.testing.assert_allclose(row["fixed_point"], canard01.fixed_point, atol=1e-8)
    assert rep["last_surviving_delta"] == 0.0
