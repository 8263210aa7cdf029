import itertools
import math

import numpy as np
import pytest

from canardkit.canard import ChartError, prepare_geometry
from canardkit.chaos import (
    AffineHorseshoe, CoveringMatrix, ProductBox, build_multi_chart, chart_coordinates, entropy_lower_bound,
    eval_chaotic_return, match_strip, parse_symbols, realize_itinerary, verify_hyperbolicity,
)
from canardkit.slowgeom import IntersectionRecord, find_intersections
from canardkit.sysdef import builtin_system

SQ = ([-1.0, -1.0], [1.0, 1.0])


def _record(tau, sigma, centre, fa=(1.0, 0.0), fr=(0.0, 1.0)):
    fa, fr = np.array(fa), np.array(fr)
    c = np.asarray(centre, float)
    return IntersectionRecord(tau, sigma, c, c, 1.0, -1.0, 1.0, -1.0, float(fa[0] * fr[1] - fa[1] * fr[0]),
                              fa, fr, True, 0.0)


# -- charts ------------------------------------------------------------------

def test_synthetic_charts_are_disjoint():
    recs = [_record(-1.0, 1.0, (0.0, 0.0)), _record(-2.0, 2.0, (1.0, 0.0))]
    charts = build_multi_chart(None, recs, alpha=0.1)
    assert len(charts) == 2
    np.testing.assert_allclose(charts[1].to_plane((0.0, 0.0)), [1.0, 0.0])
    np.testing.assert_allclose(charts[0].from_plane(charts[0].to_plane((0.03, -0.02))), [0.03, -0.02])


def test_synthetic_charts_overlap():
    recs = [_record(-1.0, 1.0, (0.0, 0.0)), _record(-2.0, 2.0, (1.0, 0.0))]
    with pytest.raises(ChartError, match="overlap"):
        build_multi_chart(None, recs, alpha=10.0)


def test_single_record_rejected():
    with pytest.raises(ChartError):
        build_multi_chart(None, [_record(-1.0, 1.0, (0.0, 0.0))], alpha=0.1)


@pytest.fixture(scope="module")
def designed():
    s = builtin_system("paper3d_twist", {"a": 3, "b": -1, "eps": 0.01})
    g = prepare_geometry(s)
    charts = build_multi_chart(s, [g.records[0], g.records[3]], branches=(g.ga, g.gr))
    return s, g, charts


def test_designed_system_has_two_charts(designed):
    s, g, charts = designed
    assert len(charts) == 2
    # Γ_r re-crosses Γ_a: both crossings come from the same pair of branches
    again = find_intersections(g.ga, g.gr)
    assert [r.sigma for r in again] == [r.sigma for r in g.records]
    assert all(abs(c.record.A) > 1e-3 for c in charts)
    assert charts[1].sigma - charts[0].sigma > 6 * charts[0].alpha


def test_chaotic_return_clamped_cases(designed):
    s, g, charts = designed
    a = charts[0].alpha
    s1, s2 = sorted(c.sigma for c in charts)
    up = charts[0].to_plane((0.0, 0.5 * a * np.sign(charts[0].record.A)))
    ev = eval_chaotic_return(s, charts, 0, up)
    assert ev.case == 1 and ev.s == pytest.approx(s2 + 2 * a)
    down = charts[0].to_plane((0.0, -0.5 * a * np.sign(charts[0].record.A)))
    ev = eval_chaotic_return(s, charts, 0, down)
    assert ev.case == 2 and ev.s == pytest.approx(s1 - 2 * a)
    np.testing.assert_allclose(chart_coordinates(charts[0], ev), [0.0, 2 * a], atol=1e-12)


def test_strip_orbit_falls_at_second_crossing(designed):
    """A matched near-canard orbit from chart 1 lands in Π_2 at a time close to σ_2."""
    s, g, charts = designed
    a = charts[0].alpha
    pt, _ = match_strip(s, charts, 0, 1, 0.0, 0.0)
    assert pt.residual < 1e-10
    assert abs(pt.s - charts[1].sigma) <= 3 * a
    assert abs(pt.u_tgt) < a / 2 and abs(pt.v_src) < a / 2


# -- hyperbolicity -------------------------------------------------------------

def test_linear_hyperbolic_map():
    rep = verify_hyperbolicity(lambda x: np.array([3 * x[0], x[1] / 3]), SQ, SQ, 1, 1)
    assert rep.passed and rep.degree == 1
    assert rep.exit_margin == pytest.approx(2.0)


def test_contraction_fails():
    rep = verify_hyperbolicity(lambda x: np.asarray(x) / 2, SQ, SQ, 1, 1)
    assert not rep.passed


def test_horseshoe_coverings():
    hs = AffineHorseshoe()
    cm = hs.covering_matrix()
    assert cm.all_pass and cm.K == 2
    for row in cm.reports:
        for r in row:
            assert r.exit_margin == pytest.approx(0.5)
            assert r.containment_margin == pytest.approx(2 / 3)
    # flips: branch 1 preserves orientation, branch 2 reverses it
    assert [[r.degree for r in row] for row in cm.reports] == [[1, 1], [-1, -1]]


# -- itineraries ---------------------------------------------------------------

def test_constant_itinerary_is_branch_fixed_point():
    hs = AffineHorseshoe()
    r = realize_itinerary(hs, hs.boxes, (0, 0, 0, 0), periodic=True)
    # x = 3 (x + 1.5) has the solution x = -2.25
    np.testing.assert_allclose(r.point, [-2.25, 0.0], atol=1e-8)


def test_alternating_itinerary_period_two():
    hs = AffineHorseshoe()
    r = realize_itinerary(hs, hs.boxes, parse_symbols("12"), periodic=True)
    # closed form: x1 = 3 (x0 + 1.5), x0 = -3 (x1 - 1.5)  =>  x0 = -0.9
    np.testing.assert_allclose(r.point, [-0.9, 0.0], atol=1e-8)
    np.testing.assert_allclose(r.point, hs.periodic_point((0, 1)), atol=1e-8)
    assert r.max_residual < 1e-8


def test_all_words_of_length_six():
    hs = AffineHorseshoe()
    for w in itertools.product(range(2), repeat=6):
        r = realize_itinerary(hs, hs.boxes, w)
        lo, hi = hs.oracle_interval(w)
        assert lo - 1e-12 <= r.point[0] <= hi + 1e-12
        assert r.max_residual < 1e-8
        assert [hs.which(x) for x in r.iterates] == list(w)


def test_symbols_are_one_based():
    assert parse_symbols("1212") == (0, 1, 0, 1)
    with pytest.raises(ValueError):
        parse_symbols("1a")


# -- entropy ---------------------------------------------------------------

def test_entropy_values():
    assert float(entropy_lower_bound(2)) == pytest.approx(0.6931, abs=1e-4)
    assert float(entropy_lower_bound(3)) == pytest.approx(math.log(3))
    cm = AffineHorseshoe().covering_matrix()
    e = entropy_lower_bound(2, cm)
    assert e.value == math.log(2) and not e.withheld and "not a proof" in e.evidence


def test_entropy_withheld_on_failure():
    e = entropy_lower_bound(2, [[True, True], [False, True]])
    assert e.withheld and e.value is None and e.failures == ((2, 1),)
    with pytest.raises(ValueError):
        float(e)


def test_covering_matrix_serializes(tmp_path):
    cm = AffineHorseshoe().covering_matrix()
    p = tmp_path / "cm.json"
    cm.to_json(p)
    import json

    d = json.loads(p.read_text())
    assert d["all_pass"] and d["verdicts"] == [[1, 1], [1, 1]]
    assert isinstance(cm, CoveringMatrix)


def test_product_box_margins():
    B = ProductBox.cube(1.0)
    assert B.contains([0.5, -0.5]) and not B.contains([1.5, 0.0])
    assert B.unstable_gap([1.5, 0.0]) == pytest.approx(0.5)
