import numpy as np
import pytest
import sympy as sp

from canardkit.slowgeom import (
    CertificationError, CriticalPoint, ReducedBranch, certify_nondegeneracy, find_critical_points, find_intersections, hausdorff,
)
from canardkit.sysdef import X1, X2, Y, BoundingBox, SlowFastSystem, builtin_system


def _cp_oracle(a):
    """Symbolic elimination: Y = Y_y = <X, Y_x> = 0 for paper3d."""
    x1, x2, y = sp.symbols("x1 x2 y", real=True)
    Xs = (-a * x2 + y / 3, x1 + 1)
    Ys = x1 + y**2 + x2 * y
    eqs = [Ys, sp.diff(Ys, y), Xs[0] * sp.diff(Ys, x1) + Xs[1] * sp.diff(Ys, x2)]
    return sp.solve(eqs, [x1, x2, y], dict=True)


@pytest.mark.parametrize("a", [1.0, 3.0, 7.5])
def test_paper3d_critical_point_at_origin(a):
    oracle = [sol for sol in _cp_oracle(sp.nsimplify(a)) if all(v.is_real for v in sol.values())]
    assert len(oracle) == 1 and all(v == 0 for v in oracle[0].values())
    cps = find_critical_points(builtin_system("paper3d", {"a": a}))
    assert len(cps) == 1
    np.testing.assert_allclose(cps[0].w, 0.0, atol=1e-10)
    assert cps[0].residual < 1e-10


def test_no_turning_point():
    s = SlowFastSystem((X2, X1), X1 + Y, 0.1, box=BoundingBox((-2, -2, -2), (2, 2, 2)))
    assert find_critical_points(s) == []


def test_shifted_critical_point():
    s = builtin_system("paper3d", {"a": 3}).substitute({Y: Y - 1})
    cps = find_critical_points(s)
    assert len(cps) == 1
    np.testing.assert_allclose(cps[0].w, [0.0, 0.0, 1.0], atol=1e-10)


def test_certification_values_against_symbolic_derivatives():
    s = builtin_system("paper3d", {"a": 3})
    rep = certify_nondegeneracy(s, find_critical_points(s)[0])
    v = rep.values
    # at the origin the frame is the identity, so the values are plain derivatives
    np.testing.assert_allclose(rep.frame.e1, [1, 0], atol=1e-14)
    X1e = -3 * X2 + Y / 3
    Ye = X1 + Y**2 + X2 * Y
    at0 = {X1: 0, X2: 0, Y: 0}
    olE = 2 * sp.diff(X1e, X2) * sp.diff(Ye, Y, 2) - sp.diff(X1e, Y) * sp.diff(Ye, X1)
    assert v["olE"] == pytest.approx(float(olE.subs(at0)), abs=1e-9)
    assert v["olE"] == pytest.approx(-12.333333333333, abs=1e-9)
    assert v["ol1E"] == pytest.approx(1 / 3, abs=1e-9)
    assert (v["nev1"], v["nev2"], v["nev3"]) == pytest.approx((1.0, 1.0, 2.0), abs=1e-12)
    assert rep.passed


def test_vanishing_slow_field_fails_nev1():
    s = SlowFastSystem((X2, X1), X1 + Y**2 + X2 * Y, 0.1, box=BoundingBox((-1, -1, -1), (1, 1, 1)))
    assert any(np.linalg.norm(c.w) < 1e-9 for c in find_critical_points(s))
    cp = CriticalPoint(np.zeros(2), 0.0, (0.0, 0.0, 0.0))
    with pytest.raises(CertificationError) as exc:
        certify_nondegeneracy(s, cp)
    assert exc.value.report.values["nev1"] == 0.0
    assert exc.value.report.verdicts["nev1"] != "pass"


@pytest.mark.parametrize("a", [1.0, 3.0])
def test_reduced_field_at_surface_point(a):
    s = builtin_system("paper3d", {"a": a})
    np.testing.assert_allclose(s.reduced_velocity((-1.0, 0.0, -1.0)), [-1 / 3, 0.0, -1 / 6], atol=1e-14)


def test_turning_line_tangent(geometry):
    np.testing.assert_allclose(geometry.frame.tangent, [0.0, 2.0, -1.0], atol=1e-12)


def test_branch_signs(paper3d, geometry):
    for br, sign in ((geometry.ga, -1), (geometry.gr, 1)):
        ts = br.t[np.abs(br.t) > 10 * abs(br.t_seed)]
        signs = {int(np.sign(paper3d.reduced("Yy", br.w_at(t)))) for t in ts}
        assert signs == {sign}


def test_paper3d_branches_cross(geometry):
    assert geometry.records
    assert any(abs(r.A) > 1e-3 for r in geometry.records)
    r = geometry.records[0]
    assert r.tau < 0 < r.sigma
    assert r.residual < 1e-10


def _segment(kind, p0, d, n=11):
    t = np.linspace(-1, 1, n)
    return ReducedBranch.from_samples(kind, t, np.outer(t, d) + p0, np.tile(d, (n, 1)))


def test_straight_segments():
    da, dr = np.array([1.0, 0.5]), np.array([-0.3, 1.0])
    recs = find_intersections(_segment("attractive", [0, 0], da), _segment("repulsive", [0, 0], dr))
    assert len(recs) == 1
    assert recs[0].A == pytest.approx(da[0] * dr[1] - da[1] * dr[0], rel=1e-12)
    np.testing.assert_allclose(recs[0].pq_star, 0.0, atol=1e-14)


def _arc(kind, centre, t):
    pq = np.c_[centre[0] + np.cos(t), centre[1] + np.sin(t)]
    vel = np.c_[-np.sin(t), np.cos(t)]
    return ReducedBranch.from_samples(kind, t, pq, vel)


def test_two_circle_arcs_cross_twice():
    t = np.linspace(-2.5, 2.5, 301)
    ga = _arc("attractive", (0.0, 0.0), t)
    gr = _arc("repulsive", (1.0, 0.0), t + np.pi)
    recs = find_intersections(ga, gr)
    assert len(recs) == 2
    pts = sorted(tuple(np.round(r.pq_star, 10)) for r in recs)
    h = np.sqrt(3) / 2
    np.testing.assert_allclose(pts, [(0.5, -h), (0.5, h)], atol=1e-10)
    assert {np.sign(r.A) for r in recs} == {-1.0, 1.0}


def test_hausdorff_symmetric():
    P = np.array([[0.0, 0.0], [1.0, 0.0]])
    Q = np.array([[0.0, 0.5]])
    assert hausdorff(P, Q) == hausdorff(Q, P) == pytest.approx(np.hypot(1, 0.5))
