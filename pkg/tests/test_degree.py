import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from canardkit.degree import (
    Ball, PolygonBoundary, degree_selftest, fixed_point_degree, product_degree, winding_number,
)

SQUARE = PolygonBoundary.rectangle((-1, -1), (1, 1), 4)


def test_identity_and_saddle():
    assert winding_number(lambda p: np.asarray(p, float), SQUARE).degree == 1
    assert winding_number(lambda p: np.array([p[0], -p[1]]), SQUARE).degree == -1


def test_squaring_on_circle():
    circ = PolygonBoundary.circle(radius=1.0, n=64)
    r = winding_number(lambda p: np.array([p[0] ** 2 - p[1] ** 2, 2 * p[0] * p[1]]), circ)
    assert r.degree == 2


def test_constant_field():
    assert winding_number(lambda p: np.array([1.0, 0.0]), SQUARE).degree == 0


def test_fixed_point_degrees_in_3d():
    ball = Ball(np.zeros(3), 1.0)
    assert fixed_point_degree(lambda z: 0.5 * np.asarray(z), ball).degree == 1
    assert fixed_point_degree(lambda z: 2.0 * np.asarray(z), ball).degree == -1


def test_linearized_return_map():
    """(u, v) -> (0, -4v) has id - map = (u, 5v), degree +1."""
    box = (np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    assert fixed_point_degree(lambda x: np.array([0.0, -4 * x[1]]), box).degree == 1


def test_product_degree():
    assert product_degree(1, -1) == -1
    assert product_degree(1, 1) == 1
    for k in (-3, 0, 2):
        assert product_degree(0, k) == 0


@settings(max_examples=15, deadline=None)
@given(st.integers(min_value=-3, max_value=3).filter(lambda k: k != 0))
def test_power_fields(k):
    """z^k (or conj(z)^|k|) on the unit circle winds k times."""
    def f(p):
        z = complex(p[0], p[1])
        w = z ** k if k > 0 else z.conjugate() ** (-k)
        return np.array([w.real, w.imag])

    assert winding_number(f, PolygonBoundary.circle(n=64)).degree == k


@settings(max_examples=15, deadline=None)
@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9))
def test_shifted_zero(cx, cy):
    """The identity field recentred anywhere inside the square still has degree 1."""
    r = winding_number(lambda p: np.array([p[0] - cx, p[1] - cy]), SQUARE)
    assert r.degree == 1


def test_selftest_table():
    rows = degree_selftest()
    assert len(rows) == 6
    assert all(r["passed"] and isinstance(r["degree"], int) for r in rows)
