import numpy as np
import pytest
import sympy as sp

from canardkit.sysdef import (
    PA, X1, X2, Y, BoundingBox, SlowFastSystem, SystemError_, attach_perturbation, builtin_system, perturbation_from_spec,
    sine_pert_X, triangle_pert_Y, triangle_wave,
)


def test_paper3d_values():
    s = builtin_system("paper3d", {"a": 3, "eps": 0.1})
    assert s.reduced("Y", (0.0, 0.0, 0.0)) == 0.0
    assert s.reduced("Y", (1.0, 0.0, 0.0)) == 1.0
    assert s.aux_dim == 0 and s.dim == 3


def test_lienard_substitution():
    s = builtin_system("lienard", {"F": "y**2", "eps": 0.01})
    rng = np.random.default_rng(1)
    for x, y in rng.uniform(-1, 1, (5, 2)):
        f = s.rhs_at((x, y), 0.0)
        assert f[0] == pytest.approx(y)
        assert f[1] == pytest.approx((-x + y**2) / 0.01)
    # the parameter shifts the argument of F
    assert s.rhs_at((0.0, 0.0), 0.3)[1] == pytest.approx(0.09 / 0.01)


def test_predator_prey_rhs_matches_symbolic_oracle():
    eps = 1e-3
    s = builtin_system("predator_prey", {"p": 1, "q": 1, "r": 1, "g": "y", "h": "y**2", "f": "y", "eps": eps})
    x, y, a = sp.symbols("x y a")
    oracle = sp.lambdify((x, y, a), [x * (1 - y), y * (-1 + x * (1 + y - a * y**2)) / eps])
    rng = np.random.default_rng(7)
    for xv, yv, av in rng.uniform(0.1, 2.0, (5, 3)):
        np.testing.assert_allclose(s.rhs_at((xv, yv), av), oracle(xv, yv, av), rtol=1e-12)


def test_unknown_system_and_bad_params():
    with pytest.raises(SystemError_):
        builtin_system("nope")
    with pytest.raises(SystemError_):
        builtin_system("paper3d", {"a": -1})
    with pytest.raises(SystemError_):
        builtin_system("lienard", {"F": "1 + y**2"})


def test_with_epsilon_keeps_equations():
    s = builtin_system("paper3d", {"a": 3, "eps": 0.1})
    t = s.with_epsilon(0.05)
    assert t.epsilon == 0.05 and t.Y == s.Y
    with pytest.raises(SystemError_):
        s.with_epsilon(0.0)


def test_zero_perturbation_is_identity():
    s = builtin_system("paper3d", {"a": 3, "eps": 0.1})
    pX, pY, d = perturbation_from_spec({"kind": "zero", "delta": 1e-3})
    t, rep = attach_perturbation(s, pX, pY, d)
    pts = s.box.sample(100, np.random.default_rng(0))
    for p in pts:
        np.testing.assert_array_equal(t.rhs(0.0, p), s.rhs(0.0, p))


def test_sine_perturbation_bound():
    s = builtin_system("paper3d", {"a": 3, "eps": 0.1})
    _, rep = attach_perturbation(s, sine_pert_X(1e-3), None, 1e-3)
    assert rep.within_bound
    assert rep.sup_X <= 1e-3


def test_triangle_perturbation_is_steep_but_small():
    d = 1e-3
    pY = triangle_pert_Y(d)
    # the period is d**2, so the scan step must be far below it
    ys = np.linspace(0.3, 0.3 + 1e-5, 10001)
    vals = np.array([pY((0.0, 0.0), y, (), 0.1) for y in ys])
    assert np.max(np.abs(vals)) <= d
    slope = np.max(np.abs(np.diff(vals) / np.diff(ys)))
    assert slope >= 1e3
    assert slope == pytest.approx(4 / d, rel=1e-6)
    assert abs(triangle_wave(0.0)) <= 1.0


def test_bounding_box():
    b = BoundingBox.from_intervals([(-1, 1), (0, 2), (3, 4)])
    assert b.dim == 3
    assert b.contains((0, 1, 3.5)) and not b.contains((0, 3, 3.5))
    assert b.grid(3).shape == (27, 3)


def test_perturbation_needs_a_box():
    s = SlowFastSystem((-3 * X2 + Y / 3, X1 + 1), X1 + Y**2 + X2 * Y, 0.1)
    with pytest.raises(SystemError_):
        attach_perturbation(s, sine_pert_X(1e-3), None, 1e-3)


def test_unbound_symbol_rejected():
    with pytest.raises(SystemError_):
        SlowFastSystem((PA * X2, X1), X1 + Y**2, 0.1)
