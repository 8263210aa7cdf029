import math

import numpy as np
import pytest
import sympy as sp
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from canardkit import planar as P
from canardkit.sysdef import PX, PY, PlanarParamSystem, builtin_system, primer_integrals


@pytest.fixture(scope="module")
def lien():
    return builtin_system("lienard", {"eps": 0.01})


# -- gates -------------------------------------------------------------------

def test_lienard_gate_algebra(lien):
    g = P.equilibrium_gate(lien, 0.3)
    # e_a = (F(a), 0); J = [[0, 1], [-1/eps, F'(a)/eps]]
    np.testing.assert_allclose(g.equilibrium, [0.09, 0.0], atol=1e-14)
    assert g.det == pytest.approx(100.0, rel=1e-12)
    assert g.trace == pytest.approx(60.0, rel=1e-12)


def test_lienard_gate_bracket(lien):
    b = P.gate_bracket(lien, -0.3, 0.3)
    assert b.lo.trace == pytest.approx(-60.0, rel=1e-12)
    assert b.trace_product < 0 and b.passed


def test_predator_prey_trace_vanishes_at_critical_parameter():
    s = builtin_system("predator_prey", {"eps": 1e-3})
    geo = P.geometry_of(s)
    g = P.equilibrium_gate(s, geo.a_star)
    assert abs(g.trace) < 1e-8 and g.det > 0
    np.testing.assert_allclose(g.equilibrium, [geo.x_star, geo.y_star], rtol=1e-10)


def test_gate_reports_multiple_equilibria():
    s = PlanarParamSystem((PY, PX**2 - 1), (-1, 1), 1.0)
    with pytest.raises(P.EquilibriumError) as e:
        P.equilibrium_gate(s, 0.0)
    assert e.value.reason == "multiple"


# -- cycle detection ----------------------------------------------------------

def test_linear_focus_has_no_cycle():
    s = PlanarParamSystem((PY, -PX - 0.1 * PY), (-1, 1), 1.0)
    c = P.detect_cycle(s, 0.0)
    assert c.status == "none"


def test_relaxation_cycle():
    s = builtin_system("bimodal", {"eps": 0.01})
    c = P.detect_cycle(s, 0.5)
    assert c.found and c.closure < 1e-6 and c.period > 0


def test_relaxation_cycle_independent_period():
    s = builtin_system("bimodal", {"eps": 0.01})
    c = P.detect_cycle(s, 0.5)
    F = sp.lambdify(PY, s.meta["F"], "math")
    a, eps = 0.5, 0.01

    def rhs(t, w):
        return [w[1], (-w[0] + F(w[1] + a)) / eps]

    sol = solve_ivp(rhs, (0, 30), c.states[0], method="Radau", rtol=1e-10, atol=1e-12, dense_output=True,
                    events=lambda t, w: w[1] - c.states[0, 1])
    ts = sol.t_events[0]
    ups = [t for t in ts if t > 1e-6 and rhs(t, sol.sol(t))[1] * rhs(0, c.states[0])[1] > 0]
    assert ups[0] == pytest.approx(c.period, rel=1e-5)


def test_closure_shrinks_with_tolerance():
    s = builtin_system("bimodal", {"eps": 0.3})
    loose = P.detect_cycle(s, 0.5, tol=1e-3)
    tight = P.detect_cycle(s, 0.5, tol=1e-6)
    assert loose.found and tight.found
    assert tight.closure <= loose.closure


def test_cycle_touches_region_at_magnitude(lien):
    r = P.magnitude_continuation(lien, 0.5, a_bracket=(-0.3, 0.3))
    rep = P.region_report(r.states, P.lienard_region(0.5, 1.0, -1.5, 1.5))
    assert rep.confined
    assert rep.min_distance < 1e-9
    np.testing.assert_allclose(rep.touching_point, [0.5, 0.0], atol=1e-2)


# -- magnitude continuation ----------------------------------------------------

def test_magnitude_half(lien):
    r = P.magnitude_continuation(lien, 0.5, a_bracket=(-0.3, 0.3))
    assert r.error < 1e-2 and r.closure < 1e-7 and r.gates_sound
    assert r.tag == "ek" and -0.3 < r.a_eps < 0.3
    assert abs(r.a_eps) < 1e-6
    # at a = 0 the flow is reversible under (t, y) -> (-t, -y): the cycle is symmetric in y
    x, y = r.states.T
    assert y.max() == pytest.approx(-y.min(), abs=1e-6)
    mirror = np.interp(x[y > 0], x[y < 0][np.argsort(x[y < 0])], -y[y < 0][np.argsort(x[y < 0])])
    assert np.max(np.abs(mirror - y[y > 0])) < 1e-3
    # the closed-form first integral is only usable near the launch point
    near = np.abs(x - 0.5) < 0.02
    H = P.lienard_oracle_H(x[near], y[near], 0.01)
    assert np.max(np.abs(H / P.lienard_oracle_H(0.5, 0.0, 0.01) - 1)) < 1e-3


def test_magnitude_ordering_over_twenty_targets():
    s = builtin_system("lienard", {"F": "y**2 + y**3/3", "eps": 0.1})
    a = [P.magnitude_continuation(s, al, a_bracket=(-0.2, 0.2), n_samples=3).a_eps
         for al in np.linspace(0.1, 1.0, 20)]
    d = np.diff(a)
    assert np.all(d < 0) or np.all(d > 0)


def test_bimodal_magnitude_above_F_mu_rejected():
    s = builtin_system("bimodal", {"eps": 0.01})
    Fmu = float(s.meta["F"].subs(PY, s.meta["mu"]))
    with pytest.raises(P.AdmissibilityError) as e:
        P.magnitude_continuation(s, Fmu + 0.1)
    assert e.value.reason == "magnitude-exceeds-F(mu)"


def test_multimodal_late_point_outside_band():
    s = builtin_system("multimodal", {"eps": 0.01})
    y0 = 0.5
    x0 = P.F_star(s.meta["F"], y0) + 1.0
    with pytest.raises(P.AdmissibilityError) as e:
        P.magnitude_continuation(s, (x0, y0), mode="late")
    assert e.value.reason == "outside-late-band"


def test_bracket_must_straddle():
    s = builtin_system("lienard", {"F": "y**2 + y**3/3", "eps": 0.1})
    # a_eps for magnitude 1 is about -0.0137, left of the bracket
    with pytest.raises(P.BracketError) as e:
        P.magnitude_continuation(s, 1.0, a_bracket=(-0.005, 0.2), n_samples=3)
    assert e.value.reason == "no-straddle"


def test_gate_failure_raised(lien):
    with pytest.raises(P.GateError):
        P.magnitude_continuation(lien, 0.5, a_bracket=(0.1, 0.3))


def test_F_star():
    F = PY**2 - 2 * PY**3 / 3
    assert P.F_star(F, 0.5) == -math.inf
    assert P.F_star(PY**2, 0.5) == pytest.approx(0.25)
    assert P.F_star(PY**2, -1.0) == math.inf


# -- predator-prey --------------------------------------------------------------

def _xi_oracle(q, r, x0):
    c = q * math.log(x0) - r * x0
    return brentq(lambda x: q * math.log(x) - r * x - c, q / r, 50 * q / r, xtol=1e-14)


def test_xi0_values():
    assert P.xi0_solve(1, 1, 1.0) == (1.0, 0.0, True)
    v = P.xi0_solve(1, 1, 0.5)
    assert v.value == pytest.approx(1.756, abs=1e-3)
    assert v.value == pytest.approx(_xi_oracle(1, 1, 0.5), abs=1e-12) and v.residual < 1e-12
    w = P.xi0_solve(2, 1, 1.0)
    assert w.value > 2 and w.value == pytest.approx(_xi_oracle(2, 1, 1.0), abs=1e-12)
    with pytest.raises(ValueError):
        P.xi0_solve(1, 1, 1.5)


def test_axis_invariant():
    assert P.axis_invariant(1, 1, 1, 1.0, 1.0) == 1.0
    d = P.axis_invariant(2, 1, 1, 1.0, 2.0) - P.axis_invariant(2, 1, 1, 1.0, 1.0)
    assert d == pytest.approx(2 * math.log(2), abs=1e-15)
    with pytest.raises(ValueError):
        P.axis_invariant(1, 1, 1, -1.0, 1.0)


def test_axis_invariant_along_reduced_equation():
    p, q, r = 1.5, 1.0, 2.0
    sol = solve_ivp(lambda x, y: y * (q - r * x) / (p * x), (0.2, 1.7), [0.3], rtol=1e-12, atol=1e-14)
    I0 = P.axis_invariant(p, q, r, 0.2, 0.3)
    I1 = P.axis_invariant(p, q, r, sol.t[-1], sol.y[0, -1])
    assert abs(I1 - I0) < 1e-9


def test_predator_prey_setup_closed_form():
    g = P.predator_prey_setup(1, 1, 1, "y", "y**2", "y")
    assert g.y_star == pytest.approx(1.0) and g.a_star == pytest.approx(0.5)
    assert g.x_star == pytest.approx(1 / 1.5)
    assert g.unimodal and g.X(g.y_star) == pytest.approx(g.x_star)


def test_predator_prey_integral_primer():
    gg, hh = primer_integrals(1, 2)
    geo = P.predator_prey_setup(1, 1, 1, gg, hh)
    assert geo.x_star > 0 and geo.eta > geo.y_star


def test_constant_ratio_rejected():
    with pytest.raises(P.GeometryError) as e:
        P.predator_prey_setup(1, 1, 1, "y", "y")
    assert e.value.reason == "ratio_not_decreasing"


def test_delayed_loss_of_stability():
    r = P.simulate_delayed_loss(builtin_system("predator_prey", {"eps": 1e-3}), 0.5, 0.3)
    assert r.rel_error < 0.05
    assert r.axis_samples > 0 and r.invariant_drift < 1e-3


def test_predator_prey_early_canard():
    s = builtin_system("predator_prey", {"eps": 1e-2})
    r = P.magnitude_continuation(s, (0.9, 0.5), mode="early", a_bracket=(0.45, 0.55), n_samples=3)
    assert r.error < 1e-2 and r.tag == "ekm" and r.gates_sound
