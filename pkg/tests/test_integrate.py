import math

import numpy as np
import pytest

from canardkit.integrate import EventSpec, IntegrationError, integrate, integrate_to_event


def harmonic(t, s):
    return np.array([s[1], -s[0]])


def test_harmonic_oscillator_returns():
    tr = integrate(harmonic, [1.0, 0.0], (0.0, 2 * math.pi))
    assert np.max(np.abs(tr.final - [1.0, 0.0])) < 1e-6
    # dense output agrees with the closed form in between
    np.testing.assert_allclose(tr(1.0), [math.cos(1.0), -math.sin(1.0)], atol=1e-8)


def test_backward_integration():
    tr = integrate(harmonic, [1.0, 0.0], (0.0, -math.pi))
    np.testing.assert_allclose(tr.final, [-1.0, 0.0], atol=1e-8)


def test_event_time_on_unit_drift():
    ev = [EventSpec(lambda t, s: s[0] - 1.0, 0, True, "x=1")]
    tr, hits = integrate_to_event(lambda t, s: np.array([1.0]), [0.0], ev, 5.0)
    assert hits and abs(hits[0].t - 1.0) < 1e-10
    assert tr.status == "event"


def test_event_of_constant_sign_is_no_hit():
    ev = [EventSpec(lambda t, s: 1.0 + s[0] ** 2, 0, True, "never")]
    tr, hits = integrate_to_event(harmonic, [1.0, 0.0], ev, 3.0)
    assert hits == [] and tr.status == "no-hit"
    assert tr.t_final == pytest.approx(3.0)


def test_bad_inputs():
    with pytest.raises(ValueError):
        integrate(harmonic, [1.0, 0.0], (0, 1), tol=(0.5, 1e-9))
    with pytest.raises(IntegrationError):
        integrate(harmonic, [np.nan, 0.0], (0, 1))


def test_stays_near_attracting_sheet(paper3d, chart):
    """From Γ_a the orbit tracks the slow surface until the turning region."""
    s = paper3d
    w0 = chart.ga.w_at(chart.tau)
    ev = [EventSpec(lambda t, w: s.reduced("Yy", w) + 0.3, 1, True, "turning region")]
    tr, hits = integrate_to_event(s, w0, ev, 10.0)
    assert hits, "orbit never reached the turning region"
    ts = np.linspace(0.0, hits[0].t, 400)
    dist = [abs(s.reduced("Y", w)) / np.linalg.norm(np.r_[s.reduced("Yx", w), s.reduced("Yy", w)]) for w in tr(ts)]
    assert max(dist) < 0.2


def test_section_return_event_matches_bisection(paper3d, chart, canard01):
    """Falling y - h0 event against bisection on the dense output."""
    s = paper3d
    h0 = canard01.states[0, 2]
    k = np.searchsorted(canard01.t, 0.5 * canard01.T_min)
    ev = [EventSpec(lambda t, w: w[2] - h0, -1, True, "section")]
    tr, hits = integrate_to_event(s, canard01.states[k, :3], ev, 2 * canard01.T_min, t0=canard01.t[k])
    assert hits
    t_hit = hits[0].t
    assert abs(hits[0].state[2] - h0) < 1e-10
    assert t_hit < canard01.t[-1]
    lo, hi = t_hit - 1e-3, t_hit + 1e-3
    g = lambda t: tr(t)[2] - h0  # noqa: E731
    assert g(lo) > 0 > g(hi)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if g(mid) > 0 else (lo, mid)
    assert abs(t_hit - 0.5 * (lo + hi)) < 1e-8
