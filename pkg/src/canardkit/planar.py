"""Planar canards: equilibrium gates, cycle detection, magnitude continuation.

The systems here are :class:`~canardkit.sysdef.PlanarParamSystem` objects
from the Liénard families (``lienard``, ``bimodal``, ``multimodal``) or the
predator-prey family.  Periodic canards of a prescribed magnitude are located
by two-sided shooting.  A launch point fixes the magnitude.  The forward and
backward orbits through it are followed to a horizontal section through the
lower fold of the slow curve.  The parameter ``a`` is then bisected on the
mismatch of the two crossings.  Predator-prey orbits are integrated in
``(x, ln y)`` so that the long passage along the axis ``y = 0`` costs nothing.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import sympy as sp
from scipy.optimize import brentq

from .degree import PolygonBoundary
from .integrate import EventSpec, IntegrationError, integrate_to_event
from .sysdef import PY, PlanarParamSystem, builtin_system

TOL = (1e-10, 1e-12)


class PlanarError(ValueError):
    """Base class; ``reason`` is a short machine-readable code."""

    def __init__(self, message: str, reason: str = "error"):
        super().__init__(message)
        self.reason = reason


class EquilibriumError(PlanarError):
    pass


class GateError(PlanarError):
    pass


class AdmissibilityError(PlanarError):
    pass


class BracketError(PlanarError):
    pass


class GeometryError(PlanarError):
    pass


# ---------------------------------------------------------------------------
# equilibria and the det/trace gate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EquilibriumGate:
    a: float
    equilibrium: np.ndarray
    jacobian: np.ndarray
    det: float
    trace: float

    @property
    def passed(self) -> bool:
        return self.det > 0

    def as_dict(self) -> dict:
        return {"a": self.a, "equilibrium": self.equilibrium.tolist(),
                "jacobian": self.jacobian.tolist(), "det": self.det, "trace": self.trace,
                "passed": self.passed}


@dataclass(frozen=True)
class BracketGate:
    lo: EquilibriumGate
    hi: EquilibriumGate

    @property
    def trace_product(self) -> float:
        return self.lo.trace * self.hi.trace

    @property
    def passed(self) -> bool:
        return self.lo.passed and self.hi.passed and self.trace_product < 0

    def as_dict(self) -> dict:
        return {"lo": self.lo.as_dict(), "hi": self.hi.as_dict(),
                "trace_product": self.trace_product, "passed": self.passed}


def default_region(sys: PlanarParamSystem) -> tuple:
    """Search box ``((x_lo, y_lo), (x_hi, y_hi))`` for equilibria."""
    if sys.meta.get("family") == "predator_prey":
        return (1e-6, 1e-6), (5.0, 5.0)
    return (-10.0, -10.0), (10.0, 10.0)


def _newton(sys, a, x0, max_iter=60):
    x = np.array(x0, float)
    for _ in range(max_iter):
        f = sys.rhs_at(x, a)
        J = sys.jac_at(x, a)
        try:
            dx = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(dx)):
            return None
        x = x + dx
        if np.linalg.norm(dx) <= 1e-13 * (1 + np.linalg.norm(x)):
            return x
        if np.linalg.norm(x) > 1e8:
            return None
    return None


def _gate_at(sys, a, e) -> EquilibriumGate:
    J = sys.jac_at(e, a)
    det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
    return EquilibriumGate(float(a), np.asarray(e, float), J, float(det), float(J[0, 0] + J[1, 1]))


def equilibrium_gate(sys: PlanarParamSystem, a: float, region=None, n_grid: int = 7) -> EquilibriumGate:
    """Locate the unique equilibrium in ``region`` by Newton from a grid of starts."""
    lo, hi = np.asarray(region or default_region(sys), float)
    xs = np.linspace(lo[0], hi[0], n_grid + 2)[1:-1]
    ys = np.linspace(lo[1], hi[1], n_grid + 2)[1:-1]
    found: list[np.ndarray] = []
    for x in xs:
        for y in ys:
            e = _newton(sys, a, (x, y))
            if e is None or np.any(e <= lo) or np.any(e >= hi):
                continue
            scale = 1e-7 * (1 + np.linalg.norm(e))
            if not any(np.linalg.norm(e - g) < scale for g in found):
                found.append(e)
    if not found:
        raise EquilibriumError(f"no equilibrium found in region at a = {a}", "none")
    if len(found) > 1:
        raise EquilibriumError(f"{len(found)} equilibria found in region at a = {a}", "multiple")
    return _gate_at(sys, a, found[0])


def gate_bracket(sys: PlanarParamSystem, a_minus: float, a_plus: float, region=None) -> BracketGate:
    return BracketGate(equilibrium_gate(sys, a_minus, region), equilibrium_gate(sys, a_plus, region))


# ---------------------------------------------------------------------------
# working coordinates
# ---------------------------------------------------------------------------

class _Flow:
    """Planar flow at fixed ``a`` in working coordinates.

    Identity for the Liénard families; ``(x, ln y)`` for predator-prey.
    """

    def __init__(self, sys: PlanarParamSystem, a: float):
        self.sys = sys
        self.a = float(a)
        self.epsilon = sys.epsilon
        self.log = sys.meta.get("family") == "predator_prey"
        if self.log:
            m = sys.meta
            self.p, self.q, self.r = m["p"], m["q"], m["r"]
            self._f = _num(m["f"])
            self._g = _num(m["g"])
            self._h = _num(m["h"])
            self._df = _num(sp.diff(m["f"], PY))
            self._dg = _num(sp.diff(m["g"], PY))
            self._dh = _num(sp.diff(m["h"], PY))

    def to_work(self, s):
        s = np.asarray(s, float)
        if not self.log:
            return s.copy()
        out = s.copy()
        out[..., 1] = np.log(s[..., 1])
        return out

    def from_work(self, w):
        w = np.asarray(w, float)
        if not self.log:
            return w.copy()
        out = w.copy()
        out[..., 1] = np.exp(w[..., 1])
        return out

    def rhs(self, t, w):
        if not self.log:
            return self.sys.rhs_at(w, self.a)
        x, Y = w
        y = math.exp(Y)
        return np.array([x * (self.p - self._f(y)),
                         (-self.q + x * (self.r + self._g(y) - self.a * self._h(y))) / self.epsilon])

    def jac(self, t, w):
        if not self.log:
            return self.sys.jac_at(w, self.a)
        x, Y = w
        y = math.exp(Y)
        e = self.epsilon
        return np.array([
            [self.p - self._f(y), -x * self._df(y) * y],
            [(self.r + self._g(y) - self.a * self._h(y)) / e,
             x * (self._dg(y) - self.a * self._dh(y)) * y / e],
        ])


def _num(expr):
    """Scalar callable of y that survives removable singularities."""
    fn = sp.lambdify(PY, expr, "math")

    def safe(y):
        try:
            v = float(fn(y))
        except (ZeroDivisionError, ValueError, OverflowError):
            v = math.nan
        if math.isfinite(v):
            return v
        # symmetric averages with one Richardson step, O(d^4) accurate
        d = 1e-3 * max(abs(y), 1e-3)
        m1 = 0.5 * (float(fn(y - d)) + float(fn(y + d)))
        m2 = 0.5 * (float(fn(y - d / 2)) + float(fn(y + d / 2)))
        return (4 * m2 - m1) / 3

    return safe


# ---------------------------------------------------------------------------
# regions
# ---------------------------------------------------------------------------

def lienard_region(alpha: float, beta: float, zeta_minus: float, zeta_plus: float) -> PolygonBoundary:
    """Quadrangle minus the triangle with apex (alpha, 0) on the east side.

    The quadrangle is bounded by y = zeta_minus, y = zeta_plus, x = beta and
    the line x + y = zeta_minus.  The removed triangle has vertices
    (alpha, 0) and (beta, +-(beta - alpha)).
    """
    if not (zeta_minus < 0 < zeta_plus and 0 < alpha < beta):
        raise GeometryError("need zeta_minus < 0 < zeta_plus and 0 < alpha < beta", "region")
    w = beta - alpha
    if w >= min(zeta_plus, -zeta_minus):
        raise GeometryError("triangle does not fit inside the quadrangle", "region")
    v = [(0.0, zeta_minus), (beta, zeta_minus), (beta, -w), (alpha, 0.0), (beta, w),
         (beta, zeta_plus), (zeta_minus - zeta_plus, zeta_plus)]
    return PolygonBoundary(np.array(v))


def _inside(points, poly: np.ndarray) -> np.ndarray:
    x, y = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), bool)
    for (x1, y1), (x2, y2) in zip(poly, np.roll(poly, -1, axis=0)):
        cond = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= cond & (x < xc)
    return inside


def _distance_to_polygon(points, poly: np.ndarray):
    best = np.full(len(points), np.inf)
    foot = np.zeros_like(points)
    for a, b in zip(poly, np.roll(poly, -1, axis=0)):
        d = b - a
        t = np.clip(((points - a) @ d) / (d @ d), 0, 1)
        q = a + t[:, None] * d
        dist = np.linalg.norm(points - q, axis=1)
        better = dist < best
        best[better] = dist[better]
        foot[better] = q[better]
    return best, foot


@dataclass(frozen=True)
class RegionReport:
    confined: bool
    min_distance: float
    touching_point: np.ndarray
    outside_fraction: float

    def as_dict(self) -> dict:
        return {"confined": self.confined, "min_distance": self.min_distance,
                "touching_point": self.touching_point.tolist(),
                "outside_fraction": self.outside_fraction}


def region_report(states, region, tol: float = 1e-6) -> RegionReport:
    """Confinement of a closed curve in the closure of ``region`` and its closest approach."""
    poly = region.vertices if isinstance(region, PolygonBoundary) else PolygonBoundary(region).vertices
    pts = np.asarray(states, float)
    dist, foot = _distance_to_polygon(pts, poly)
    outside = ~_inside(pts, poly) & (dist > tol)
    k = int(np.argmin(dist))
    return RegionReport(bool(not outside.any()), float(dist[k]), foot[k], float(outside.mean()))


# ---------------------------------------------------------------------------
# cycle detection
# ---------------------------------------------------------------------------

@dataclass
class CycleResult:
    status: str  # "cycle", "none" or "inconclusive"
    a: float
    gate: EquilibriumGate
    direction: int
    returns: np.ndarray
    period: float = math.nan
    closure: float = math.nan
    t: np.ndarray | None = None
    states: np.ndarray | None = None
    region: RegionReport | None = None
    note: str = ""

    @property
    def found(self) -> bool:
        return self.status == "cycle"

    def as_dict(self) -> dict:
        return {"status": self.status, "a": self.a, "gate": self.gate.as_dict(),
                "direction": self.direction, "returns": self.returns.tolist(),
                "period": self.period, "closure": self.closure, "note": self.note,
                "region": self.region.as_dict() if self.region else None}


def detect_cycle(
    sys: PlanarParamSystem,
    a: float,
    region=None,
    t_budget: float = 200.0,
    tol: float = 1e-8,
    offset: float = 1e-3,
    escape_radius: float = 10.0,
    integ_tol=TOL,
    n_chunks: int = 20,
) -> CycleResult:
    """Search for a periodic orbit around the equilibrium at parameter ``a``.

    Trajectories leave the equilibrium in the direction in which it repels
    (forward for a source, backward for a sink).  Successive returns to the
    half-line ``{y = y_e, x > x_e}`` are tracked.  The search stops when two
    returns agree to ``tol`` (relative to the return radius once it is below
    one; this keeps the first small laps near the equilibrium from passing as a
    cycle), the orbit escapes or collapses onto the
    equilibrium (none), or the time budget runs out (inconclusive).
    """
    gate = equilibrium_gate(sys, a)
    e = gate.equilibrium
    direction = 1 if gate.trace >= 0 else -1
    flow = _Flow(sys, a)
    ew = flow.to_work(e)
    rot = 1 if gate.jacobian[1, 0] > 0 else -1
    poly = None
    if region is not None:
        poly = region.vertices if isinstance(region, PolygonBoundary) else PolygonBoundary(region).vertices
        lo, hi = poly.min(0), poly.max(0)
        centre, radius = 0.5 * (lo + hi), float(np.max(hi - lo))
    else:
        centre, radius = e, escape_radius * max(1.0, float(np.max(np.abs(e))))

    events = [
        EventSpec(lambda t, w: w[1] - ew[1], rot * direction, False, "section"),
        EventSpec(lambda t, w: np.max(np.abs(flow.from_work(w) - centre)) - radius, 1, True, "escape"),
    ]
    w = flow.to_work(e + np.array([offset * max(1.0, abs(e[0])), 0.0]))
    returns: list[float] = []
    n_seen = 0
    t_chunk = t_budget / n_chunks
    status, note = "inconclusive", "time budget exhausted"
    for _ in range(n_chunks):
        try:
            traj, hits = integrate_to_event(flow, w, events, direction * t_chunk, tol=integ_tol)
        except IntegrationError as exc:
            status, note = "none", f"integration failed ({exc})"
            break
        for h in hits:
            if h.name == "section" and flow.from_work(h.state)[0] > e[0]:
                returns.append(float(flow.from_work(h.state)[0]))
        if hits and hits[-1].name == "escape":
            status, note = "none", "orbit escaped the search box"
            break
        w = traj.final
        r = np.asarray(returns) - e[0]
        hit = next((k for k in range(max(n_seen, 1), len(r)) if abs(r[k] - r[k - 1]) < tol * min(1.0, abs(r[k]))), None)
        n_seen = len(r)
        if hit is not None:
            del returns[hit + 1:]
            status, note = "cycle", ""
            break
        if len(r) >= 3 and r[-1] < 1e-9 * max(1.0, abs(e[0])) + 1e-12 and r[-1] < r[-2]:
            status, note = "none", "orbit collapsed onto the equilibrium"
            break
    res = CycleResult(status, float(a), gate, direction, np.asarray(returns), note=note)
    if status != "cycle":
        return res
    # one more lap from the last return, with the period and closure
    x0 = returns[-1]
    start = flow.to_work(np.array([x0, e[1]]))
    lap_ev = [EventSpec(lambda t, w: w[1] - ew[1], rot * direction, True, "section")]
    t_guess = t_chunk
    for _ in range(6):
        traj, hits = integrate_to_event(flow, start, lap_ev, direction * t_guess, tol=integ_tol,
                                        t0=0.0)
        # the first hit can be the start point itself; skip hits at |t| tiny
        hits = [h for h in hits if abs(h.t) > 1e-9 and flow.from_work(h.state)[0] > e[0]]
        if hits:
            break
        t_guess *= 2
        lap_ev = [EventSpec(lap_ev[0].func, lap_ev[0].direction, False, "section")]
    if not hits:
        res.status, res.note = "inconclusive", "final lap did not return"
        return res
    h = hits[0]
    T = abs(h.t)
    res.period = T
    res.closure = float(abs(flow.from_work(h.state)[0] - x0))
    ts = np.linspace(0.0, direction * T, 2001)
    states = flow.from_work(traj(ts))
    if direction < 0:
        ts, states = ts[::-1] + T, states[::-1]
    res.t, res.states = ts, states
    if poly is not None:
        res.region = region_report(states, poly)
    return res


# ---------------------------------------------------------------------------
# auxiliary functions of the Liénard families
# ---------------------------------------------------------------------------

def _critical_points(F) -> np.ndarray:
    dF = sp.diff(F, PY)
    try:
        roots = sp.Poly(dF, PY).real_roots()
        return np.array(sorted(float(r) for r in roots))
    except (sp.PolynomialError, sp.GeneratorsNeeded):
        f = sp.lambdify(PY, dF, "numpy")
        ys = np.linspace(-50, 50, 20001)
        v = f(ys)
        idx = np.nonzero(np.sign(v[:-1]) * np.sign(v[1:]) < 0)[0]
        return np.array([brentq(lambda s: float(f(s)), ys[i], ys[i + 1]) for i in idx])


def F_star(F, y0: float) -> float:
    """min of F over [y0, inf) for y0 >= 0; max of F over (-inf, y0] for y0 < 0."""
    F = sp.sympify(F)
    f = sp.lambdify(PY, F, "math")
    crit = _critical_points(F)
    if y0 >= 0:
        cand = [f(y0)] + [f(c) for c in crit if c > y0]
        tail = sp.limit(F, PY, sp.oo)
        if tail == -sp.oo:
            return -math.inf
        return float(min(cand))
    cand = [f(y0)] + [f(c) for c in crit if c < y0]
    tail = sp.limit(F, PY, -sp.oo)
    if tail == sp.oo:
        return math.inf
    return float(max(cand))


# ---------------------------------------------------------------------------
# predator-prey geometry and the delayed loss of stability
# ---------------------------------------------------------------------------

class Xi0(NamedTuple):
    value: float
    residual: float
    degenerate: bool


def xi0_solve(q: float, r: float, x0: float) -> Xi0:
    """Root xi > q/r of xi^q exp(-r xi) = x0^q exp(-r x0).

    Solved in logarithms, phi(xi) = q ln xi - r xi, by bracketed bisection
    followed by Newton polishing.
    """
    if not (q > 0 and r > 0 and x0 > 0):
        raise ValueError("q, r and x0 must be positive")
    top = q / r
    if math.isclose(x0, top, rel_tol=1e-14):
        return Xi0(top, 0.0, True)
    if x0 > top:
        raise ValueError("x0 must be below q/r")

    def phi(x):
        return q * math.log(x) - r * x

    target = phi(x0)
    g = lambda x: phi(x) - target  # noqa: E731
    hi = 2 * top
    while g(hi) > 0:
        hi *= 2
    xi = brentq(g, top, hi, xtol=1e-15, rtol=1e-15)
    for _ in range(3):
        d = q / xi - r
        if d == 0:
            break
        xi -= g(xi) / d
    return Xi0(float(xi), float(abs(g(xi))), False)


def axis_invariant(p: float, q: float, r: float, x, y):
    """p ln y - q ln x + r x, constant along dy/dx = y (q - r x) / (p x)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("axis invariant needs x > 0 and y > 0")
    out = p * np.log(y) - q * np.log(x) + r * x
    return float(out) if out.ndim == 0 else out


def system_axis_invariant(p: float, q: float, r: float, eps: float, x, y):
    """eps p ln y + q ln x - r x: the near-axis first integral of the predator-prey flow."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    out = eps * p * np.log(y) + q * np.log(x) - r * x
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PredatorPreyGeometry:
    p: float
    q: float
    r: float
    f: sp.Expr
    g: sp.Expr
    h: sp.Expr
    y_star: float
    a_star: float
    x_star: float
    eta: float
    X0: float
    unimodal: bool

    def X(self, y):
        """Slow curve q / (r + g(y) - a* h(y)) on (0, eta)."""
        g, h = _num(self.g), _num(self.h)
        ys = np.atleast_1d(np.asarray(y, float))
        out = np.array([self.q / (self.r + g(v) - self.a_star * h(v)) for v in ys])
        return float(out[0]) if np.ndim(y) == 0 else out

    def xi0(self, x0: float) -> Xi0:
        return xi0_solve(self.q, self.r, x0)

    def fold_y(self, a: float) -> float:
        """Height of the fold of the slow curve at parameter a (g'/h' = a)."""
        ratio = _ratio(self.g, self.h)
        lo, hi = 0.5 * self.y_star, 2.0 * self.y_star
        while ratio(lo) <= a:
            lo *= 0.5
            if lo < 1e-12:
                raise GeometryError(f"no fold for a = {a}", "fold")
        while ratio(hi) >= a:
            hi *= 2
            if hi > 1e6:
                raise GeometryError(f"no fold for a = {a}", "fold")
        return float(brentq(lambda s: ratio(s) - a, lo, hi, xtol=1e-15))

    def early_admissible(self, x0: float, y0: float) -> bool:
        return x0 > 0 and 0 < y0 < self.eta and self.X(y0) < x0 < self.X0

    def late_admissible(self, x0: float, y0: float) -> bool:
        return 0 < y0 < self.y_star and self.x_star < x0 < self.X(y0)

    def as_dict(self) -> dict:
        return {"p": self.p, "q": self.q, "r": self.r, "f": str(self.f), "g": str(self.g),
                "h": str(self.h), "y_star": self.y_star, "a_star": self.a_star,
                "x_star": self.x_star, "eta": self.eta, "X0": self.X0, "unimodal": self.unimodal}


def _ratio(g, h):
    dg, dh = _num(sp.diff(g, PY)), _num(sp.diff(h, PY))
    return lambda y: dg(y) / dh(y)


def _expand_root(fun, lo, hi, limit=1e6):
    """Root of ``fun`` between lo and an upper end doubled until the sign flips."""
    flo = fun(lo)
    while np.sign(fun(hi)) == np.sign(flo):
        hi *= 2
        if hi > limit:
            return None
    return float(brentq(fun, lo, hi, xtol=1e-15))


def predator_prey_setup(p: float, q: float, r: float, g, h, f="y", n_grid: int = 400) -> PredatorPreyGeometry:
    """Turning point, critical parameter and slow curve of the predator-prey family."""
    if min(p, q, r) <= 0:
        raise GeometryError("p, q, r must be positive", "constants")
    g, h, f = (sp.sympify(e, locals={"y": PY}) for e in (g, h, f))
    fn, gn, hn = _num(f), _num(g), _num(h)
    y_star = _expand_root(lambda y: fn(y) - p, 1e-12, 1.0)
    if y_star is None:
        raise GeometryError("f(y) = p has no positive root", "y_star")
    ratio = _ratio(g, h)
    a_star = ratio(y_star)
    D = lambda y: r + gn(y) - a_star * hn(y)  # noqa: E731
    if not D(y_star) > 0:
        raise GeometryError("x* is not positive: r + g(y*) <= a* h(y*)", "x_star_nonpositive")
    x_star = q / D(y_star)

    def check_ratio(top):
        # irrational spacing keeps the grid away from removable singularities such as y = 1
        ys = np.geomspace(1e-3 * top, top, n_grid) * (1 + 1e-3 * math.pi)
        rv = np.array([ratio(v) for v in ys])
        if not (np.all(np.isfinite(rv)) and np.all(np.diff(rv) < 0)):
            raise GeometryError("g'/h' is not strictly decreasing on the sample grid", "ratio_not_decreasing")
        return ys

    check_ratio(4 * y_star)
    eta = _expand_root(D, y_star, 2 * y_star)
    if eta is None:
        raise GeometryError("r + g - a* h has no positive root", "eta")
    ys = check_ratio(2 * eta)
    Xs = np.array([q / D(v) for v in ys if v < eta])
    k = int(np.argmin(Xs))
    unimodal = bool(np.all(np.diff(Xs[: k + 1]) < 0) and np.all(np.diff(Xs[k:]) > 0))
    return PredatorPreyGeometry(float(p), float(q), float(r), f, g, h, float(y_star), float(a_star),
                                float(x_star), float(eta), q / r, unimodal)


def geometry_of(sys: PlanarParamSystem) -> PredatorPreyGeometry:
    m = sys.meta
    return predator_prey_setup(m["p"], m["q"], m["r"], m["g"], m["h"], m["f"])


@dataclass
class DelayedLossResult:
    x0: float
    y0: float
    xi0: float
    x_jump: float
    rel_error: float
    invariant_drift: float
    axis_samples: int
    min_y: float
    t: np.ndarray = field(repr=False)
    states: np.ndarray = field(repr=False)

    def as_dict(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "xi0": self.xi0, "x_jump": self.x_jump,
                "rel_error": self.rel_error, "invariant_drift": self.invariant_drift,
                "axis_samples": self.axis_samples, "min_y": self.min_y}


def simulate_delayed_loss(sys: PlanarParamSystem | None = None, x0: float = 0.5, y0: float = 0.3,
                          a: float | None = None, y_axis: float = 1e-4, t_max: float = 20.0,
                          tol=TOL) -> DelayedLossResult:
    """Drop an orbit from (x0, y0) onto the axis and record where it lifts off.

    The lift-off point is the first upward return of y to the launch height
    ``y0``.  The near-axis first integral is sampled wherever ``y < y_axis``.
    """
    sys = sys or builtin_system("predator_prey")
    m = sys.meta
    if a is None:
        a = geometry_of(sys).a_star
    flow = _Flow(sys, a)
    w0 = flow.to_work(np.array([x0, y0]))
    ev = [EventSpec(lambda t, w: w[1] - w0[1], 1, True, "lift")]
    traj, hits = integrate_to_event(flow, w0, ev, t_max, tol=tol)
    if not hits:
        raise IntegrationError("orbit did not lift off the axis within t_max", traj.t_final, traj.final)
    x_jump = float(hits[0].state[0])
    ts = np.linspace(0, hits[0].t, 20001)
    W = traj(ts)
    S = flow.from_work(W)
    near = W[:, 1] < math.log(y_axis)
    drift = math.nan
    if near.any():
        I = sys.epsilon * m["p"] * W[near, 1] + m["q"] * np.log(S[near, 0]) - m["r"] * S[near, 0]
        drift = float(I.max() - I.min())
    xi = xi0_solve(m["q"], m["r"], x0).value
    return DelayedLossResult(x0, y0, xi, x_jump, abs(x_jump - xi) / xi, drift, int(near.sum()),
                             float(np.exp(W[:, 1].min())), ts, S)


# ---------------------------------------------------------------------------
# magnitude continuation
# ---------------------------------------------------------------------------

@dataclass
class CanardMagnitudeResult:
    target: float | tuple
    mode: str
    tag: str
    a_eps: float
    achieved: float
    closure: float
    period: float
    t: np.ndarray = field(repr=False)
    states: np.ndarray = field(repr=False)
    samples: list = field(default_factory=list)
    monotone: bool = True
    gates: list = field(default_factory=list)
    bracket: tuple = ()
    n_probes: int = 0

    @property
    def target_value(self) -> float:
        return float(self.target[0] if isinstance(self.target, tuple) else self.target)

    @property
    def error(self) -> float:
        return abs(self.achieved - self.target_value)

    @property
    def gates_sound(self) -> bool:
        return all(g.det > 0 for g in self.gates)

    def as_dict(self) -> dict:
        return {"target": list(self.target) if isinstance(self.target, tuple) else self.target,
                "mode": self.mode, "tag": self.tag, "a_eps": self.a_eps, "achieved": self.achieved,
                "error": self.error, "closure": self.closure, "period": self.period,
                "monotone": self.monotone, "gates_sound": self.gates_sound,
                "bracket": list(self.bracket), "n_probes": self.n_probes,
                "samples": [[a, _json_float(d)] for a, d in self.samples]}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y"])
            for ti, (x, y) in zip(self.t, self.states):
                w.writerow([f"{ti:.17g}", f"{x:.17g}", f"{y:.17g}"])


def _json_float(v):
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


@dataclass(frozen=True)
class _Problem:
    launch: np.ndarray  # physical launch point
    level: float  # height of the magnitude section
    extremum: str  # "max" or "min"
    tag: str
    log: bool

    def section_y(self, sys, a) -> float:
        if self.log:
            return geometry_of_cached(sys).fold_y(a)
        return _lienard_fold(sys) - a


_GEOM_CACHE: dict = {}


def geometry_of_cached(sys):
    key = id(sys.meta)
    if key not in _GEOM_CACHE:
        _GEOM_CACHE[key] = geometry_of(sys)
    return _GEOM_CACHE[key]


def _lienard_fold(sys) -> float:
    """Critical point of F nearest 0 (the lower turning point at a = 0)."""
    crit = _critical_points(sys.meta["F"])
    if crit.size == 0:
        raise GeometryError("F has no turning point", "fold")
    return float(crit[np.argmin(np.abs(crit))])


def _problem(sys: PlanarParamSystem, target, mode: str) -> _Problem:
    if mode not in ("early", "late"):
        raise ValueError("mode must be 'early' or 'late'")
    fam = sys.meta.get("family")
    point = isinstance(target, (tuple, list, np.ndarray))
    if fam == "predator_prey":
        if not point:
            raise AdmissibilityError("predator-prey targets are points (x0, y0)", "point-required")
        x0, y0 = map(float, target)
        geo = geometry_of_cached(sys)
        if mode == "early" and not geo.early_admissible(x0, y0):
            raise AdmissibilityError("early target needs X(y0) < x0 < X(0)", "outside-early-band")
        if mode == "late" and not geo.late_admissible(x0, y0):
            raise AdmissibilityError("late target needs 0 < y0 < y*, x* < x0 < X(y0)", "outside-late-band")
        return _Problem(np.array([x0, y0]), y0, "max" if mode == "early" else "min",
                        "ekm" if mode == "early" else "lk2", True)
    if fam != "lienard":
        raise AdmissibilityError("magnitude continuation needs a Liénard or predator-prey system", "family")
    F = sys.meta["F"]
    Fn = sp.lambdify(PY, F, "math")
    if point:
        x0, y0 = map(float, target)
        if mode == "early" and not x0 > Fn(y0):
            raise AdmissibilityError("early target must lie right of x = F(y)", "outside-early-band")
        if mode == "late":
            fs = F_star(F, y0)
            lo, hi = min(fs, Fn(y0)), max(fs, Fn(y0))
            if not (fs < x0 < Fn(y0)):
                raise AdmissibilityError(
                    f"late target must lie strictly between F*(y0) = {fs:.6g} and F(y0) = {Fn(y0):.6g}"
                    f" (band [{lo:.6g}, {hi:.6g}])", "outside-late-band")
        return _Problem(np.array([x0, y0]), y0, "max" if mode == "early" else "min",
                        "ekm" if mode == "early" else "lk2", False)
    alpha = float(target)
    if not alpha > 0:
        raise AdmissibilityError("magnitude must be positive", "nonpositive-magnitude")
    if sys.meta.get("kind") == "bimodal":
        mu = sys.meta["mu"]
        if alpha > Fn(mu):
            raise AdmissibilityError(f"magnitude {alpha} exceeds F(mu) = {Fn(mu):.6g}",
                                     "magnitude-exceeds-F(mu)")
        if mode == "late":
            return _Problem(np.array([alpha, mu]), mu, "min", "lk", False)
    elif mode == "late":
        raise AdmissibilityError("late magnitude needs a bimodal F (or a point target)", "late-undefined")
    return _Problem(np.array([alpha, 0.0]), 0.0, "max", "ek", False)


class _Shooter:
    """Two-sided shooting from the launch point to the fold section."""

    def __init__(self, sys, prob: _Problem, t_max: float, tol, box: float):
        self.sys, self.prob, self.t_max, self.tol, self.box = sys, prob, t_max, tol, box
        self.probes: list[tuple[float, float]] = []
        self.gates: list[EquilibriumGate] = []
        self._e = None

    def _equilibrium(self, a):
        e = _newton(self.sys, a, self._e) if self._e is not None else None
        g = _gate_at(self.sys, a, e) if e is not None else equilibrium_gate(self.sys, a)
        self._e = g.equilibrium
        self.gates.append(g)
        return g

    def legs(self, a):
        gate = self._equilibrium(a)
        flow = _Flow(self.sys, a)
        ys = self.prob.section_y(self.sys, a)
        sec = math.log(ys) if flow.log else ys
        ew = flow.to_work(gate.equilibrium)
        w0 = flow.to_work(self.prob.launch)
        # forward orbits pass the fold going up in the Liénard families and
        # going down in predator-prey; backward orbits the opposite way
        up = -1 if flow.log else 1
        box = self.box
        scale = 1e-7 * max(1.0, float(np.linalg.norm(ew)))
        out = []
        for sgn in (1, -1):
            ev = [
                EventSpec(lambda t, w: w[1] - sec, up * sgn, True, "section"),
                EventSpec(lambda t, w: np.max(np.abs(flow.from_work(w))) - box, 1, True, "escape"),
                EventSpec(lambda t, w: np.linalg.norm(w - ew) - scale, -1, True, "trapped"),
            ]
            try:
                traj, hits = integrate_to_event(flow, w0, ev, sgn * self.t_max, tol=self.tol)
            except IntegrationError:
                out.append(("escape", math.nan, None, None))
                continue
            if hits and hits[-1].name == "section":
                out.append(("section", float(flow.from_work(hits[-1].state)[0]), traj, hits[-1]))
            elif hits and hits[-1].name == "escape":
                out.append(("escape", math.nan, traj, None))
            else:
                out.append(("trapped", math.nan, traj, None))
        return out

    def d(self, a) -> float:
        (kf, xf, *_), (kb, xb, *_) = self.legs(a)
        # orient along the section towards the inside of the slow curve (+x):
        # an orbit caught by the equilibrium counts as +inf, an escaping one as -inf
        xf = xf if kf == "section" else (math.inf if kf == "trapped" else -math.inf)
        xb = xb if kb == "section" else (math.inf if kb == "trapped" else -math.inf)
        val = xf - xb if math.isfinite(xf) or math.isfinite(xb) else math.nan
        self.probes.append((float(a), float(val)))
        return float(val)


def magnitude_continuation(
    sys: PlanarParamSystem,
    target,
    mode: str = "early",
    a_bracket: Sequence[float] | None = None,
    eps: float | None = None,
    n_samples: int = 9,
    closure_tol: float = 1e-7,
    t_max: float = 60.0,
    tol=TOL,
    box: float = 100.0,
) -> CanardMagnitudeResult:
    """Locate a periodic canard of prescribed magnitude by bisection on ``a``.

    ``target`` is a magnitude ``alpha`` (Liénard families) or a point
    ``(x0, y0)``.  The functional bisected is the mismatch, along the fold
    section, between the forward and the backward orbit through the launch
    point; its zero closes the orbit.
    """
    if eps is not None:
        sys = sys.with_epsilon(eps)
    prob = _problem(sys, target, mode)
    a_lo, a_hi = map(float, a_bracket if a_bracket is not None else sys.param_range)
    bg = gate_bracket(sys, a_lo, a_hi)
    if not bg.passed:
        raise GateError(f"bracket [{a_lo}, {a_hi}] fails the det/trace gate "
                        f"(det {bg.lo.det:.3g}, {bg.hi.det:.3g}; trace product {bg.trace_product:.3g})",
                        "gate")
    sh = _Shooter(sys, prob, t_max, tol, box)
    grid = np.linspace(a_lo, a_hi, max(n_samples, 2))
    vals = np.array([sh.d(a) for a in grid])
    samples = list(zip(grid.tolist(), vals.tolist()))
    if np.isnan(vals[0]) or np.isnan(vals[-1]) or np.sign(vals[0]) == np.sign(vals[-1]):
        raise BracketError("bracket does not straddle the target: functional has the same sign "
                           f"at both ends ({vals[0]:.3g}, {vals[-1]:.3g})", "no-straddle")
    seq = vals[~np.isnan(vals)].tolist()
    pairs = list(zip(seq, seq[1:]))
    monotone = all(u >= v for u, v in pairs) or all(u <= v for u, v in pairs)
    k = next(i for i in range(len(vals) - 1)
             if not np.isnan(vals[i]) and not np.isnan(vals[i + 1]) and np.sign(vals[i]) != np.sign(vals[i + 1]))
    lo, hi, dlo, dhi = grid[k], grid[k + 1], vals[k], vals[k + 1]
    while not (math.isfinite(dlo) and math.isfinite(dhi)):
        mid = 0.5 * (lo + hi)
        dm = sh.d(mid)
        if math.isnan(dm):
            raise BracketError(f"functional undefined at a = {mid}", "undefined")
        if dm == 0:
            lo = hi = mid
            dlo = dhi = 0.0
            break
        if np.sign(dm) == np.sign(dlo):
            lo, dlo = mid, dm
        else:
            hi, dhi = mid, dm
        if hi - lo < 1e-15:
            break
    if lo == hi:
        a_eps = lo
    else:
        big = 10.0 * box

        def fin(a):
            v = sh.d(a)
            return v if math.isfinite(v) else math.copysign(big, v) if not math.isnan(v) else big

        a_eps = brentq(fin, lo, hi, xtol=1e-16, rtol=1e-15, maxiter=200)
    (kf, xf, tf, hf), (kb, xb, tb, hb) = sh.legs(a_eps)
    if kf != "section" or kb != "section":
        raise BracketError("orbit did not reach the fold section at the located parameter", "undefined")
    closure = abs(xf - xb)
    if closure > closure_tol:
        raise BracketError(f"closure {closure:.3g} above tolerance {closure_tol:.3g}", "no-closure")
    flow = _Flow(sys, a_eps)
    Tf, Tb = hf.t, -hb.t
    sf = np.linspace(0, Tf, 3001)
    sb = np.linspace(-Tb, 0, 3001)
    legF = flow.from_work(tf(sf))
    legB = flow.from_work(tb(sb))
    t = np.concatenate([sf, Tf + (sb[1:] + Tb)])
    states = np.vstack([legF, legB[1:]])
    achieved = _extremum_on_level(states, prob.level, prob.extremum)
    return CanardMagnitudeResult(
        target=tuple(map(float, target)) if isinstance(target, (tuple, list, np.ndarray)) else float(target),
        mode=mode, tag=prob.tag, a_eps=float(a_eps), achieved=achieved, closure=float(closure),
        period=float(Tf + Tb), t=t, states=states, samples=samples, monotone=monotone,
        gates=[bg.lo, bg.hi, *sh.gates], bracket=(a_lo, a_hi), n_probes=len(sh.probes),
    )


def _extremum_on_level(states, level, kind) -> float:
    y = states[:, 1] - level
    xs = []
    for i in range(len(y) - 1):
        if y[i] == 0:
            xs.append(states[i, 0])
        elif y[i] * y[i + 1] < 0:
            s = y[i] / (y[i] - y[i + 1])
            xs.append(states[i, 0] + s * (states[i + 1, 0] - states[i, 0]))
    if y[-1] == 0:
        xs.append(states[-1, 0])
    if not xs:
        return math.nan
    return float(max(xs) if kind == "max" else min(xs))


def lienard_oracle_H(x, y, eps: float):
    """First integral (y^2 - x - eps/2) exp(-2x/eps) of x' = y, eps y' = -x + y^2."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    return (y**2 - x - eps / 2) * np.exp(-2 * x / eps)
