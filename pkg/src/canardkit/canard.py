"""Periodic canards near a transversal crossing of the reduced branches.

The section chart (u, v) uses flow times of the attractive and repulsive
reduced fields.  The regularized return map W_eps is evaluated by event
detection on the full system.  Its boundary winding certifies a fixed point,
and the orbit itself is refined by two-sided shooting.  This is needed
because forward runs cannot resolve the canard strip: its width is of
order exp(-C/eps).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import root
from scipy.spatial import cKDTree

from .degree import DegreeError, DegreeResult, PolygonBoundary, fixed_point_degree, product_degree, winding_number
from .integrate import EventSpec, IntegrationError, integrate_to_event
from .slowgeom import (
    MARGIN,
    IntersectionRecord,
    LocalFrame,
    ReducedBranch,
    build_frame,
    certify_nondegeneracy,
    find_critical_points,
    find_intersections,
    hausdorff,
    lift_to_sheet,
    trace_reduced_branch,
)
from .sysdef import SlowFastSystem, attach_perturbation, perturbation_from_spec


class ChartError(RuntimeError):
    def __init__(self, message, suggested_alpha=None):
        super().__init__(message)
        self.suggested_alpha = suggested_alpha


class ReturnMapError(RuntimeError):
    pass


class CanardError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# geometry bundle
# ---------------------------------------------------------------------------

@dataclass
class Geometry:
    """Everything that only depends on the eps = 0 problem."""

    system: SlowFastSystem
    frame: LocalFrame
    ga: ReducedBranch
    gr: ReducedBranch
    records: list
    certification: dict

    def record(self, index: int = 0) -> IntersectionRecord:
        return self.records[index]


def prepare_geometry(sys: SlowFastSystem, arclength: float = 12.0, p_seed: float = 1e-6) -> Geometry:
    """Critical point, certification, both branches and their crossings."""
    cps = find_critical_points(sys)
    if not cps:
        raise CanardError("no critical point in the bounding box")
    cp = min(cps, key=lambda c: np.linalg.norm(c.w))
    rep = certify_nondegeneracy(sys, cp)
    ga = trace_reduced_branch(sys, cp, "attractive", arclength, p_seed, frame=rep.frame)
    gr = trace_reduced_branch(sys, cp, "repulsive", arclength, p_seed, frame=rep.frame)
    recs = find_intersections(ga, gr)
    return Geometry(sys, rep.frame, ga, gr, recs, rep.as_dict())


# ---------------------------------------------------------------------------
# reduced flows and the (u, v) chart
# ---------------------------------------------------------------------------

@dataclass
class SectionChart:
    system: SlowFastSystem
    record: IntersectionRecord
    ga: ReducedBranch
    gr: ReducedBranch
    frame: LocalFrame
    alpha: float
    h0: float
    tube_c: float
    omega0_radius: float
    fall_threshold: float
    newton_tol: float = 1e-12
    guess_window: tuple | None = None

    @property
    def tau(self) -> float:
        return self.record.tau

    @property
    def sigma(self) -> float:
        return self.record.sigma

    @property
    def sgnA(self) -> int:
        return 1 if self.record.A > 0 else -1

    @property
    def pq_star(self) -> np.ndarray:
        return self.record.pq_star

    # -- reduced flows in (p, q) -------------------------------------------
    def _flow(self, pq, t: float, kind: str):
        """End point and end velocity (in p, q) of the reduced flow on one sheet."""
        h_guess = self.record.h_tau if kind == "a" else self.record.h_sigma
        w0 = lift_to_sheet(self.system, self.frame, pq, h_guess)
        sys = self.system
        if t == 0.0:
            return np.asarray(pq, float), self.frame.pq_velocity(sys.reduced("X", w0))

        def f(_, w):
            return sys.reduced_velocity(w)

        sol = solve_ivp(f, (0.0, t), w0, method="DOP853", rtol=1e-12, atol=1e-14)
        if sol.status != 0:
            raise ChartError(f"reduced flow failed: {sol.message}")
        w1 = sol.y[:, -1]
        return self.frame.to_pqh(w1)[:2], self.frame.pq_velocity(sys.reduced("X", w1))

    def flow_a(self, pq, t):
        return self._flow(pq, t, "a")

    def flow_r(self, pq, t):
        return self._flow(pq, t, "r")

    def limiting_point(self, t: float) -> np.ndarray:
        """w*(t) in (p, q): Γ_a for t <= 0, Γ_r for t >= 0."""
        br = self.ga if t <= 0 else self.gr
        return br.pq_at(t)

    # -- chart --------------------------------------------------------------
    def _linear_uv(self, pq):
        fa, fr = self.record.vel_a, self.record.vel_r
        M = np.column_stack([-fa, -fr])
        return np.linalg.solve(M, np.asarray(pq, float) - self.pq_star)

    def _time_to_branch(self, pq, kind: str, t0: float, s0: float):
        target = self.gr if kind == "a" else self.ga
        t, s = t0, s0
        for _ in range(30):
            end, vel = self._flow(pq, t, kind)
            G = end - target.pq_at(s)
            J = np.column_stack([vel, -target.vel_at(s)])
            d = np.linalg.solve(J, G)
            t, s = t - d[0], s - d[1]
            if not target.contains_time(s):
                raise ChartError("chart Newton left the branch", self.alpha / 2)
            if np.max(np.abs(d)) < self.newton_tol:
                return t, s
        raise ChartError("chart Newton did not converge", self.alpha / 2)

    def _guess_u(self, pq):
        """Linearize at the nearest sample of Γ_r around sigma: x = Γ_r(s) - u f_a."""
        gr, a = self.gr, self.alpha
        lo, hi = self.guess_window or (self.sigma - 4 * a, self.sigma + 4 * a)
        sel = np.flatnonzero((gr.t >= lo) & (gr.t <= hi))
        k = sel[np.argmin(np.linalg.norm(gr.pq[sel] - pq, axis=1))]
        w = lift_to_sheet(self.system, self.frame, pq, self.record.h_tau)
        fa = self.frame.pq_velocity(self.system.reduced("X", w))
        M = np.column_stack([gr.vel[k], -fa])
        ds, u = np.linalg.solve(M, np.asarray(pq, float) - gr.pq[k])
        return u, gr.t[k] + ds

    def uv(self, pq) -> np.ndarray:
        """Chart coordinates: u = attractive flow time to Γ_r, v = repulsive flow time to Γ_a."""
        u0, s0 = self._guess_u(pq)
        u, s1 = self._time_to_branch(pq, "a", u0, s0)
        v, _ = self._time_to_branch(pq, "r", self.sigma - s1, self.tau - u)
        return np.array([u, v])

    def inverse(self, uv) -> np.ndarray:
        """Point with chart coordinates ``uv``; solves flow_a(Γ_r(s1), -u) = flow_r(Γ_a(s2), -v)."""
        u, v = map(float, uv)
        if u == 0.0 and v == 0.0:
            return self.pq_star.copy()

        def G(s):
            a, _ = self.flow_a(self.gr.pq_at(s[0]), -u)
            b, _ = self.flow_r(self.ga.pq_at(s[1]), -v)
            return a - b

        guess = np.array([self.sigma - v, self.tau - u])
        sol = root(G, guess, method="hybr", options={"xtol": 1e-13})
        # hybr may report slow progress once the residual is already at rounding level
        if not np.all(np.isfinite(sol.x)) or np.max(np.abs(G(sol.x))) > 1e-10:
            raise ChartError(f"chart inverse failed at (u, v) = ({u}, {v})", self.alpha / 2)
        out, _ = self.flow_a(self.gr.pq_at(sol.x[0]), -u)
        return out

    def boundary(self, u_range=None, v_range=None, per_side: int = 3) -> PolygonBoundary:
        """Polygon in (p, q) through exact chart-inverse points of a (u, v) rectangle."""
        a = self.alpha / 2
        (u0, u1), (v0, v1) = u_range or (-a, a), v_range or (-a, a)
        pts = []
        for k in range(per_side):
            pts.append((u0 + (u1 - u0) * k / per_side, v0))
        for k in range(per_side):
            pts.append((u1, v0 + (v1 - v0) * k / per_side))
        for k in range(per_side):
            pts.append((u1 - (u1 - u0) * k / per_side, v1))
        for k in range(per_side):
            pts.append((u0, v1 - (v1 - v0) * k / per_side))
        return PolygonBoundary(np.array([self._inverse_cached(p) for p in pts]))

    def _inverse_cached(self, uv):
        key = (float(uv[0]), float(uv[1]))
        cache = self.__dict__.setdefault("_inv_cache", {})
        if key not in cache:
            cache[key] = self.inverse(key)
        return cache[key]

    def in_parallelogram(self, pq, scale: float = 1.0) -> bool:
        u, v = self.uv(pq)
        return max(abs(u), abs(v)) < scale * self.alpha / 2

    def side_of(self, pq) -> str:
        """'R-', 'R+' or 'interior/other' by the v coordinate."""
        u, v = self.uv(pq)
        a = self.alpha / 2
        if abs(abs(v) - a) < 1e-9 and abs(u) <= a + 1e-12:
            return "R-" if np.sign(v) == self.sgnA else "R+"
        return "other"

    def as_dict(self) -> dict:
        return {"alpha": self.alpha, "h0": self.h0, "tau": self.tau, "sigma": self.sigma,
                "A": self.record.A, "tube_c": self.tube_c, "omega0_radius": self.omega0_radius,
                "fall_threshold": self.fall_threshold, "pq_star": self.pq_star.tolist()}


def build_section_chart(sys: SlowFastSystem, rec: IntersectionRecord, branches, alpha: float | None = None,
                        tube_c: float | None = None) -> SectionChart:
    """Chart around the crossing ``rec``; ``alpha`` defaults to the largest validated value."""
    ga, gr = branches
    if abs(rec.A) <= MARGIN:
        raise ChartError("non-transversal crossing (|A| too small)")
    frame = ga.frame or build_frame(sys, None)
    h0 = 0.5 * (rec.h_tau + rec.h_sigma)
    ydot = np.concatenate([np.abs(ga.hdot), np.abs(gr.hdot)])
    c = tube_c if tube_c is not None else 3.0 * float(ydot[np.isfinite(ydot)].max())
    r0 = 0.25 * float(np.linalg.norm(rec.x_star - frame.origin[:2]))
    user = alpha is not None
    alpha = float(alpha) if user else min(0.05 * min(ga.arclength, gr.arclength), rec.sigma / 4, -rec.tau / 4)
    for _ in range(12):
        sel = (gr.t >= 0) & (gr.t <= rec.sigma + 3 * alpha)
        W = np.array([frame.from_pqh((p, q, h)) for (p, q), h in zip(gr.pq[sel], gr.h[sel])])
        far = np.linalg.norm(W[:, :2] - frame.origin[:2], axis=1) >= r0
        Yy = np.array([sys.reduced("Yy", w) for w in W[far]]) if far.any() else np.array([1.0])
        chart = SectionChart(sys, rec, ga, gr, frame, alpha, h0, c, r0, 0.5 * float(Yy.min()))
        try:
            _validate_chart(chart)
            return chart
        except ChartError as exc:
            if user:
                raise ChartError(f"{exc}; alpha = {alpha} too large", 0.8 * alpha) from exc
            alpha *= 0.8
    raise ChartError("could not validate any alpha", alpha)


def _validate_chart(chart: SectionChart) -> None:
    a = chart.alpha
    if chart.sigma + 3 * a > chart.gr.t[-1] or chart.tau - 2 * a < chart.ga.t[0]:
        raise ChartError("branches too short for the chart", a / 2)
    if chart.sigma - 3 * a <= 0 or chart.tau + 2 * a >= 0:
        raise ChartError("alpha too large relative to tau, sigma", a / 2)
    for uv in [(a, a), (-a, a), (a, -a), (-a, -a), (0.0, 2 * a), (0.0, -2 * a)]:
        pq = chart.inverse(uv)
        back = chart.uv(pq)
        if np.max(np.abs(back - uv)) > 1e-8:
            raise ChartError("chart round trip failed on Pi(2 alpha)", a / 2)
        if not chart.system.box.contains(chart.frame.from_pqh((*pq, chart.h0))):
            raise ChartError("chart leaves the bounding box", a / 2)


# ---------------------------------------------------------------------------
# exit time s_eps and the regularized return map W_eps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReturnMapEval:
    pq0: np.ndarray
    z0: np.ndarray | None
    s: float
    case: int
    blend: float
    output: np.ndarray
    z_out: np.ndarray | None
    classification: str
    t0: float | None = None
    t1: float | None = None
    t2: float | None = None

    def as_dict(self) -> dict:
        f = lambda a: None if a is None else np.asarray(a).tolist()  # noqa: E731
        return {"pq0": f(self.pq0), "z0": f(self.z0), "s": self.s, "case": self.case, "blend": self.blend,
                "output": f(self.output), "z_out": f(self.z_out), "classification": self.classification,
                "t0": self.t0, "t1": self.t1, "t2": self.t2}


def _section_state(chart: SectionChart, pq, z0, dim):
    w = chart.frame.from_pqh((pq[0], pq[1], chart.h0))
    if dim > 3:
        z = np.zeros(dim - 3) if z0 is None else np.atleast_1d(np.asarray(z0, float))
        return np.r_[w, z]
    return w


def _yhat(sys, fr, s):
    return fr.ysign * sys.reduced("Y", s[:3])


def _staged_fall(sys, chart: SectionChart, state, t_start: float, t_end: float, tol, c: float | None = None,
                 r0: float | None = None, theta: float | None = None):
    """Run from the section until escape, fall, or ``t_end``.

    Returns ``(kind, t0, t1, s1)`` with kind one of "escape", "fall" or
    "none"; t0 is the exit time from the ball around the turning point and
    s1 the state at t1.  The first event wins.
    """
    fr = chart.frame
    c = chart.tube_c * sys.epsilon if c is None else c
    r0 = chart.omega0_radius if r0 is None else r0
    theta = chart.fall_threshold if theta is None else theta
    box = sys.box
    lo, hi = (np.asarray(box.lows), np.asarray(box.highs)) if box is not None else (None, None)
    xc = fr.origin[:2]

    escape = EventSpec(lambda t, s: _yhat(sys, fr, s) - c, +1, True, "escape")
    guard = [EventSpec(lambda t, s: float(np.min(np.r_[s - lo, hi - s])), -1, True, "box")] if lo is not None else []
    ball = lambda t, s: float(np.hypot(*(s[:2] - xc))) - r0  # noqa: E731

    def run(s0, t0, events):
        if t_end <= t0:
            return None
        _, hits = integrate_to_event(sys, s0, events, t_end, t0=t0, tol=tol)
        hits = [h for h in hits if events[h.index].terminal]
        h = hits[0] if hits else None
        if h is not None and h.name == "box":
            raise ReturnMapError("trajectory left the bounding box without an escape event")
        return h

    # stage A: until the trajectory enters the ball around the turning point
    h = run(state, t_start, [escape, EventSpec(ball, -1, True, "enter"), *guard])
    if h is None:
        raise ReturnMapError("trajectory never reached the turning-point neighbourhood")
    if h.name == "escape":
        return "escape", None, h.t, h.state
    # stage B: until it leaves the ball again
    h = run(h.state, h.t, [escape, EventSpec(ball, +1, True, "exit"), *guard])
    if h is None:
        return "none", None, None, None
    if h.name == "escape":
        return "escape", None, h.t, h.state
    t0, s0 = h.t, h.state
    yh, yy = _yhat(sys, fr, s0), sys.reduced("Yy", s0[:3])
    if yh > c:
        return "escape", t0, t0, s0
    if yh < -c or yy < theta:
        return "fall", t0, t0, s0
    # stage C: along the repulsive sheet until escape or fall
    fall = [EventSpec(lambda t, s: _yhat(sys, fr, s) + c, -1, True, "fall"),
            EventSpec(lambda t, s: sys.reduced("Yy", s[:3]) - theta, -1, True, "fall")]
    h = run(s0, t0, [escape, *fall, *guard])
    if h is None:
        return "none", t0, None, None
    return ("escape" if h.name == "escape" else "fall"), t0, h.t, h.state


def _section_return(sys, chart: SectionChart, s1, t1: float, h0: float, t_stop: float, tol):
    """First downward crossing of h = h0 after ``t1`` (None if not before ``t_stop``)."""
    fr = chart.frame
    if t_stop <= t1:
        return None
    sec = EventSpec(lambda t, st: fr.to_pqh(st)[2] - h0, -1, True, "section")
    events = [sec]
    if sys.box is not None:
        lo, hi = np.asarray(sys.box.lows), np.asarray(sys.box.highs)
        events.append(EventSpec(lambda t, s: float(np.min(np.r_[s - lo, hi - s])), -1, True, "box"))
    _, hits = integrate_to_event(sys, s1, events, t_stop, t0=t1, tol=tol)
    h = next((h for h in hits if events[h.index].terminal), None)
    return h if (h is not None and h.name == "section") else None


def eval_return_map(sys: SlowFastSystem, chart: SectionChart, pq0, z0=None, tol=(1e-9, 1e-11),
                    shift: "ShiftOperator | None" = None) -> ReturnMapEval:
    """Regularized return map W_eps at (p0, q0) on the section h = h0 (time starts at tau)."""
    fr, a, sig, tau = chart.frame, chart.alpha, chart.sigma, chart.tau
    state = _section_state(chart, pq0, z0, sys.dim)
    kind, t0, t1, s1 = _staged_fall(sys, chart, state, tau, sig + 3 * a, tol)
    case = {"escape": 1, "none": 3}.get(kind)
    if case is None:
        case = 2 if t1 < sig - 3 * a else 4
    t2 = None
    raw = None
    z_raw = None
    if case in (1, 3):
        s = sig + 2 * a
    elif case == 2:
        s = sig - 2 * a
    else:
        # first downward return to the section after the fall, clamped to [sigma - 2a, sigma + 2a]
        h = _section_return(sys, chart, s1, t1, chart.h0, sig + 2 * a, tol)
        t2 = h.t if h is not None else sig + 2 * a
        s = min(max(t2, sig - 2 * a), sig + 2 * a)
        if s == t2 and h is not None:
            raw = fr.to_pqh(h.state)[:2]
            z_raw = h.state[3:] if sys.dim > 3 else None
    lam = min(max((abs(s - sig) - 1.5 * a) / (0.5 * a), 0.0), 1.0)
    wstar = chart.limiting_point(s)
    out = wstar if raw is None else (1 - lam) * raw + lam * wstar
    z_out = None
    if sys.dim > 3:
        zs = shift(np.zeros(sys.dim - 3) if z0 is None else z0) if shift is not None else None
        if z_raw is None:
            z_out = zs
        else:
            z_out = z_raw if zs is None else (1 - lam) * z_raw + lam * zs
    cls = {1: "destabilizing", 2: "stabilizing", 3: "destabilizing", 4: "near-canard"}[case]
    return ReturnMapEval(np.asarray(pq0, float), None if z0 is None else np.atleast_1d(z0), float(s), case,
                         float(lam), np.asarray(out, float), z_out, cls, t0, t1, t2)


def output_uv(chart: SectionChart, ev: ReturnMapEval) -> np.ndarray:
    """Chart coordinates of W_eps(p0, q0); clamped outputs w*(s) sit at (0, sigma - s) exactly."""
    if ev.blend == 1.0:
        return np.array([0.0, chart.sigma - ev.s])
    return chart.uv(ev.output)


def return_map_winding(sys: SlowFastSystem, chart: SectionChart, u_range=None, v_range=None, z0=None,
                       per_side: int = 2, refine_tol: float = 1e-5, cache: dict | None = None) -> DegreeResult:
    """Winding of id - W_eps along the boundary of a (u, v) rectangle (default: Π(α)).

    The field is written in chart coordinates, uv - uv(W_eps(uv)); the
    fixed-point index does not depend on the chart.
    """
    a = chart.alpha / 2
    (u0, u1), (v0, v1) = u_range or (-a, a), v_range or (-a, a)
    poly = PolygonBoundary.rectangle((u0, v0), (u1, v1), per_side)
    cache = {} if cache is None else cache

    def field_(uv):
        key = (float(uv[0]), float(uv[1]))
        if key not in cache:
            pq = chart.inverse(key)
            cache[key] = output_uv(chart, eval_return_map(sys, chart, pq, z0))
        return np.asarray(uv, float) - cache[key]

    return winding_number(field_, poly, refine_tol=refine_tol, max_depth=40)


def quadrisect(field_uv, rect, degree: int, min_size: float, max_depth: int = 40, per_side: int = 2,
               refine_tol: float = 1e-5):
    """Shrink ``rect`` = ((u0, u1), (v0, v1)) while keeping the winding of ``field_uv`` nonzero.

    Additivity of the degree is used: once three quarters have winding zero,
    the fourth inherits ``degree`` without being evaluated.  Quarters whose
    winding is undefined (field vanishing on their boundary) are skipped.
    """
    history = [(rect, degree)]
    depth = 0
    while max(rect[0][1] - rect[0][0], rect[1][1] - rect[1][0]) > min_size:
        if depth >= max_depth:
            raise CanardError("quadrisection exhausted its depth budget")
        (u0, u1), (v0, v1) = rect
        um, vm = 0.5 * (u0 + u1), 0.5 * (v0 + v1)
        quads = [((u0, um), (v0, vm)), ((um, u1), (v0, vm)), ((u0, um), (vm, v1)), ((um, u1), (vm, v1))]
        acc, chosen, undefined = 0, None, False
        for k, q in enumerate(quads):
            if k == 3 and not undefined:
                deg = degree - acc
            else:
                poly = PolygonBoundary.rectangle((q[0][0], q[1][0]), (q[0][1], q[1][1]), per_side)
                try:
                    deg = winding_number(field_uv, poly, refine_tol=refine_tol, max_depth=40).degree
                except DegreeError:
                    undefined, deg = True, 0
            if deg:
                chosen = (q, deg)
                break
            acc += deg
        if chosen is None:
            break
        rect, degree = chosen
        history.append(chosen)
        depth += 1
    return rect, history


def return_map_quadrisection(sys: SlowFastSystem, chart: SectionChart, z0=None, min_size: float | None = None,
                             max_depth: int = 40, per_side: int = 2):
    """Quadrisection of Π(α) for id - W_eps in chart coordinates.

    Only meaningful while the canard strip is resolved by forward runs; for
    smaller eps the accepted jumps across the strip can steer it to the wrong
    quarter, which is why :func:`locate_periodic_canard` does not use it by default.
    """
    cache: dict = {}

    def field_uv(uv):
        key = (float(uv[0]), float(uv[1]))
        if key not in cache:
            cache[key] = output_uv(chart, eval_return_map(sys, chart, chart.inverse(key), z0))
        return np.asarray(uv, float) - cache[key]

    a = chart.alpha / 2
    rect = ((-a, a), (-a, a))
    top = winding_number(field_uv, PolygonBoundary.rectangle((-a, -a), (a, a), per_side), refine_tol=1e-5)
    if top.degree == 0:
        raise CanardError("winding of id - W_eps on the boundary is zero (no topological certificate)")
    min_size = min_size if min_size is not None else chart.alpha / 64
    rect, hist = quadrisect(field_uv, rect, top.degree, min_size, max_depth, per_side)
    return rect, hist, len(cache)


# ---------------------------------------------------------------------------
# shift operator along the limiting solution
# ---------------------------------------------------------------------------

@dataclass
class ShiftOperator:
    """S_T for z' = Z(x*(t), y*(t), z, 0) over t in [tau, sigma]."""

    system: SlowFastSystem
    chart: SectionChart

    @property
    def T(self) -> float:
        return self.chart.sigma - self.chart.tau

    def __call__(self, z0) -> np.ndarray:
        sys, ch = self.system, self.chart
        z0 = np.atleast_1d(np.asarray(z0, float))
        d = sys.aux_dim

        def f(t, z):
            pq = ch.limiting_point(t)
            br = ch.ga if t <= 0 else ch.gr
            w = ch.frame.from_pqh((pq[0], pq[1], float(br.h_at(t))))
            vals = sys._full(w[0], w[1], w[2], *z, 0.0)
            return np.asarray(vals[3:3 + d], float)

        sol = solve_ivp(f, (ch.tau, 0.0), z0, method="DOP853", rtol=1e-12, atol=1e-14)
        sol2 = solve_ivp(f, (0.0, ch.sigma), sol.y[:, -1], method="DOP853", rtol=1e-12, atol=1e-14)
        return sol2.y[:, -1].copy()


# ---------------------------------------------------------------------------
# two-sided shooting for the periodic orbit
# ---------------------------------------------------------------------------

@dataclass
class PeriodicCanard:
    epsilon: float
    fixed_point: np.ndarray
    z_hat: np.ndarray | None
    t: np.ndarray
    states: np.ndarray
    T_min: float
    closure: float
    certificate: dict
    uv: np.ndarray
    return_time: float
    winding: DegreeResult | None = None
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"epsilon": self.epsilon, "fixed_point": self.fixed_point.tolist(),
                "z_hat": None if self.z_hat is None else self.z_hat.tolist(), "T_min": self.T_min,
                "closure": self.closure, "certificate": self.certificate, "uv": self.uv.tolist(),
                "return_time": self.return_time,
                "winding": None if self.winding is None else self.winding.as_dict(), "notes": self.notes}

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, sort_keys=True, indent=1)

    def orbit_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"s{i}" for i in range(self.states.shape[1])])
            for ti, si in zip(self.t, self.states):
                w.writerow([f"{ti:.17g}"] + [f"{v:.17g}" for v in si])


def _half_orbit(sys, chart, pq, z, direction, tol, t_arm=None, method="auto"):
    """Run from the section point to the mid-section q = 0 near the turning point.

    The mid-section event is armed at ``t_arm`` (default: half way), so that
    earlier crossings of q = 0 far from the turning point are ignored.
    """
    state = _section_state(chart, pq, z, sys.dim)
    fr = chart.frame
    if direction > 0:
        t0, span = chart.tau, -chart.tau
    else:
        t0, span = chart.sigma, chart.sigma
    if t_arm is None:
        t_arm = t0 + direction * 0.5 * span

    def g(t, s):
        if direction * (t - t_arm) < 0:
            return -float(direction)
        return fr.to_pqh(s)[1]

    events = [EventSpec(g, direction, True, "mid")]
    if sys.box is not None:
        lo, hi = np.asarray(sys.box.lows), np.asarray(sys.box.highs)
        events.append(EventSpec(lambda t, s: float(np.min(np.r_[s - lo, hi - s])), -1, True, "box"))
    traj, hits = integrate_to_event(sys, state, events, t0 + direction * 3 * span, t0=t0, tol=tol, method=method)
    hit = next((h for h in hits if h.name == "mid"), None)
    if hit is None:
        raise CanardError("half orbit missed the mid-section")
    if np.hypot(*(hit.state[:2] - fr.origin[:2])) > chart.omega0_radius:
        raise CanardError("half orbit met the mid-section away from the turning point")
    return traj, hit


def _mismatch(sys, chart, x, tol):
    d = sys.aux_dim
    pq, z = x[:2], (x[2:] if d else None)
    tf, hf = _half_orbit(sys, chart, pq, z, +1, tol)
    tb, hb = _half_orbit(sys, chart, pq, z, -1, tol)
    a, b = chart.frame.to_pqh(hf.state), chart.frame.to_pqh(hb.state)
    r = np.r_[a[0] - b[0], a[2] - b[2], hf.state[3:] - hb.state[3:]]
    return r, (tf, hf, tb, hb)


def shoot_periodic(sys: SlowFastSystem, chart: SectionChart, guess, z_guess=None, refine_tol: float = 1e-10,
                   max_iter: int = 25, tol=(1e-11, 1e-13), fd_step: float = 1e-7):
    """Newton on the mid-section mismatch of the forward and backward half orbits."""
    x = np.r_[np.asarray(guess, float), np.zeros(sys.aux_dim) if z_guess is None else np.atleast_1d(z_guess)]
    r, parts = _mismatch(sys, chart, x, tol)
    hist = [float(np.max(np.abs(r)))]
    best = (hist[0], x, r, parts)
    for _ in range(max_iter):
        if np.max(np.abs(r)) < refine_tol:
            break
        J = np.empty((r.size, x.size))
        for k in range(x.size):
            e = np.zeros_like(x)
            e[k] = fd_step * max(1.0, abs(x[k]))
            J[:, k] = (_mismatch(sys, chart, x + e, tol)[0] - r) / e[k]
        step = np.linalg.lstsq(J, r, rcond=None)[0]
        lam = 1.0
        while True:
            try:
                r_new, parts_new = _mismatch(sys, chart, x - lam * step, tol)
                if np.max(np.abs(r_new)) < np.max(np.abs(r)) or lam < 1e-3:
                    break
            except (CanardError, IntegrationError):
                if lam < 1e-3:
                    raise
            lam *= 0.5
        x, r, parts = x - lam * step, r_new, parts_new
        hist.append(float(np.max(np.abs(r))))
        if hist[-1] < best[0]:
            best = (hist[-1], x, r, parts)
    # with a non-smooth perturbation the mismatch is noisy and the last iterate need not be the best
    _, x, r, parts = best
    return x, r, parts, hist


def _canard_certificate(sys, chart, t, states, tube_radius):
    fr = chart.frame
    W = np.array([fr.from_pqh((p, q, h)) for (p, q), h in zip(chart.gr.pq, chart.gr.h)])
    tree = cKDTree(W)
    dist, _ = tree.query(states[:, :3])
    yy = np.array([sys.reduced("Yy", s[:3]) for s in states])
    inside = (yy > 0) & (dist < tube_radius)
    dt = np.diff(t)
    frac = float(np.sum(dt * inside[:-1]) / np.sum(dt))
    return {"fraction_in_repulsive_tube": frac, "tube_radius": float(tube_radius),
            "max_Yy": float(yy.max())}


def _assemble(sys, chart, x, r, parts, n=1500):
    tf, hf, tb, hb = parts
    tau, sig = chart.tau, chart.sigma
    # uniform samples plus the integrator's own steps, which resolve the fast jump
    t_f = np.union1d(np.linspace(tau, hf.t, n), tf.t[(tf.t > tau) & (tf.t < hf.t)])
    t_b = np.union1d(np.linspace(hb.t, sig, n), tb.t[(tb.t > hb.t) & (tb.t < sig)])
    S_f, S_b = tf(t_f), tb(t_b)
    T = (hf.t - tau) + (sig - hb.t)
    t = np.r_[t_f - tau, (hf.t - tau) + (t_b[1:] - hb.t)]
    states = np.vstack([S_f, S_b[1:]])
    closure = float(np.linalg.norm(hf.state - hb.state))
    return t, states, T, closure


def locate_periodic_canard(sys: SlowFastSystem, chart: SectionChart, refine_tol: float = 1e-10,
                           z_guess=None, guess=None, check_winding: bool = True, use_quadrisection: bool = False,
                           tube_radius: float | None = None) -> PeriodicCanard:
    """Certify by the boundary winding of id - W_eps, then refine the orbit by two-sided shooting.

    The shooting starts from ``guess`` (default x*, or the quadrisection centre
    when ``use_quadrisection`` is set) and must land inside the certified Π(α).
    """
    notes = []
    wind = None
    if check_winding:
        z0 = None if sys.aux_dim == 0 else np.zeros(sys.aux_dim)
        wind = return_map_winding(sys, chart, z0=z0)
        if wind.degree != chart.sgnA:
            raise CanardError(f"winding {wind.degree} differs from sgn(A) = {chart.sgnA}")
        if sys.aux_dim:
            S = ShiftOperator(sys, chart)
            dz = fixed_point_degree(S, (-np.ones(sys.aux_dim), np.ones(sys.aux_dim)))
            prod = product_degree(wind.degree, dz.degree)
            notes.append(f"shift-operator degree {dz.degree}, product degree {prod}")
            if prod == 0:
                raise CanardError("product degree vanishes")
    if guess is None:
        guess = chart.pq_star
        if use_quadrisection and check_winding:
            rect, hist, n = return_map_quadrisection(sys, chart,
                                                     z0=None if sys.aux_dim == 0 else np.zeros(sys.aux_dim))
            centre = chart.inverse((0.5 * sum(rect[0]), 0.5 * sum(rect[1])))
            notes.append(f"quadrisection depth {len(hist) - 1}, {n} map evaluations, rect {rect}")
            guess = centre
    try:
        x, r, parts, hist = shoot_periodic(sys, chart, guess, z_guess, refine_tol)
    except (CanardError, IntegrationError) as exc:
        notes.append(f"shooting from the quadrisection guess failed ({exc}); restarting at x*")
        x, r, parts, hist = shoot_periodic(sys, chart, chart.pq_star, z_guess, refine_tol)
    t, states, T, closure = _assemble(sys, chart, x, r, parts)
    if tube_radius is None:
        tube_radius = max(2.0 * chart.tube_c * sys.epsilon, 0.05)
    cert = _canard_certificate(sys, chart, t, states, tube_radius)
    cert["newton_history"] = hist
    uv = chart.uv(x[:2])
    cert["inside_parallelogram"] = bool(np.max(np.abs(uv)) < chart.alpha / 2)
    if check_winding and not cert["inside_parallelogram"]:
        raise CanardError(f"refined fixed point has chart coordinates {uv}, outside the certified Π(α)")
    return PeriodicCanard(sys.epsilon, x[:2].copy(), x[2:].copy() if sys.aux_dim else None, t, states, T,
                          closure, cert, uv, chart.tau + T, wind, notes)


# ---------------------------------------------------------------------------
# continuation and robustness
# ---------------------------------------------------------------------------

def limiting_curve(chart: SectionChart, n_vertical: int = 200) -> np.ndarray:
    """Γ_a on [tau, 0], Γ_r on [0, sigma] and the vertical jump at x*, in (x1, x2, y)."""
    fr = chart.frame
    sa = (chart.ga.t >= chart.tau)
    sr = (chart.gr.t <= chart.sigma)
    A = [fr.from_pqh((p, q, h)) for (p, q), h in zip(chart.ga.pq[sa], chart.ga.h[sa])]
    R = [fr.from_pqh((p, q, h)) for (p, q), h in zip(chart.gr.pq[sr], chart.gr.h[sr])]
    x = chart.record.x_star
    ys = np.linspace(chart.record.y_sigma, chart.record.y_tau, n_vertical)
    V = [np.array([x[0], x[1], y]) for y in ys]
    return np.array(A + R + V)


@dataclass
class ContinuationRow:
    epsilon: float
    canard: PeriodicCanard | None
    hausdorff: float | None
    status: str


def epsilon_continuation(sys: SlowFastSystem, chart: SectionChart, eps_list: Sequence[float],
                         refine_tol: float = 1e-10, check_winding: bool = True):
    """Canards along a decreasing list of eps, warm-started from the previous fixed point."""
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    curve = limiting_curve(chart)
    rows: list[ContinuationRow] = []
    guess = None
    for eps in eps_list:
        s = sys.with_epsilon(eps)
        try:
            pc = locate_periodic_canard(s, chart, refine_tol, guess=guess, check_winding=check_winding)
        except (CanardError, DegreeError, ReturnMapError, IntegrationError) as exc:
            rows.append(ContinuationRow(eps, None, None, f"truncated: {exc}"))
            break
        rows.append(ContinuationRow(eps, pc, hausdorff(pc.states[:, :3], curve), "ok"))
        guess = pc.fixed_point
    return rows


def continuation_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "status", "T_min", "closure", "hausdorff", "p_hat", "q_hat", "u_hat", "v_hat"])
        for r in rows:
            if r.canard is None:
                w.writerow([f"{r.epsilon:.17g}", r.status, "", "", "", "", "", "", ""])
            else:
                c = r.canard
                w.writerow([f"{r.epsilon:.17g}", r.status, f"{c.T_min:.17g}", f"{c.closure:.17g}",
                            f"{r.hausdorff:.17g}", *(f"{v:.17g}" for v in c.fixed_point),
                            *(f"{v:.17g}" for v in c.uv)])


def perturbation_robustness(sys: SlowFastSystem, chart: SectionChart, pert_spec: dict, deltas: Sequence[float],
                            refine_tol: float = 1e-8, baseline: PeriodicCanard | None = None) -> dict:
    """Re-locate the canard under perturbations of growing sup-norm; failures are reported as data."""
    if baseline is None:
        baseline = locate_periodic_canard(sys, chart, refine_tol)
    rows = []
    last_ok = None
    for d in deltas:
        spec = dict(pert_spec, delta=float(d))
        pX, pY, bound = perturbation_from_spec(spec)
        row = {"delta": float(d)}
        try:
            s = sys if bound == 0 else attach_perturbation(sys, pX, pY, bound)[0]
            pc = locate_periodic_canard(s, chart, refine_tol, guess=baseline.fixed_point)
            row.update(winding=pc.winding.degree, persists=True, closure=pc.closure, T_min=pc.T_min,
                       displacement=hausdorff(pc.states[:, :3], baseline.states[:, :3]),
                       fixed_point=pc.fixed_point.tolist())
            last_ok = float(d)
        except (CanardError, DegreeError, ReturnMapError, IntegrationError) as exc:
            row.update(persists=False, error=str(exc))
        rows.append(row)
        if not row["persists"]:
            break
    return {"rows": rows, "last_surviving_delta": last_ok, "baseline_T_min": baseline.T_min}
