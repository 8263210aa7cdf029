"""Slow-surface geometry: critical points, the local frame, reduced branches
through the turning point and the crossings of their projections.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicHermiteSpline

from .sysdef import BoundingBox, SlowFastSystem

MARGIN = 1e-8


class CertificationError(ValueError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class BranchError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# critical points
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CriticalPoint:
    x: np.ndarray
    y: float
    residuals: tuple
    nondegeneracy: tuple = ()
    assumption2: tuple = ()

    @property
    def w(self) -> np.ndarray:
        return np.array([self.x[0], self.x[1], self.y])

    @property
    def residual(self) -> float:
        return float(max(abs(r) for r in self.residuals))


def _cp_equations(sys: SlowFastSystem, w):
    X, Yx = sys.reduced("X", w), sys.reduced("Yx", w)
    return np.array([X @ Yx, sys.reduced("Y", w), sys.reduced("Yy", w)])


def _cp_jacobian(sys: SlowFastSystem, w):
    X, Yx = sys.reduced("X", w), sys.reduced("Yx", w)
    Xx, Xy = sys.reduced("Xx", w), sys.reduced("Xy", w)
    Yxy, Yyy = sys.reduced("Yxy", w), sys.reduced("Yyy", w)
    # Hessian block d(Yx)/dx is needed for the first row; use central differences of Yx.
    h = 1e-7
    dYx = np.empty((2, 2))
    for k in range(2):
        e = np.zeros(3)
        e[k] = h
        dYx[:, k] = (sys.reduced("Yx", w + e) - sys.reduced("Yx", w - e)) / (2 * h)
    row0 = np.r_[Xx.T @ Yx + dYx.T @ X, Xy @ Yx + Yxy @ X]
    row1 = np.r_[Yx, sys.reduced("Yy", w)]
    row2 = np.r_[Yxy, Yyy]
    return np.vstack([row0, row1, row2])


def find_critical_points(sys: SlowFastSystem, box: BoundingBox | None = None, tol: float = 1e-10,
                         n_grid: int = 5, return_diagnostics: bool = False):
    """Solve <X, Y_x> = 0, Y = 0, Y_y = 0 by multi-start Newton on a grid over ``box``."""
    box = box or sys.box
    if box is None:
        raise ValueError("a bounding box is required")
    lo, hi = np.asarray(box.lows[:3]), np.asarray(box.highs[:3])
    starts = [lo + (hi - lo) * np.array(c) for c in np.stack(np.meshgrid(
        *(np.linspace(0, 1, n_grid),) * 3, indexing="ij"), -1).reshape(-1, 3)]
    found: list[CriticalPoint] = []
    best = math.inf
    for w in starts:
        w = w.astype(float)
        for _ in range(60):
            G = _cp_equations(sys, w)
            best = min(best, float(np.max(np.abs(G))))
            if np.max(np.abs(G)) < tol * 1e-2:
                break
            try:
                step = np.linalg.solve(_cp_jacobian(sys, w), G)
            except np.linalg.LinAlgError:
                break
            lam = 1.0
            while lam > 1e-4 and np.max(np.abs(_cp_equations(sys, w - lam * step))) > np.max(np.abs(G)):
                lam *= 0.5
            w = w - lam * step
            if not np.all(np.isfinite(w)) or np.max(np.abs(w)) > 1e6:
                break
        G = _cp_equations(sys, w)
        res = float(np.max(np.abs(G)))
        best = min(best, res)
        if res < tol and box.contains(w, pad=1e-9):
            if all(np.max(np.abs(w - c.w)) > 10 * tol for c in found):
                found.append(CriticalPoint(w[:2].copy(), float(w[2]), tuple(map(float, G))))
    diag = {"best_residual": best, "n_starts": len(starts)}
    return (found, diag) if return_diagnostics else found


# ---------------------------------------------------------------------------
# local frame and certification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalFrame:
    """Orthonormal frame at a turning point plus the linear (p, q, h) coordinates.

    Frame coordinates: xi1 = e1.(x - xc), xi2 = e2.(x - xc), yh = ysign*(y - yc).
    (p, q, h): p = xi1, q = xi2*n/zeta, h = yh + xi2*phi/zeta with n = |(zeta, phi)|,
    so the q-axis is the turning-line tangent (0, zeta, -phi) and the y-axis is
    the h-axis.
    """

    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    ysign: float
    xi: float
    zeta: float
    phi: float

    @property
    def tangent(self) -> np.ndarray:
        return np.array([0.0, self.zeta, -self.phi])

    @property
    def nrm(self) -> float:
        return math.hypot(self.zeta, self.phi)

    @property
    def right_handed(self) -> bool:
        return (self.e1[0] * self.e2[1] - self.e1[1] * self.e2[0]) * self.ysign > 0

    def to_frame(self, w) -> np.ndarray:
        d = np.asarray(w[:3], float) - self.origin
        return np.array([self.e1 @ d[:2], self.e2 @ d[:2], self.ysign * d[2]])

    def from_frame(self, f) -> np.ndarray:
        x = self.origin[:2] + f[0] * self.e1 + f[1] * self.e2
        return np.array([x[0], x[1], self.origin[2] + self.ysign * f[2]])

    def to_pqh(self, w) -> np.ndarray:
        f = self.to_frame(w)
        return np.array([f[0], f[1] * self.nrm / self.zeta, f[2] + f[1] * self.phi / self.zeta])

    def from_pqh(self, pqh) -> np.ndarray:
        xi2 = pqh[1] * self.zeta / self.nrm
        yh = pqh[2] - pqh[1] * self.phi / self.nrm
        return self.from_frame((pqh[0], xi2, yh))

    def x_from_pq(self, pq) -> np.ndarray:
        return self.from_pqh((pq[0], pq[1], 0.0))[:2]

    def pq_velocity(self, xdot) -> np.ndarray:
        """(p', q') for a slow velocity x' in original coordinates."""
        return np.array([self.e1 @ xdot, (self.e2 @ xdot) * self.nrm / self.zeta])

    def h_velocity(self, xdot, ydot) -> float:
        return self.ysign * ydot + (self.e2 @ xdot) * self.phi / self.zeta

    def dh_dy(self) -> float:
        return self.ysign

    def as_dict(self) -> dict:
        return {"origin": self.origin.tolist(), "e1": self.e1.tolist(), "e2": self.e2.tolist(),
                "ysign": self.ysign, "xi": self.xi, "zeta": self.zeta, "phi": self.phi,
                "tangent": self.tangent.tolist(), "right_handed": self.right_handed}


@dataclass(frozen=True)
class CertificationReport:
    values: dict
    verdicts: dict
    frame: LocalFrame | None

    @property
    def passed(self) -> bool:
        return all(v == "pass" for v in self.verdicts.values())

    def as_dict(self) -> dict:
        return {"values": self.values, "verdicts": self.verdicts,
                "frame": self.frame.as_dict() if self.frame else None}


def _verdict(value: float, sense: str) -> str:
    if abs(value) < MARGIN:
        return "inconclusive"
    ok = value > 0 if sense == ">0" else (value < 0 if sense == "<0" else value != 0)
    return "pass" if ok else "fail"


def build_frame(sys: SlowFastSystem, cp: CriticalPoint) -> LocalFrame:
    w = cp.w
    Yx, Yyy = sys.reduced("Yx", w), sys.reduced("Yyy", w)
    X, Yxy = sys.reduced("X", w), sys.reduced("Yxy", w)
    ysign = 1.0 if Yyy >= 0 else -1.0
    xi = float(np.linalg.norm(Yx))
    e1 = ysign * Yx / xi
    e2 = np.array([-e1[1], e1[0]])
    if e2 @ X < 0:
        e2 = -e2
    phi = float(e2 @ Yxy)
    return LocalFrame(w.copy(), e1, e2, ysign, xi, abs(float(Yyy)), phi)


def certify_nondegeneracy(sys: SlowFastSystem, cp: CriticalPoint) -> CertificationReport:
    """Check (nev1)-(nev3) and Assumption 2 at ``cp``; raise on failure, return the report."""
    w = cp.w
    X, Yx, Yyy = sys.reduced("X", w), sys.reduced("Yx", w), sys.reduced("Yyy", w)
    vals = {"nev1": float(np.linalg.norm(X)), "nev2": float(np.linalg.norm(Yx)), "nev3": float(Yyy)}
    verdicts = {"nev1": _verdict(vals["nev1"], ">0"), "nev2": _verdict(vals["nev2"], ">0"),
                "nev3": _verdict(vals["nev3"], "!=0")}
    frame = None
    if all(v == "pass" for v in verdicts.values()):
        frame = build_frame(sys, cp)
        Xx, Xy = sys.reduced("Xx", w), sys.reduced("Xy", w)
        X1_x2 = float(frame.e1 @ Xx @ frame.e2)
        X1_y = float(frame.ysign * (frame.e1 @ Xy))
        vals["olE"] = 2 * X1_x2 * frame.zeta - X1_y * frame.phi
        vals["ol1E"] = X1_y
        vals["X2_frame"] = float(frame.e2 @ X)
        verdicts["olE"] = _verdict(vals["olE"], "<0")
        verdicts["ol1E"] = _verdict(vals["ol1E"], ">0")
    report = CertificationReport(vals, verdicts, frame)
    if not report.passed:
        bad = {k: vals.get(k) for k, v in verdicts.items() if v != "pass"}
        raise CertificationError(f"certification failed: {bad}", report)
    return report


def finite_difference_values(sys: SlowFastSystem, cp: CriticalPoint, h: float = 1e-4) -> dict:
    """Nondegeneracy and Assumption-2 values recomputed by central differences (a cross-check)."""
    w = cp.w
    Yf = lambda v: sys.reduced("Y", v)  # noqa: E731
    Xf = lambda v: sys.reduced("X", v)  # noqa: E731
    E = np.eye(3) * h
    grad = np.array([(Yf(w + E[k]) - Yf(w - E[k])) / (2 * h) for k in range(3)])
    Yyy = (Yf(w + E[2]) - 2 * Yf(w) + Yf(w - E[2])) / h**2
    fr = build_frame(sys, cp)
    d2 = np.r_[fr.e2, 0.0] * h
    dy = np.array([0, 0, fr.ysign * h])
    phi = fr.ysign * (Yf(w + d2 + dy) - Yf(w + d2 - dy) - Yf(w - d2 + dy) + Yf(w - d2 - dy)) / (4 * h * h) * fr.ysign
    X1_x2 = fr.e1 @ (Xf(w + d2) - Xf(w - d2)) / (2 * h)
    X1_y = fr.e1 @ (Xf(w + dy) - Xf(w - dy)) / (2 * h)
    zeta = abs(Yyy)
    return {"nev1": float(np.linalg.norm(Xf(w))), "nev2": float(np.linalg.norm(grad[:2])),
            "nev3": float(Yyy), "olE": float(2 * X1_x2 * zeta - X1_y * phi), "ol1E": float(X1_y)}


# ---------------------------------------------------------------------------
# reduced branches
# ---------------------------------------------------------------------------

def project_to_surface(sys: SlowFastSystem, w, tol: float = 1e-13, iters: int = 30) -> np.ndarray:
    """Newton projection onto Y = 0 along the gradient of Y (robust at the turning line)."""
    w = np.array(w[:3], float)
    for _ in range(iters):
        Yv = sys.reduced("Y", w)
        if abs(Yv) < tol:
            break
        g = np.r_[sys.reduced("Yx", w), sys.reduced("Yy", w)]
        w = w - Yv * g / (g @ g)
    return w


def lift_to_sheet(sys: SlowFastSystem, frame: LocalFrame, pq, h_guess: float, tol: float = 1e-14) -> np.ndarray:
    """On-surface point above (p, q) obtained by Newton in h from ``h_guess``."""
    h = float(h_guess)
    for _ in range(50):
        w = frame.from_pqh((pq[0], pq[1], h))
        Yv = sys.reduced("Y", w)
        d = sys.reduced("Yy", w) * frame.ysign
        if d == 0:
            raise BranchError("lift hit the turning line")
        step = Yv / d
        h -= step
        if abs(step) < tol * max(1.0, abs(h)):
            break
    else:
        raise BranchError("lift to slow surface did not converge")
    return frame.from_pqh((pq[0], pq[1], h))


@dataclass
class ReducedBranch:
    """Sampled reduced solution w*(t) stored in (p, q, h) coordinates, ascending in t."""

    kind: str
    t: np.ndarray
    pq: np.ndarray
    h: np.ndarray
    vel: np.ndarray
    hdot: np.ndarray
    frame: LocalFrame | None = None
    system: SlowFastSystem | None = field(default=None, repr=False)
    arclength: float = 0.0
    stop_reason: str = ""
    t_seed: float = 0.0
    certificate: dict = field(default_factory=dict)

    def __post_init__(self):
        self._pq = CubicHermiteSpline(self.t, self.pq, self.vel, axis=0)
        self._h = CubicHermiteSpline(self.t, self.h, self.hdot)

    @classmethod
    def from_samples(cls, kind, t, pq, vel, h=None, hdot=None) -> "ReducedBranch":
        t = np.asarray(t, float)
        order = np.argsort(t)
        pq = np.asarray(pq, float)[order]
        vel = np.asarray(vel, float)[order]
        h = np.zeros_like(t) if h is None else np.asarray(h, float)[order]
        hdot = np.zeros_like(t) if hdot is None else np.asarray(hdot, float)[order]
        return cls(kind, t[order], pq, h, vel, hdot)

    @property
    def t_range(self) -> tuple:
        return float(self.t[0]), float(self.t[-1])

    def pq_at(self, t) -> np.ndarray:
        return self._pq(t)

    def vel_at(self, t) -> np.ndarray:
        return self._pq.derivative()(t)

    def h_at(self, t):
        return self._h(t)

    def w_at(self, t) -> np.ndarray:
        """Original coordinates (x1, x2, y) at time t, polished onto the surface."""
        pq, h = self.pq_at(t), float(self.h_at(t))
        if self.frame is None:
            return np.array([pq[0], pq[1], h])
        if self.system is None:
            return self.frame.from_pqh((pq[0], pq[1], h))
        return lift_to_sheet(self.system, self.frame, pq, h)

    def contains_time(self, t) -> bool:
        return self.t[0] <= t <= self.t[-1]

    def as_dict(self) -> dict:
        return {"kind": self.kind, "t": self.t.tolist(), "pq": self.pq.tolist(), "h": self.h.tolist(),
                "arclength": self.arclength, "stop_reason": self.stop_reason,
                "certificate": self.certificate}

    def polyline(self) -> np.ndarray:
        """Columns t, p, q, h and the original coordinates when a frame is known."""
        cols = [self.t, self.pq[:, 0], self.pq[:, 1], self.h]
        if self.frame is not None:
            W = np.array([self.frame.from_pqh((a, b, c)) for (a, b), c in zip(self.pq, self.h)])
            cols += [W[:, 0], W[:, 1], W[:, 2]]
        return np.column_stack(cols)


def _canard_direction(sys: SlowFastSystem, cp_w):
    J = sys.desingularized_jac(cp_w)
    lam, V = np.linalg.eig(J)
    n = np.r_[sys.reduced("Yx", cp_w), sys.reduced("Yy", cp_w)]
    best = None
    for k in range(3):
        if abs(lam[k].imag) > 1e-12 or lam[k].real <= MARGIN:
            continue
        v = V[:, k].real
        v /= np.linalg.norm(v)
        if abs(n @ v) > 1e-6 * np.linalg.norm(n):
            continue
        if best is None or lam[k].real > best[0]:
            best = (lam[k].real, v)
    if best is None:
        raise BranchError("no real positive tangent eigenvalue at the turning point (no canard direction)")
    lam, v = best
    gg = np.r_[sys.reduced("Yxy", cp_w), sys.reduced("Yyy", cp_w)]
    c = float(gg @ v)
    if abs(c) < MARGIN:
        raise BranchError("canard direction tangent to the turning line")
    if c < 0:
        v, c = -v, -c
    return lam, v, c


def trace_reduced_branch(sys: SlowFastSystem, cp: CriticalPoint, kind: str, arclength: float = 12.0,
                         p_seed: float = 1e-6, ds: float = 2e-3, frame: LocalFrame | None = None,
                         box: BoundingBox | None = None, surface_tol: float = 1e-8) -> ReducedBranch:
    """Reduced solution leaving the turning point into the attractive or repulsive sheet.

    Integrates the desingularized field F = (Y_y X, -<X, Y_x>) in arclength;
    physical time follows from dt = Y_y ds.  Γ_a is traced into negative time,
    Γ_r into positive time.
    """
    if kind not in ("attractive", "repulsive"):
        raise ValueError("kind must be 'attractive' or 'repulsive'")
    frame = frame or build_frame(sys, cp)
    box = box or sys.box
    w0 = cp.w
    lam, v, c = _canard_direction(sys, w0)
    ray = v if kind == "repulsive" else -v
    r0 = 1e-3
    p0 = frame.to_pqh(project_to_surface(sys, w0 + r0 * ray))[0]
    kappa = abs(p0) / r0**2
    r = math.sqrt(p_seed / kappa) if kappa > 1e-12 else math.sqrt(p_seed)
    seed = project_to_surface(sys, w0 + r * ray)
    sgn = 1.0 if kind == "repulsive" else -1.0
    t_seed = sgn * c * r / lam

    def rhs(s, u):
        F = sys.desingularized(u[:3])
        nF = math.sqrt(F @ F)
        return np.r_[F / nF, sys.reduced("Yy", u[:3]) / nF]

    def ev_turn(s, u):
        return sgn * sys.reduced("Yy", u[:3])
    ev_turn.terminal, ev_turn.direction = True, -1

    events = [ev_turn]
    if box is not None:
        lo, hi = np.asarray(box.lows[:3]), np.asarray(box.highs[:3])

        def ev_box(s, u):
            return float(np.min(np.r_[u[:3] - lo, hi - u[:3]]))
        ev_box.terminal, ev_box.direction = True, -1
        events.append(ev_box)

    def ev_slow(s, u):  # reduced speed collapsing: approaching an equilibrium of the reduced flow
        F = sys.desingularized(u[:3])
        return math.sqrt(F @ F) / max(abs(sys.reduced("Yy", u[:3])), 1e-300) - 1e-6
    ev_slow.terminal, ev_slow.direction = True, -1
    events.append(ev_slow)

    sol = solve_ivp(rhs, (0.0, arclength), np.r_[seed, t_seed], method="DOP853", rtol=1e-11,
                    atol=1e-13, max_step=10 * ds, dense_output=True, events=events)
    L = float(sol.t[-1])
    reasons = ["turning line reached", "left bounding box", "reduced flow stalls"]
    stop = "arclength budget"
    for k, te in enumerate(sol.t_events):
        if len(te):
            stop = reasons[k]
    n = max(int(math.ceil(L / ds)), 4)
    S = np.linspace(0.0, L, n + 1)
    U = sol.sol(S).T
    W = np.array([project_to_surface(sys, u[:3]) for u in U])
    resid = np.array([abs(sys.reduced("Y", w)) for w in W])
    if resid.max() > surface_tol:
        raise BranchError(f"constraint drift |Y| = {resid.max():.2e} exceeds surface tolerance")
    T = U[:, 3]
    Yy = np.array([sys.reduced("Yy", w) for w in W])
    # prepend the turning point itself (t = 0)
    v_seed = sys.reduced_velocity(W[0])
    W = np.vstack([w0, W])
    T = np.r_[0.0, T]
    V = [v_seed] + [sys.reduced_velocity(w) for w in W[1:]]
    pqh = np.array([frame.to_pqh(w) for w in W])
    vel = np.array([frame.pq_velocity(vv[:2]) for vv in V])
    hdot = np.array([frame.h_velocity(vv[:2], vv[2]) for vv in V])
    order = np.argsort(T)
    if np.any(np.diff(T[order]) <= 0):
        raise BranchError("branch time is not strictly monotone")
    cert = {
        "sign_Yy": int(np.sign(Yy).min() if kind == "repulsive" else np.sign(Yy).max()),
        "all_signs_ok": bool(np.all(sgn * Yy > 0)),
        "max_abs_Y": float(resid.max()),
        "t_end": float(T[-1]),
        "eigenvalue": float(lam),
        "seed_radius": float(r),
    }
    br = ReducedBranch(kind, T[order], pqh[order, :2], pqh[order, 2], vel[order], hdot[order], frame, sys,
                       L, stop, float(t_seed), cert)
    if _self_intersections(br.pq, skip=3):
        raise BranchError("branch projection self-intersects (Assumption 3 violated)")
    return br


# ---------------------------------------------------------------------------
# intersections
# ---------------------------------------------------------------------------

def _segment_hash(P: np.ndarray, cell: float) -> dict:
    grid: dict = {}
    for i in range(len(P) - 1):
        a, b = P[i], P[i + 1]
        lo = np.floor(np.minimum(a, b) / cell).astype(int)
        hi = np.floor(np.maximum(a, b) / cell).astype(int)
        for cx in range(lo[0], hi[0] + 1):
            for cy in range(lo[1], hi[1] + 1):
                grid.setdefault((cx, cy), []).append(i)
    return grid


def _seg_intersect(a0, a1, b0, b1):
    da, db = a1 - a0, b1 - b0
    den = da[0] * db[1] - da[1] * db[0]
    if den == 0:
        return None
    r = b0 - a0
    s = (r[0] * db[1] - r[1] * db[0]) / den
    u = (r[0] * da[1] - r[1] * da[0]) / den
    if 0 <= s <= 1 and 0 <= u <= 1:
        return s, u
    return None


def _candidate_crossings(Pa: np.ndarray, Pb: np.ndarray, same: bool = False, skip: int = 1):
    seglen = max(np.max(np.linalg.norm(np.diff(Pa, axis=0), axis=1)),
                 np.max(np.linalg.norm(np.diff(Pb, axis=0), axis=1)), 1e-12)
    cell = 2 * seglen
    grid = _segment_hash(Pb, cell)
    out = set()
    for i in range(len(Pa) - 1):
        a0, a1 = Pa[i], Pa[i + 1]
        lo = np.floor(np.minimum(a0, a1) / cell).astype(int)
        hi = np.floor(np.maximum(a0, a1) / cell).astype(int)
        cands = set()
        for cx in range(lo[0], hi[0] + 1):
            for cy in range(lo[1], hi[1] + 1):
                cands.update(grid.get((cx, cy), ()))
        for j in cands:
            if same and abs(i - j) <= skip:
                continue
            hit = _seg_intersect(a0, a1, Pb[j], Pb[j + 1])
            if hit is not None:
                out.add((i, j, hit[0], hit[1]))
    return sorted(out)


def _self_intersections(P: np.ndarray, skip: int = 2) -> list:
    return [c for c in _candidate_crossings(P, P, same=True, skip=skip) if c[0] < c[1]]


@dataclass(frozen=True)
class IntersectionRecord:
    tau: float
    sigma: float
    pq_star: np.ndarray
    x_star: np.ndarray
    y_tau: float
    y_sigma: float
    h_tau: float
    h_sigma: float
    A: float
    vel_a: np.ndarray
    vel_r: np.ndarray
    jump_certificate: bool | None
    residual: float

    def as_dict(self) -> dict:
        return {"tau": self.tau, "sigma": self.sigma, "pq_star": self.pq_star.tolist(),
                "x_star": self.x_star.tolist(), "y_tau": self.y_tau, "y_sigma": self.y_sigma,
                "h_tau": self.h_tau, "h_sigma": self.h_sigma, "A": self.A,
                "vel_a": self.vel_a.tolist(), "vel_r": self.vel_r.tolist(),
                "jump_certificate": self.jump_certificate, "residual": self.residual}


def _jump_certificate(sys, x_star, y_tau, y_sigma, n=100) -> bool:
    ys = np.linspace(y_sigma, y_tau, n + 2)[1:-1]
    want = np.sign(y_tau - y_sigma)
    return bool(all(np.sign(sys.reduced("Y", (x_star[0], x_star[1], yy))) == want for yy in ys))


def find_intersections(ga: ReducedBranch, gr: ReducedBranch, match_tol: float = 1e-10,
                       return_diagnostics: bool = False):
    """Transversal crossings of the projections of Γ_a and Γ_r, sorted by σ."""
    raw = _candidate_crossings(ga.pq, gr.pq)
    t_excl_a = 10 * abs(ga.t_seed)
    t_excl_r = 10 * abs(gr.t_seed)
    records: list[IntersectionRecord] = []
    rejected = []
    for i, j, s, u in raw:
        tau = ga.t[i] + s * (ga.t[i + 1] - ga.t[i])
        sig = gr.t[j] + u * (gr.t[j + 1] - gr.t[j])
        if ga.t_seed and abs(tau) <= t_excl_a and abs(sig) <= t_excl_r:
            continue  # the two branches meet at the turning point itself
        for _ in range(50):
            G = ga.pq_at(tau) - gr.pq_at(sig)
            J = np.column_stack([ga.vel_at(tau), -gr.vel_at(sig)])
            try:
                d = np.linalg.solve(J, G)
            except np.linalg.LinAlgError:
                break
            tau, sig = tau - d[0], sig - d[1]
            tau = min(max(tau, ga.t[0]), ga.t[-1])
            sig = min(max(sig, gr.t[0]), gr.t[-1])
            if np.max(np.abs(d)) < 1e-15 * max(1.0, abs(tau), abs(sig)):
                break
        res = float(np.linalg.norm(ga.pq_at(tau) - gr.pq_at(sig)))
        va, vr = ga.vel_at(tau), gr.vel_at(sig)
        A = float(va[0] * vr[1] - vr[0] * va[1])
        if res > match_tol:
            rejected.append({"tau": tau, "sigma": sig, "reason": f"match residual {res:.2e}"})
            continue
        if abs(A) < MARGIN:
            rejected.append({"tau": tau, "sigma": sig, "reason": "non-transversal", "A": A})
            continue
        pq = 0.5 * (ga.pq_at(tau) + gr.pq_at(sig))
        ha, hr = float(ga.h_at(tau)), float(gr.h_at(sig))
        if ga.frame is not None:
            wa, wr = ga.w_at(tau), gr.w_at(sig)
            x_star = 0.5 * (wa[:2] + wr[:2])
            ya, yr = float(wa[2]), float(wr[2])
        else:
            x_star, ya, yr = pq.copy(), ha, hr
        cert = None
        sys = ga.system or gr.system
        if sys is not None:
            cert = _jump_certificate(sys, x_star, ya, yr)
        rec = IntersectionRecord(float(tau), float(sig), pq, x_star, ya, yr, ha, hr, A, va, vr, cert, res)
        dup = [k for k, r in enumerate(records)
               if abs(r.tau - rec.tau) < 1e-6 and abs(r.sigma - rec.sigma) < 1e-6]
        if dup:
            k = dup[0]
            if abs(rec.A) > abs(records[k].A):
                records[k] = rec
            continue
        records.append(rec)
    records.sort(key=lambda r: r.sigma)
    if return_diagnostics:
        return records, {"candidates": len(raw), "rejected": rejected}
    return records


def hausdorff(P: np.ndarray, Q: np.ndarray) -> float:
    from scipy.spatial.distance import directed_hausdorff

    return max(directed_hausdorff(P, Q)[0], directed_hausdorff(Q, P)[0])


def branches_to_json(ga: ReducedBranch, gr: ReducedBranch, records: Sequence[IntersectionRecord]) -> str:
    return json.dumps({"attractive": ga.as_dict(), "repulsive": gr.as_dict(),
                       "records": [r.as_dict() for r in records]}, sort_keys=True)
