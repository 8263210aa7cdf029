"""Adaptive integration with dense output and event location.

Smooth systems go through :func:`scipy.integrate.solve_ivp` (Radau with the
exact Jacobian when eps is small, DOP853 otherwise).  Systems carrying a
non-smooth perturbation use a Dormand-Prince 5(4) stepper whose error
estimate sees only the smooth part of the right-hand side and whose step is
capped at sqrt(eps).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import RK45, solve_ivp
from scipy.optimize import brentq

STIFF_EPS = 0.05


class IntegrationError(RuntimeError):
    def __init__(self, message: str, t: float | None = None, state=None):
        super().__init__(message)
        self.t = t
        self.state = None if state is None else np.asarray(state, float)


@dataclass(frozen=True)
class EventSpec:
    """Scalar event g(t, state) = 0.

    ``direction`` is +1 (rising), -1 (falling) or 0, measured in the order of
    integration, so for a backward run "rising" means g grows as t decreases.
    """

    func: Callable
    direction: int = 0
    terminal: bool = False
    name: str = ""


@dataclass(frozen=True)
class EventHit:
    name: str
    index: int
    t: float
    state: np.ndarray


@dataclass
class Trajectory:
    t: np.ndarray
    y: np.ndarray
    interp: Callable = field(repr=False)
    order: int
    method: str
    step_errors: np.ndarray | None = None
    status: str = "complete"

    def __call__(self, t):
        t = np.asarray(t, float)
        scalar = t.ndim == 0
        tt = np.atleast_1d(t)
        out = np.atleast_2d(np.asarray(self.interp(tt), float))
        if out.shape[0] != tt.size:
            out = out.T
        # sample times reproduce the stored samples exactly
        forward = self.t[-1] >= self.t[0]
        key = self.t if forward else self.t[::-1]
        idx = np.searchsorted(key, tt)
        ok = idx < key.size
        ok[ok] &= key[idx[ok]] == tt[ok]
        if ok.any():
            j = idx[ok] if forward else self.t.size - 1 - idx[ok]
            out[ok] = self.y[j]
        return out[0] if scalar else out

    @property
    def t_final(self) -> float:
        return float(self.t[-1])

    @property
    def final(self) -> np.ndarray:
        return self.y[-1]

    def to_csv(self, path, names: Sequence[str] | None = None) -> None:
        names = list(names) if names else [f"s{i}" for i in range(self.y.shape[1])]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *names])
            for ti, yi in zip(self.t, self.y):
                w.writerow([f"{ti:.17g}", *(f"{v:.17g}" for v in yi)])


def _as_problem(sys):
    """Return (rhs, jac, smooth, pert, eps) for a system object or a bare callable."""
    if callable(sys) and not hasattr(sys, "rhs"):
        return sys, None, sys, None, None
    eps = getattr(sys, "epsilon", None)
    jac = getattr(sys, "jac", None)
    if getattr(sys, "perturbed", False):
        return sys.rhs, None, sys.smooth_rhs, sys.pert_rhs, eps
    return sys.rhs, jac, sys.rhs, None, eps


def _check_tol(tol):
    rtol, atol = tol
    if not (0 < rtol <= 1e-2 and 0 < atol <= 1e-2):
        raise ValueError("tolerances must lie in (0, 1e-2]")
    return rtol, atol


def integrate(
    sys,
    state0,
    t_span,
    tol=(1e-10, 1e-12),
    method: str = "auto",
    max_step: float = np.inf,
    events: Sequence[EventSpec] = (),
) -> Trajectory:
    """Integrate ``sys`` from ``state0`` over ``t_span`` (forward or backward)."""
    traj, _ = _run(sys, state0, t_span, tol, method, max_step, events)
    return traj


def integrate_to_event(
    sys,
    state0,
    events: Sequence[EventSpec],
    t_max: float,
    t0: float = 0.0,
    tol=(1e-10, 1e-12),
    method: str = "auto",
    max_step: float = np.inf,
) -> tuple[Trajectory, list[EventHit]]:
    """Integrate until a terminal event or ``t_max``; returns all hits in time order.

    When a terminal event was requested but none fired, the trajectory status
    is ``"no-hit"``.
    """
    if not math.isfinite(t_max):
        raise ValueError("t_max must be finite")
    return _run(sys, state0, (t0, t_max), tol, method, max_step, events)


def _run(sys, state0, t_span, tol, method, max_step, events):
    rtol, atol = _check_tol(tol)
    y0 = np.asarray(state0, float)
    if not np.all(np.isfinite(y0)):
        raise IntegrationError("non-finite initial state", t_span[0], y0)
    rhs, jac, smooth, pert, eps = _as_problem(sys)
    if method == "auto":
        if pert is not None:
            method = "dopri5-smooth"
        elif eps is not None and eps <= STIFF_EPS and jac is not None:
            method = "Radau"
        else:
            method = "DOP853"
    if method == "dopri5-smooth":
        if eps is not None:
            max_step = min(max_step, math.sqrt(eps))
        traj, hits = _dopri_smooth(smooth, pert, y0, t_span, rtol, atol, max_step, events)
    else:
        traj, hits = _scipy(rhs, jac, y0, t_span, rtol, atol, method, max_step, events)
    if any(e.terminal for e in events) and not any(events[h.index].terminal for h in hits):
        traj.status = "no-hit"
    elif hits and events[hits[-1].index].terminal:
        traj.status = "event"
    return traj, hits


def _wrap_event(ev: EventSpec, backward: bool):
    def g(t, s):
        return ev.func(t, s)

    g.terminal = ev.terminal
    g.direction = ev.direction  # scipy also measures direction in integration order
    return g


def _scipy(rhs, jac, y0, t_span, rtol, atol, method, max_step, events):
    backward = t_span[1] < t_span[0]

    def fun(t, s):
        try:
            out = rhs(t, s)
        except (OverflowError, ZeroDivisionError, ValueError) as exc:
            raise IntegrationError(f"non-finite right-hand side ({exc})", t, s) from None
        return out

    kw = {}
    if method in ("Radau", "BDF", "LSODA") and jac is not None:
        kw["jac"] = jac
    wrapped = [_wrap_event(e, backward) for e in events]
    sol = solve_ivp(
        fun, t_span, y0, method=method, rtol=rtol, atol=atol, dense_output=True,
        events=wrapped or None, max_step=max_step, **kw,
    )
    if sol.status == -1:
        raise IntegrationError(sol.message, float(sol.t[-1]), sol.y[:, -1])
    if not np.all(np.isfinite(sol.y)):
        raise IntegrationError("non-finite state", float(sol.t[-1]), sol.y[:, -1])
    hits = []
    if events:
        for i, (te, ye) in enumerate(zip(sol.t_events, sol.y_events)):
            for tk, yk in zip(te, ye):
                hits.append(EventHit(events[i].name or f"event{i}", i, float(tk), np.array(yk)))
        hits.sort(key=lambda h: (-h.t if backward else h.t))
    order = 5 if method == "Radau" else (7 if method == "DOP853" else 4)
    traj = Trajectory(sol.t.copy(), sol.y.T.copy(), sol.sol, order, method)
    return traj, hits


class _PiecewiseDense:
    def __init__(self, t_old, h, y_old, Q):
        self.t_old = np.asarray(t_old)
        self.h = np.asarray(h)
        self.y_old = np.asarray(y_old)
        self.Q = np.asarray(Q)
        self.backward = self.h.size and self.h[0] < 0

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, float))
        key = -self.t_old if self.backward else self.t_old
        tk = -t if self.backward else t
        idx = np.clip(np.searchsorted(key, tk, side="right") - 1, 0, self.t_old.size - 1)
        x = (t - self.t_old[idx]) / self.h[idx]
        p = np.stack([x, x**2, x**3, x**4], axis=1)
        return self.y_old[idx] + self.h[idx, None] * np.einsum("knj,kj->kn", self.Q[idx], p)


def _dopri_smooth(smooth, pert, y0, t_span, rtol, atol, max_step, events):
    A, B, C, E, P = RK45.A, RK45.B, RK45.C, RK45.E, RK45.P
    t0, tf = map(float, t_span)
    sgn = 1.0 if tf >= t0 else -1.0
    n = y0.size

    def parts(t, s):
        a = np.asarray(smooth(t, s), float)
        b = np.asarray(pert(t, s), float)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise IntegrationError("non-finite right-hand side", t, s)
        return a, b

    t, y = t0, y0.copy()
    fs, fp = parts(t, y)
    f = fs + fp
    h = min(max_step, abs(tf - t0), 1e-3 * max(1.0, abs(tf - t0)))
    ts, ys, errs = [t], [y.copy()], []
    dense = ([], [], [], [])
    K = np.empty((7, n))
    Ks = np.empty((7, n))
    gvals = [e.func(t, y) for e in events]
    hits: list[EventHit] = []
    stop = False
    while sgn * (tf - t) > 0 and not stop:
        h = min(h, max_step, abs(tf - t))
        if h < 1e-14 * max(1.0, abs(t)):
            raise IntegrationError("step size underflow", t, y)
        hs = sgn * h
        K[0], Ks[0] = f, fs
        for i in range(1, 6):
            yi = y + hs * (A[i, :i] @ K[:i])
            a, b = parts(t + C[i] * hs, yi)
            K[i] = a + b
            # shadow stages of the smooth problem alone drive the error estimate
            Ks[i] = smooth(t + C[i] * hs, y + hs * (A[i, :i] @ Ks[:i]))
        y_new = y + hs * (B @ K[:6])
        fs_new, fp_new = parts(t + hs, y_new)
        K[6] = fs_new + fp_new
        Ks[6] = smooth(t + hs, y + hs * (B @ Ks[:6]))
        err = hs * (E @ Ks)
        scale = atol + np.maximum(np.abs(y), np.abs(y_new)) * rtol
        norm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if norm > 1.0:
            h *= max(0.2, 0.9 * norm ** -0.2)
            continue
        Q = K.T @ P
        t_new = t + hs
        dense[0].append(t), dense[1].append(hs), dense[2].append(y.copy()), dense[3].append(Q.copy())
        # events on this step
        local = _PiecewiseDense([t], [hs], [y], [Q])
        for k, ev in enumerate(events):
            g_new = ev.func(t_new, y_new)
            g_old = gvals[k]
            rising = g_old < 0 <= g_new
            falling = g_old > 0 >= g_new
            if (ev.direction >= 0 and rising) or (ev.direction <= 0 and falling):
                fun = lambda tt: ev.func(tt, local(tt)[0])  # noqa: E731
                lo, hi = (t, t_new) if sgn > 0 else (t_new, t)
                te = t_new if g_new == 0 else brentq(fun, lo, hi, xtol=1e-14, rtol=1e-15)
                hits.append(EventHit(ev.name or f"event{k}", k, float(te), local(te)[0]))
                if ev.terminal:
                    stop = True
            gvals[k] = g_new
        if stop:
            term = min((hh for hh in hits if events[hh.index].terminal), key=lambda hh: sgn * hh.t)
            t_new, y_new = term.t, term.state
            hits = [hh for hh in hits if sgn * hh.t <= sgn * term.t]
        t, y, f, fs = t_new, y_new, K[6].copy(), fs_new
        if stop:
            fs, fp = parts(t, y)
            f = fs + fp
        ts.append(t), ys.append(y.copy()), errs.append(norm)
        h *= min(10.0, max(0.2, 0.9 * norm ** -0.2)) if norm > 0 else 10.0
    hits.sort(key=lambda hh: sgn * hh.t)
    interp = _PiecewiseDense(*dense) if dense[0] else (lambda tt: np.tile(y0, (np.size(tt), 1)))
    traj = Trajectory(np.array(ts), np.array(ys), interp, 4, "dopri5-smooth", np.array(errs))
    return traj, hits
