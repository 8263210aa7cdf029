"""Topological degree: planar winding numbers and fixed-point indices.

The planar winding number sums the angle swept by the field along the
boundary.  Edges are bisected until each piece turns by less than pi/2, which
makes the integer unambiguous.  When a piece cannot be split any further in
floating point, the field has a jump there.  If that jump turns by less than
pi and the field stays well away from zero, it is accepted and counted as
``unresolved``; such jumps arise at the exponentially thin canard strip.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import root
from scipy.stats import qmc

MACH = np.finfo(float).eps


class DegreeError(ValueError):
    pass


@dataclass(frozen=True)
class DegreeResult:
    degree: int
    min_norm: float
    depth: int
    method: str = "winding"
    n_evals: int = 0
    unresolved: int = 0
    notes: tuple = ()

    def __int__(self):
        return self.degree

    def as_dict(self) -> dict:
        return {
            "degree": self.degree,
            "min_norm": self.min_norm,
            "depth": self.depth,
            "method": self.method,
            "n_evals": self.n_evals,
            "unresolved": self.unresolved,
            "notes": list(self.notes),
        }


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


@dataclass(frozen=True)
class PolygonBoundary:
    """Closed polygon, stored positively oriented; ``reversed`` records a flip."""

    vertices: np.ndarray
    reversed: bool = False

    def __post_init__(self):
        v = np.asarray(self.vertices, float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise DegreeError("polygon needs at least three planar vertices")
        if np.allclose(v[0], v[-1]):
            v = v[:-1]
        n = len(v)
        for i in range(n):
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue
                if _segments_cross(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]):
                    raise DegreeError("polygon boundary is not simple")
        area = 0.5 * np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        if area == 0:
            raise DegreeError("degenerate polygon")
        flipped = area < 0
        if flipped:
            v = v[::-1].copy()
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "reversed", bool(flipped) ^ self.reversed)

    @classmethod
    def rectangle(cls, lo, hi, per_side: int = 1) -> "PolygonBoundary":
        (a, b), (c, d) = lo, hi
        s = np.linspace(0, 1, per_side + 1)[:-1]
        pts = [*((a + (c - a) * t, b) for t in s), *((c, b + (d - b) * t) for t in s),
               *((c - (c - a) * t, d) for t in s), *((a, d - (d - b) * t) for t in s)]
        return cls(np.array(pts))

    @classmethod
    def circle(cls, center=(0.0, 0.0), radius=1.0, n: int = 64) -> "PolygonBoundary":
        th = 2 * np.pi * np.arange(n) / n
        return cls(np.c_[center[0] + radius * np.cos(th), center[1] + radius * np.sin(th)])

    def edges(self):
        v = self.vertices
        return [(v[i], v[(i + 1) % len(v)]) for i in range(len(v))]


def _angle(a, b) -> float:
    return math.atan2(a[0] * b[1] - a[1] * b[0], a[0] * b[0] + a[1] * b[1])


def winding_along(
    field: Callable,
    curve: Callable,
    knots,
    period: float,
    refine_tol: float = 1e-12,
    max_depth: int = 60,
    scale: float | None = None,
    accept_jumps: bool = True,
) -> DegreeResult:
    """Winding number of ``field(curve(s))`` as s runs through the sorted ``knots``.

    ``curve`` must be periodic with ``period``; the loop is closed from the
    last knot to ``knots[0] + period``.  ``refine_tol``
    is the smallest parameter length that is still bisected.
    """
    knots = list(map(float, knots))
    cache: dict[float, np.ndarray] = {}
    counter = {"n": 0}

    def F(s):
        if s not in cache:
            v = np.asarray(field(curve(s)), float)
            if v.shape != (2,) or not np.all(np.isfinite(v)):
                raise DegreeError(f"field not finite at parameter {s}")
            cache[s] = v
            counter["n"] += 1
        return cache[s]

    vals = [F(s) for s in knots]
    sc = scale if scale is not None else max(1.0, max(np.linalg.norm(v) for v in vals))
    floor = 10 * MACH * sc
    total = 0.0
    depth_used = 0
    unresolved = 0
    min_norm = math.inf
    notes = []
    period = knots[0] + float(period)

    def check(v):
        nonlocal min_norm
        n = float(np.hypot(*v))
        min_norm = min(min_norm, n)
        if n <= floor:
            raise DegreeError("field vanishes on the boundary (degree undefined)")

    for v in vals:
        check(v)
    segs = [(knots[i], knots[i + 1] if i + 1 < len(knots) else period) for i in range(len(knots))]
    if period not in cache:
        cache[period] = vals[0]
    stack = [(a, b, 0) for a, b in reversed(segs)]
    while stack:
        a, b, d = stack.pop()
        va, vb = F(a), F(b)
        ang = _angle(va, vb)
        if abs(ang) < math.pi / 2:
            total += ang
            depth_used = max(depth_used, d)
            continue
        m = 0.5 * (a + b)
        if d >= max_depth or (b - a) <= refine_tol * max(1.0, abs(a)) or m in (a, b):
            if accept_jumps and abs(ang) < math.pi * (1 - 1e-6):
                total += ang
                unresolved += 1
                depth_used = max(depth_used, d)
                if len(notes) < 5:
                    notes.append(f"unresolved jump of {math.degrees(ang):.1f} deg at s={a:.17g}")
                continue
            raise DegreeError("subdivision budget exhausted")
        vm = F(m)
        check(vm)
        stack.append((m, b, d + 1))
        stack.append((a, m, d + 1))
    deg = total / (2 * math.pi)
    k = int(round(deg))
    if abs(deg - k) > 1e-6:
        raise DegreeError(f"non-integer winding {deg}")
    return DegreeResult(k, min_norm, depth_used, "winding", counter["n"], unresolved, tuple(notes))


def winding_number(
    field: Callable,
    boundary: PolygonBoundary,
    refine_tol: float = 1e-12,
    max_depth: int = 60,
    embed: Callable | None = None,
    accept_jumps: bool = True,
    orientation: int | None = None,
) -> DegreeResult:
    """Degree of ``field`` on the region bounded by ``boundary``.

    ``embed`` optionally maps polygon points to the space where ``field`` lives
    (e.g. chart coordinates to the plane); orientation is then taken from the
    embedded loop unless ``orientation`` (+1 or -1) is supplied, which avoids
    extra evaluations of an expensive ``embed``.
    """
    verts = boundary.vertices
    n = len(verts)

    def curve(s):
        i = int(math.floor(s)) % n
        t = s - math.floor(s)
        p = (1 - t) * verts[i] + t * verts[(i + 1) % n]
        return embed(p) if embed is not None else p

    sign = 1
    if orientation is not None:
        sign = 1 if orientation > 0 else -1
    elif embed is not None:
        pts = np.array([curve(s) for s in np.arange(0, n, 0.25)])
        area = 0.5 * np.sum(pts[:, 0] * np.roll(pts[:, 1], -1) - np.roll(pts[:, 0], -1) * pts[:, 1])
        sign = 1 if area > 0 else -1
    res = winding_along(field, curve, range(n), n, refine_tol, max_depth, accept_jumps=accept_jumps)
    if sign < 0:
        res = DegreeResult(-res.degree, res.min_norm, res.depth, res.method, res.n_evals,
                           res.unresolved, res.notes + ("embedded loop negatively oriented",))
    return res


# ---------------------------------------------------------------------------
# fixed-point degree
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    @property
    def dim(self):
        return len(self.center)


def _as_domain(domain):
    if isinstance(domain, Ball):
        return domain
    lows, highs = getattr(domain, "lows", None), getattr(domain, "highs", None)
    if lows is None:
        lows, highs = domain
    return (np.asarray(lows, float), np.asarray(highs, float))


def _fd_jac(F, x, h=None):
    x = np.asarray(x, float)
    f0 = F(x)
    J = np.empty((f0.size, x.size))
    for k in range(x.size):
        hk = h or math.sqrt(MACH) * max(1.0, abs(x[k]))
        e = np.zeros_like(x)
        e[k] = hk
        J[:, k] = (F(x + e) - F(x - e)) / (2 * hk)
    return J


def fixed_point_degree(mapping: Callable, domain, n_starts: int = 64, seed: int = 0,
                       boundary_samples: int = 400) -> DegreeResult:
    """Fixed-point index of ``mapping`` on a box ``(lows, highs)`` or :class:`Ball`."""
    dom = _as_domain(domain)

    def G(x):
        x = np.atleast_1d(np.asarray(x, float))
        return x - np.atleast_1d(np.asarray(mapping(x if x.size > 1 else x), float))

    if isinstance(dom, Ball):
        c, r = np.asarray(dom.center, float), float(dom.radius)
        d = c.size

        def inside(x):
            return np.linalg.norm(x - c) < r

        rng = np.random.default_rng(seed)
        dirs = rng.normal(size=(boundary_samples, d))
        bpts = c + r * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        starts = c + r * qmc.scale(qmc.Sobol(d, seed=seed).random(n_starts), -1, 1) / math.sqrt(d)
        scale = r
    else:
        lo, hi = dom
        d = lo.size

        def inside(x):
            return bool(np.all(x > lo) and np.all(x < hi))

        rng = np.random.default_rng(seed)
        bpts = lo + (hi - lo) * rng.random((boundary_samples, d))
        face = rng.integers(0, d, boundary_samples)
        side = rng.integers(0, 2, boundary_samples)
        bpts[np.arange(boundary_samples), face] = np.where(side == 1, hi[face], lo[face])
        starts = qmc.scale(qmc.Sobol(d, seed=seed).random(n_starts), lo, hi)
        scale = float(np.max(hi - lo))
    bmin = min(float(np.linalg.norm(G(p))) for p in bpts)
    if bmin <= 1e-8 * max(1.0, scale):
        raise DegreeError("fixed point on or near the boundary")

    if d == 1:
        lo_, hi_ = (c - r, c + r) if isinstance(dom, Ball) else (lo, hi)
        ga, gb = float(G(lo_)[0]), float(G(hi_)[0])
        deg = int((np.sign(gb) - np.sign(ga)) / 2)
        return DegreeResult(deg, min(abs(ga), abs(gb)), 0, "interval-sign", 2)
    if d == 2:
        if isinstance(dom, Ball):
            poly = PolygonBoundary.circle(tuple(c), r, 64)
        else:
            poly = PolygonBoundary.rectangle(lo, hi, 4)
        res = winding_number(lambda p: G(p), poly)
        return DegreeResult(res.degree, min(res.min_norm, bmin), res.depth, "winding", res.n_evals,
                            res.unresolved, res.notes)

    roots = []
    for s in starts:
        sol = root(G, s, jac=lambda x: _fd_jac(G, x), method="hybr", tol=1e-13)
        if not sol.success or not inside(sol.x) or np.linalg.norm(G(sol.x)) > 1e-9 * max(1.0, scale):
            continue
        if all(np.linalg.norm(sol.x - q) > 1e-7 * max(1.0, scale) for q in roots):
            roots.append(sol.x)
    total = 0
    for q in roots:
        det = np.linalg.det(_fd_jac(G, q))
        if abs(det) < 1e-10:
            raise DegreeError("degenerate or non-isolated fixed point (singular I - Dmap)")
        total += int(np.sign(det))
    notes = (f"{len(roots)} fixed point(s) found by multi-start Newton; assumes all are regular",)
    return DegreeResult(total, bmin, 0, "jacobian-sign", len(starts), 0, notes)


def product_degree(d1, d2) -> int:
    """Product theorem: degree of a product map is the product of degrees."""
    return int(d1) * int(d2)


def degree_selftest() -> list[dict]:
    """Degrees of a few fields whose answers are known in closed form."""
    square = PolygonBoundary.rectangle((-1, -1), (1, 1), 4)
    cases = [
        ("identity field", lambda p: np.asarray(p, float), 1),
        ("saddle field (u, -v)", lambda p: np.array([p[0], -p[1]]), -1),
        ("squaring field z^2", lambda p: np.array([p[0] ** 2 - p[1] ** 2, 2 * p[0] * p[1]]), 2),
        ("constant field", lambda p: np.array([1.0, 0.0]), 0),
    ]
    rows = []
    for name, f, want in cases:
        r = winding_number(f, square)
        rows.append({"case": name, "expected": want, "degree": r.degree, "min_norm": r.min_norm,
                     "passed": r.degree == want})
    box3 = (-np.ones(3), np.ones(3))
    for name, f, want in [("contraction x/2 (d=3)", lambda x: 0.5 * np.asarray(x), 1),
                          ("expansion 2x (d=3)", lambda x: 2.0 * np.asarray(x), -1)]:
        r = fixed_point_degree(f, box3)
        rows.append({"case": name, "expected": want, "degree": r.degree, "min_norm": r.min_norm,
                     "passed": r.degree == want})
    return rows
