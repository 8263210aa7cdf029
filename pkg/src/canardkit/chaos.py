"""Chaotic canards from K transversal crossings: charts, coverings and itineraries.

Each crossing x*_i gets a rectangle chart (u_i, v_i) as in :mod:`canard`.
Orbits leave the section near x*_i, pass the turning point and may fall off
the repulsive branch near any of the crossing times sigma_j.  The
regularized map W^K records which rectangle receives the image.

Covering relations are checked in product coordinates with the unstable
coordinate first.  On the section that coordinate is v, and the stable block
is u together with any auxiliary z.  A floating-point check with reported
margins stands in for interval arithmetic, so all verdicts are numerical
evidence rather than proofs.

The points whose images land in the target cylinder form a strip of width
~exp(-C/eps) that grid sampling never hits.  They are reached by two-sided
matching at the mid-section instead: a forward run from the source chart
meets a backward run from the target chart.
"""
from __future__ import annotations

import dataclasses
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .canard import (
    CanardError,
    ChartError,
    ReturnMapError,
    ReturnMapEval,
    SectionChart,
    _half_orbit,
    _section_return,
    _section_state,
    _staged_fall,
    build_section_chart,
)
from .degree import DegreeError, PolygonBoundary, _segments_cross, winding_number
from .integrate import IntegrationError, integrate
from .slowgeom import MARGIN, IntersectionRecord
from .sysdef import SlowFastSystem

MACH = np.finfo(float).eps


class ItineraryError(RuntimeError):
    def __init__(self, message: str, prefix: int = 0):
        super().__init__(message)
        self.prefix = prefix


# ---------------------------------------------------------------------------
# product boxes and rectangle charts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProductBox:
    """Axis-aligned box whose first ``d_u`` coordinates are unstable."""

    lo: np.ndarray
    hi: np.ndarray
    d_u: int = 1

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, float))
        object.__setattr__(self, "hi", np.asarray(self.hi, float))
        if self.lo.shape != self.hi.shape or np.any(self.hi <= self.lo):
            raise ValueError("box needs lo < hi componentwise")
        if not 1 <= self.d_u <= self.lo.size:
            raise ValueError("d_u out of range")

    @classmethod
    def cube(cls, half: float, dim: int = 2, d_u: int = 1, center=None):
        c = np.zeros(dim) if center is None else np.asarray(center, float)
        return cls(c - half, c + half, d_u)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def d_s(self) -> int:
        return self.dim - self.d_u

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def radius(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    def unstable_gap(self, x) -> float:
        """Sup-norm distance of the unstable part of ``x`` outside the closed unstable box (<= 0 inside)."""
        x = np.asarray(x, float)
        k = self.d_u
        return float(np.max(np.abs(x[:k] - self.center[:k]) - self.radius[:k]))

    def stable_margin(self, x) -> float:
        """Distance of the stable part of ``x`` inside the open stable box (<= 0 outside)."""
        x = np.asarray(x, float)
        k = self.d_u
        if self.d_s == 0:
            return math.inf
        return float(np.min(self.radius[k:] - np.abs(x[k:] - self.center[k:])))

    def outside_distance(self, x) -> float:
        x = np.asarray(x, float)
        return float(max(0.0, np.max(np.abs(x - self.center) - self.radius)))

    def contains(self, x, tol: float = 0.0) -> bool:
        return self.outside_distance(x) <= tol

    def as_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "d_u": self.d_u}


@dataclass
class RectangleChart:
    """Chart (u, v) around the crossing x*(tau_i); Π* = {|u|, |v| < alpha/2}."""

    index: int
    record: IntersectionRecord
    alpha: float
    to_plane: Callable = field(repr=False)
    from_plane: Callable = field(repr=False)
    section: SectionChart | None = field(default=None, repr=False)

    @property
    def tau(self) -> float:
        return self.record.tau

    @property
    def sigma(self) -> float:
        return self.record.sigma

    def box(self, scale: float = 1.0, aux_dim: int = 0, z_half: float = 1.0) -> ProductBox:
        """Π(scale·alpha) in product coordinates (v, u, z...)."""
        a = scale * self.alpha / 2
        half = np.r_[a, a, np.full(aux_dim, z_half)]
        return ProductBox(-half, half, 1)

    def product_to_plane(self, x) -> np.ndarray:
        return np.asarray(self.to_plane((x[1], x[0])), float)

    def plane_to_product(self, pq) -> np.ndarray:
        u, v = self.from_plane(pq)
        return np.array([v, u])

    def polygon(self, scale: float = 2.0, per_side: int = 8) -> np.ndarray:
        a = scale * self.alpha / 2
        poly = PolygonBoundary.rectangle((-a, -a), (a, a), per_side)
        return np.array([self.to_plane(p) for p in poly.vertices])

    def as_dict(self) -> dict:
        return {"index": self.index, "alpha": self.alpha, "tau": self.tau, "sigma": self.sigma,
                "A": self.record.A, "x_star": np.asarray(self.record.x_star).tolist(),
                "section": None if self.section is None else self.section.as_dict()}


def _affine_maps(rec):
    fa, fr = np.asarray(rec.vel_a, float), np.asarray(rec.vel_r, float)
    M = np.column_stack([-fa, -fr])
    c = np.asarray(rec.pq_star, float)
    Minv = np.linalg.inv(M)
    return (lambda uv: c + M @ np.asarray(uv, float)), (lambda pq: Minv @ (np.asarray(pq, float) - c))


def _point_in_polygon(pt, poly) -> bool:
    x, y = pt
    inside = False
    n = len(poly)
    for k in range(n):
        (x1, y1), (x2, y2) = poly[k], poly[(k + 1) % n]
        if (y1 > y) != (y2 > y) and x < x1 + (y - y1) * (x2 - x1) / (y2 - y1):
            inside = not inside
    return inside


def polygons_overlap(P, Q) -> bool:
    """True when two simple polygons intersect (edge crossing or containment)."""
    P, Q = np.asarray(P, float), np.asarray(Q, float)
    for a in range(len(P)):
        p1, p2 = P[a], P[(a + 1) % len(P)]
        for b in range(len(Q)):
            if _segments_cross(p1, p2, Q[b], Q[(b + 1) % len(Q)]):
                return True
    # no proper crossing: overlap can still hide behind shared or collinear edges
    probes = [(pt, Q) for pt in [*P, P.mean(axis=0)]] + [(pt, P) for pt in [*Q, Q.mean(axis=0)]]
    return any(_point_in_polygon(pt, poly) for pt, poly in probes)


def _polygon_gap(P, Q) -> float:
    """Smallest vertex-to-vertex distance; a cheap proxy for the separation."""
    d = np.linalg.norm(np.asarray(P)[:, None, :] - np.asarray(Q)[None, :, :], axis=2)
    return float(d.min())


def build_multi_chart(sys: SlowFastSystem | None, records: Sequence[IntersectionRecord], alpha: float | None = None,
                      branches=None, per_side: int = 8) -> list[RectangleChart]:
    """One rectangle chart per crossing, with a common alpha and checked disjointness.

    With ``sys`` or ``branches`` left out, the charts are the affine
    linearizations x* - u f_a - v f_r of each record.  Otherwise each chart
    is a flow-time chart built as for a single crossing, and all charts share
    the turning-point ball, tube width and fall threshold.
    """
    records = list(records)
    K = len(records)
    if K < 2:
        raise ChartError("need at least two crossings")
    for r in records:
        if abs(r.A) <= MARGIN:
            raise ChartError(f"non-transversal crossing at tau = {r.tau} (|A| = {abs(r.A):.3g})")
    taus = np.array([r.tau for r in records])
    dt = np.abs(taus[:, None] - taus[None, :])
    np.fill_diagonal(dt, np.inf)
    if dt.min() <= MARGIN:
        raise ChartError("crossing times tau must be pairwise distinct")
    sigmas = np.sort([r.sigma for r in records])
    gap = float(np.min(np.diff(sigmas))) if K > 1 else math.inf

    if sys is None or branches is None:
        if alpha is None:
            raise ChartError("affine charts need an explicit alpha")
        charts = []
        for k, r in enumerate(records):
            to_p, from_p = _affine_maps(r)
            charts.append(RectangleChart(k, r, float(alpha), to_p, from_p))
    else:
        if alpha is None:
            alpha = min(build_section_chart(sys, r, branches).alpha for r in records)
            alpha = min(alpha, 0.9 * gap / 6)
        if gap <= 6 * alpha:
            raise ChartError(f"alpha = {alpha} too large for the crossing-time gap {gap:.4g}", 0.9 * gap / 6)
        sections = [build_section_chart(sys, r, branches, alpha=alpha) for r in records]
        sections = _common_section_parameters(sys, sections, sigmas[-1] + 3 * alpha)
        charts = [RectangleChart(k, r, float(alpha), sc.inverse, sc.uv, sc) for k, (r, sc) in
                  enumerate(zip(records, sections))]

    polys = [c.polygon(2.0, per_side) for c in charts]
    for a in range(K):
        for b in range(a + 1, K):
            if polygons_overlap(polys[a], polys[b]):
                raise ChartError(f"charts {a + 1} and {b + 1} overlap at alpha = {alpha}", 0.5 * alpha)
    return charts


def _common_section_parameters(sys, sections, t_max):
    """Share the turning-point ball, tube width and fall threshold between charts."""
    gr, fr = sections[0].gr, sections[0].frame
    r0 = min(sc.omega0_radius for sc in sections)
    sel = (gr.t >= 0) & (gr.t <= t_max)
    W = np.array([fr.from_pqh((p, q, h)) for (p, q), h in zip(gr.pq[sel], gr.h[sel])])
    far = np.linalg.norm(W[:, :2] - fr.origin[:2], axis=1) >= r0
    theta = 0.5 * float(min(sys.reduced("Yy", w) for w in W[far]))
    window = (0.0, t_max + sections[0].alpha)
    return [dataclasses.replace(sc, omega0_radius=r0, fall_threshold=theta, guess_window=window)
            for sc in sections]


# ---------------------------------------------------------------------------
# the map W^K
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChaoticReturnEval(ReturnMapEval):
    source: int = 0
    target: int | None = None
    subcase: str = ""

    def as_dict(self) -> dict:
        d = super().as_dict()
        d.update(source=self.source, target=self.target, subcase=self.subcase)
        return d


def _state_at(sys, state, t0, t1, tol):
    if t1 == t0:
        return np.asarray(state, float)
    return integrate(sys, state, (t0, t1), tol=tol).final


def eval_chaotic_return(sys: SlowFastSystem, charts: Sequence[RectangleChart], i: int, point, z0=None,
                        tol=(1e-9, 1e-11)) -> ChaoticReturnEval:
    """W^K at ``point`` (p, q) of the section through chart ``i``; time starts at tau_i."""
    sc = charts[i].section
    if sc is None:
        raise ReturnMapError("affine charts carry no flow; build the charts with the system")
    a = charts[i].alpha
    order = np.argsort([c.sigma for c in charts])
    sig = np.array([charts[k].sigma for k in order])
    state = _section_state(sc, point, z0, sys.dim)
    kind, t0, t1, s1 = _staged_fall(sys, sc, state, sc.tau, sig[-1] + 3 * a, tol)
    target = None
    raw_state = None
    t2 = None
    if kind == "escape":
        case, sub, s = 1, "", sig[-1] + 2 * a
    elif kind == "none":
        case, sub, s = 3, "", sig[-1] + 2 * a
    elif t1 < sig[0] - 3 * a:
        case, sub, s = 2, "", sig[0] - 2 * a
    else:
        case = 4
        near = np.flatnonzero(np.abs(t1 - sig) <= 3 * a)
        if near.size:
            m = int(near[0])
            target = int(order[m])
            sub = "a"
            h0 = charts[target].section.h0
            h = _section_return(sys, sc, s1, t1, h0, sig[m] + 2 * a, tol)
            t2 = h.t if h is not None else sig[m] + 2 * a
            s = min(max(t2, sig[m] - 2 * a), sig[m] + 2 * a)
            raw_state = h.state if (h is not None and s == t2) else _state_at(sys, s1, t1, s, tol)
        else:
            m = int(np.searchsorted(sig, t1)) - 1
            lo, hi = sig[m], sig[m + 1]
            sub = "b"
            s = (hi - lo - 4 * a) * (t1 - lo - 3 * a) / (hi - lo - 6 * a) + lo + 2 * a
            raw_state = _state_at(sys, state, sc.tau, s, tol)
    if s <= sig[0] - 1.5 * a:
        lam = min((sig[0] - 1.5 * a - s) / (0.5 * a), 1.0)
    elif s >= sig[-1] + 1.5 * a:
        lam = min((s - sig[-1] - 1.5 * a) / (0.5 * a), 1.0)
    else:
        lam = 0.0
    wstar = sc.limiting_point(s)
    if lam == 1.0 or raw_state is None:
        out, lam = wstar, (1.0 if raw_state is None else lam)
    else:
        raw = sc.frame.to_pqh(raw_state)[:2]
        out = (1 - lam) * raw + lam * wstar
    z_out = raw_state[3:] if (raw_state is not None and sys.dim > 3) else None
    cls = {1: "destabilizing", 2: "stabilizing", 3: "destabilizing", 4: "near-canard"}[case]
    return ChaoticReturnEval(np.asarray(point, float), None if z0 is None else np.atleast_1d(z0), float(s), case,
                             float(lam), np.asarray(out, float), z_out, cls, t0, t1, t2,
                             source=i, target=target, subcase=sub)


def chart_coordinates(chart: RectangleChart, ev: ReturnMapEval) -> np.ndarray:
    """(u, v) of an image in ``chart``; points w*(s) sit at (0, sigma - s) exactly."""
    if ev.blend == 1.0:
        return np.array([0.0, chart.sigma - ev.s])
    return np.asarray(chart.from_plane(ev.output), float)


# ---------------------------------------------------------------------------
# (V, W)-hyperbolicity
# ---------------------------------------------------------------------------

@dataclass
class CoveringReport:
    source: int | None
    target: int | None
    exit_margin: float
    containment_margin: float
    degree: int
    verdict: str
    n_samples: int
    n_cylinder: int
    grid_n: int
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def as_dict(self) -> dict:
        f = lambda x: None if not math.isfinite(x) else x  # noqa: E731
        return {"source": self.source, "target": self.target, "exit_margin": f(self.exit_margin),
                "containment_margin": f(self.containment_margin), "degree": self.degree,
                "verdict": self.verdict, "n_samples": self.n_samples, "n_cylinder": self.n_cylinder,
                "grid_n": self.grid_n, "notes": list(self.notes)}


def _as_box(B, d_u) -> ProductBox:
    if isinstance(B, ProductBox):
        return B
    lo, hi = B
    return ProductBox(lo, hi, d_u)


def _grid(lo, hi, n) -> np.ndarray:
    axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))


def _face_samples(V: ProductBox, n: int) -> np.ndarray:
    pts = []
    for k in range(V.d_u):
        for side in (V.lo[k], V.hi[k]):
            lo, hi = V.lo.copy(), V.hi.copy()
            lo[k] = hi[k] = side
            pts.append(_grid(lo, hi, n) if V.dim > 1 else np.array([[side]]))
    return np.unique(np.concatenate(pts), axis=0)


def _unstable_degree(gu, V: ProductBox, W: ProductBox) -> int:
    """Degree of g^(u) - c on V^(u) with the stable coordinates frozen at the centre of V."""
    k = V.d_u
    c = W.center[:k]
    s_c = V.center[k:]
    if k == 1:
        lo = gu(np.r_[V.lo[0], s_c])[0] - c[0]
        hi = gu(np.r_[V.hi[0], s_c])[0] - c[0]
        if lo == 0.0 or hi == 0.0:
            raise DegreeError("g^(u) vanishes on the boundary of V^(u)")
        return int((np.sign(hi) - np.sign(lo)) // 2)
    if k == 2:
        poly = PolygonBoundary.rectangle(V.lo[:2], V.hi[:2], 4)
        res = winding_number(lambda u: gu(np.r_[u, s_c])[:2] - c, poly, refine_tol=1e-10)
        return res.degree
    raise DegreeError("degree of g^(u) implemented for d_u <= 2")


def verify_hyperbolicity(map: Callable, V, W, d_u: int, d_s: int, grid_n: int = 16,
                         cylinder_samples: Sequence | None = None, interior_n: int | None = None,
                         source: int | None = None, target: int | None = None) -> CoveringReport:
    """Check (V, W)-hyperbolicity of ``map`` in product coordinates (unstable first).

    The boundary faces ∂V^(u) x V̄^(s) are sampled with ``grid_n`` points per
    axis.  Their images must leave the closed unstable box of W, and the exit
    margin is the smallest sup-norm gap.  Samples of V̄ (a grid with
    ``interior_n`` points per axis, plus any ``cylinder_samples`` given as
    (x, g(x)) pairs) whose images fall into the unstable cylinder of W must
    land inside W^(s); the containment margin is the smallest inner gap.
    The degree of g^(u) is taken at the frozen centre of V^(s).
    """
    V, W = _as_box(V, d_u), _as_box(W, d_u)
    if V.dim != d_u + d_s or W.dim != d_u + d_s or V.d_u != d_u or W.d_u != d_u:
        raise ValueError("box dimensions do not match d_u + d_s")
    if grid_n < 16:
        raise ValueError("grid_n must be at least 16 per face")
    cache: dict = {}

    def g(x):
        key = tuple(np.round(np.asarray(x, float), 15))
        if key not in cache:
            cache[key] = np.asarray(map(np.asarray(x, float)), float)
        return cache[key]

    notes = []
    faces = _face_samples(V, grid_n)
    exit_margin = min(W.unstable_gap(g(x)) for x in faces)
    interior = _grid(V.lo, V.hi, interior_n or grid_n)
    pairs = [(x, g(x)) for x in interior] + [(np.asarray(x), np.asarray(y)) for x, y in (cylinder_samples or ())]
    inside = [W.stable_margin(y) for _, y in pairs if W.unstable_gap(y) <= 0]
    n_cyl = len(inside)
    containment = min(inside) if inside else math.inf
    if not inside:
        notes.append("no sample landed in the unstable cylinder of W")
    try:
        degree = _unstable_degree(g, V, W)
    except DegreeError as exc:
        notes.append(f"degree undefined: {exc}")
        degree = 0
    ok = exit_margin > 0 and containment > 0 and degree != 0
    if exit_margin <= 0:
        notes.append("boundary images meet the closed unstable box of W")
    if containment <= 0:
        notes.append("an image in the unstable cylinder leaves W^(s)")
    return CoveringReport(source, target, float(exit_margin), float(containment), int(degree),
                          "pass" if ok else "fail", len(cache), n_cyl, grid_n, notes)


@dataclass
class CoveringMatrix:
    reports: list  # K x K nested list of CoveringReport
    evidence: str = "floating-point covering verification (numerical evidence, not a proof)"
    extras: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.reports)

    @property
    def verdicts(self) -> np.ndarray:
        return np.array([[r.passed for r in row] for row in self.reports])

    @property
    def all_pass(self) -> bool:
        return bool(self.verdicts.all())

    def as_dict(self) -> dict:
        return {"K": self.K, "all_pass": self.all_pass, "evidence": self.evidence,
                "verdicts": self.verdicts.astype(int).tolist(),
                "reports": [[r.as_dict() for r in row] for row in self.reports], **self.extras}

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# entropy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EntropyBound:
    K: int
    value: float | None
    withheld: bool
    evidence: str
    failures: tuple = ()

    def __float__(self):
        if self.value is None:
            raise ValueError("entropy bound withheld")
        return self.value

    def as_dict(self) -> dict:
        return {"K": self.K, "value": self.value, "withheld": self.withheld, "evidence": self.evidence,
                "failures": [list(f) for f in self.failures]}


def entropy_lower_bound(K: int, covering=None) -> EntropyBound:
    """log K, provided every covering i -> j of the K x K matrix passed.

    ``covering`` may be a :class:`CoveringMatrix`, a K x K array of verdicts
    or reports, or None when the caller vouches for the coverings.
    """
    if int(K) != K or K < 2:
        raise ValueError("K must be an integer >= 2")
    K = int(K)
    if covering is None:
        return EntropyBound(K, math.log(K), False, "coverings assumed verified by the caller")
    if isinstance(covering, CoveringMatrix):
        ok, evidence = covering.verdicts, covering.evidence
    else:
        ok = np.array([[getattr(c, "passed", c) for c in row] for row in covering], dtype=bool)
        evidence = "floating-point covering verification (numerical evidence, not a proof)"
    if ok.shape != (K, K):
        raise ValueError(f"covering matrix must be {K} x {K}")
    failures = tuple((i + 1, j + 1) for i, j in zip(*np.nonzero(~ok)))
    if failures:
        return EntropyBound(K, None, True, "withheld: unverified coverings", failures)
    return EntropyBound(K, math.log(K), False, evidence)


# ---------------------------------------------------------------------------
# itineraries
# ---------------------------------------------------------------------------

@dataclass
class ItineraryResult:
    omega: tuple
    point: np.ndarray
    iterates: np.ndarray
    residuals: np.ndarray
    margins: np.ndarray
    periodic: bool
    interval_widths: np.ndarray
    period_residual: float | None = None

    @property
    def max_residual(self) -> float:
        r = float(np.max(self.residuals)) if self.residuals.size else 0.0
        return max(r, self.period_residual or 0.0)

    def as_dict(self) -> dict:
        return {"omega": [k + 1 for k in self.omega], "point": self.point.tolist(),
                "residuals": self.residuals.tolist(), "margins": self.margins.tolist(),
                "periodic": self.periodic, "interval_widths": self.interval_widths.tolist(),
                "period_residual": self.period_residual}


def parse_symbols(text: str) -> tuple:
    """'1212' -> (0, 1, 0, 1): symbols are 1-based digits outside, 0-based inside."""
    if not text or not text.isdigit() or "0" in text:
        raise ValueError(f"symbol sequence must be 1-based digits, got {text!r}")
    return tuple(int(c) - 1 for c in text)


def _orbit(map, x, k):
    xs = [np.asarray(x, float)]
    for _ in range(k):
        xs.append(np.asarray(map(xs[-1]), float))
    return xs


def _track(map, boxes, omega, s0):
    """Nested intervals of unstable coordinates in box omega_0 realizing each prefix."""
    B0 = boxes[omega[0]]
    a, b = float(B0.lo[0]), float(B0.hi[0])
    widths = [b - a]

    def x_of(u):
        return np.r_[u, s0]

    for k in range(1, len(omega)):
        Bk = boxes[omega[k]]
        lo, hi = float(Bk.lo[0]), float(Bk.hi[0])

        def gk(u, k=k):
            return _orbit(map, x_of(u), k)[-1][0]

        fa, fb = gk(a), gk(b)
        if not ((fa < lo and fb > hi) or (fa > hi and fb < lo)):
            raise ItineraryError(f"images of the tracking interval do not straddle box {omega[k] + 1}", k)
        scale = max(1.0, abs(a), abs(b))
        u1 = brentq(lambda u: gk(u) - lo, a, b, xtol=MACH * scale, rtol=4 * MACH, maxiter=200)
        u2 = brentq(lambda u: gk(u) - hi, a, b, xtol=MACH * scale, rtol=4 * MACH, maxiter=200)
        a, b = min(u1, u2), max(u1, u2)
        if b - a < 10 * MACH * scale:
            raise ItineraryError(f"tracking interval collapsed after {k} symbols", k)
        widths.append(b - a)
    return a, b, np.array(widths), x_of


def realize_itinerary(map: Callable, boxes: Sequence[ProductBox], omega: Sequence[int], tol: float = 1e-8,
                      periodic: bool = False, max_newton: int = 30, fd_step: float = 1e-7) -> ItineraryResult:
    """Point whose iterates visit ``boxes[omega[0]], boxes[omega[1]], ...`` (0-based symbols).

    The unstable coordinate (d_u = 1) is narrowed by nested subdivision at
    the frozen stable centre of the first box.  For ``periodic`` the word is
    one period; the tracked point is then refined by Newton on f^p(x) - x.
    """
    omega = tuple(int(k) for k in omega)
    if not omega:
        raise ValueError("empty itinerary")
    if any(B.d_u != 1 for B in boxes):
        raise ValueError("itinerary shooting implemented for d_u = 1")
    s0 = boxes[omega[0]].center[1:]
    word = omega
    if periodic:
        reps = max(2, int(math.ceil(12 / len(omega))))
        word = (omega * reps) + (omega[0],)
    a, b, widths, x_of = _track(map, boxes, word, s0)
    x = x_of(0.5 * (a + b))
    period_res = None
    if periodic:
        p = len(omega)
        for _ in range(max_newton):
            F = _orbit(map, x, p)[-1] - x
            if np.max(np.abs(F)) < 1e-3 * tol:
                break
            J = np.empty((x.size, x.size))
            for k in range(x.size):
                e = np.zeros_like(x)
                e[k] = fd_step
                J[:, k] = ((_orbit(map, x + e, p)[-1] - x - e) - (_orbit(map, x - e, p)[-1] - x + e)) / (2 * fd_step)
            x = x - np.linalg.solve(J, F)
        period_res = float(np.linalg.norm(_orbit(map, x, p)[-1] - x))
        if not period_res < tol:
            raise ItineraryError(f"periodic refinement stalled at residual {period_res:.3g}", len(word))
    n = len(omega) + (1 if periodic else 0)
    seq = (omega + (omega[0],)) if periodic else omega
    its = np.array(_orbit(map, x, n - 1))
    res = np.array([boxes[k].outside_distance(y) for k, y in zip(seq, its)])
    marg = np.array([float(np.min(boxes[k].radius - np.abs(y - boxes[k].center))) for k, y in zip(seq, its)])
    if np.max(res) >= tol:
        raise ItineraryError("realized point leaves a prescribed box", int(np.argmax(res >= tol)))
    return ItineraryResult(omega, x, its, res, marg, periodic, widths, period_res)


# ---------------------------------------------------------------------------
# affine horseshoe model
# ---------------------------------------------------------------------------

@dataclass
class AffineHorseshoe:
    """Two boxes on the x-axis; branch k maps box k affinely across both.

    Branch k: x' = flip_k * expansion * (x - c_k),  y' = contraction * y.
    """

    expansion: float = 3.0
    contraction: float = 1.0 / 3.0
    centers: tuple = (-1.5, 1.5)
    half_width: float = 1.0
    flips: tuple = (1.0, -1.0)

    @property
    def K(self) -> int:
        return len(self.centers)

    @property
    def boxes(self) -> list[ProductBox]:
        w = self.half_width
        return [ProductBox((c - w, -w), (c + w, w), 1) for c in self.centers]

    def branch_affine(self, k):
        A = np.diag([self.flips[k] * self.expansion, self.contraction])
        b = np.array([-self.flips[k] * self.expansion * self.centers[k], 0.0])
        return A, b

    def which(self, x) -> int:
        d = [B.outside_distance(x) for B in self.boxes]
        return int(np.argmin(d))

    def __call__(self, x):
        A, b = self.branch_affine(self.which(x))
        return A @ np.asarray(x, float) + b

    def covering_map(self, i: int, j: int) -> Callable:
        """Branch i in local coordinates of box i (domain) and box j (range)."""
        w, ci, cj = self.half_width, self.centers[i], self.centers[j]
        A, b = self.branch_affine(i)

        def g(x):
            y = A @ np.array([ci + w * x[0], w * x[1]]) + b
            return np.array([(y[0] - cj) / w, y[1] / w])

        return g

    def periodic_point(self, word: Sequence[int]) -> np.ndarray:
        """Closed-form fixed point of the composed affine branches along ``word``."""
        A, b = np.eye(2), np.zeros(2)
        for k in word:
            Ak, bk = self.branch_affine(k)
            A, b = Ak @ A, Ak @ b + bk
        return np.linalg.solve(np.eye(2) - A, b)

    def oracle_interval(self, omega: Sequence[int]) -> tuple[float, float]:
        """Exact x-interval of points in box omega_0 following ``omega``, by inverse branches."""
        w = self.half_width
        lo, hi = self.centers[omega[-1]] - w, self.centers[omega[-1]] + w
        for k in reversed(omega[:-1]):
            e = self.flips[k] * self.expansion
            a, b = sorted((lo / e + self.centers[k], hi / e + self.centers[k]))
            lo, hi = max(a, self.centers[k] - w), min(b, self.centers[k] + w)
        return lo, hi

    def covering_matrix(self, grid_n: int = 16) -> CoveringMatrix:
        V = ProductBox.cube(1.0)
        reports = [[verify_hyperbolicity(self.covering_map(i, j), V, V, 1, 1, grid_n, source=i, target=j)
                    for j in range(self.K)] for i in range(self.K)]
        return CoveringMatrix(reports)


# ---------------------------------------------------------------------------
# slow-fast coverings through strip matching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StripPoint:
    """A matched orbit from chart ``source`` to chart ``target`` through the mid-section."""

    source: int
    target: int
    u_src: float
    v_src: float
    u_tgt: float
    v_tgt: float
    s: float
    residual: float
    pq_src: np.ndarray
    pq_tgt: np.ndarray

    def as_dict(self) -> dict:
        return {"source": self.source + 1, "target": self.target + 1, "u_src": self.u_src, "v_src": self.v_src,
                "u_tgt": self.u_tgt, "v_tgt": self.v_tgt, "s": self.s, "residual": self.residual}


def _arm_times(sc: SectionChart, slack: float = 1.25):
    """Times at which the branches enter (Γ_a) and leave (Γ_r) the turning-point ball, widened by ``slack``.

    Orbits from several charts cross q = 0 at other crossings before they
    reach the turning point, so the mid-section event waits for these times.
    """
    out = []
    for br in (sc.ga, sc.gr):
        d = np.linalg.norm(br.pq - sc.frame.origin[:2], axis=1)
        outside = np.flatnonzero(d >= sc.omega0_radius)
        t = br.t
        if br is sc.ga:
            k = outside[outside < np.argmax(t)].max()
            out.append(slack * float(t[k + 1]))
        else:
            k = outside[outside > np.argmin(t)].min()
            out.append(slack * float(t[k - 1]))
    return tuple(out)


class _HalfOrbits:
    """Cached forward runs from chart points and backward runs from target chart points."""

    def __init__(self, sys, charts, z0=None, tol=(1e-11, 1e-13), method: str = "DOP853"):
        self.sys, self.charts, self.tol, self.method = sys, charts, tol, method
        self.z0 = z0
        self.cache: dict = {}
        self.t_arm = _arm_times(charts[0].section)

    def __call__(self, k, uv, direction):
        key = (k, float(uv[0]), float(uv[1]), direction)
        if key not in self.cache:
            ch = self.charts[k]
            pq = ch.to_plane(uv)
            t_arm = self.t_arm[0 if direction > 0 else 1]
            _, hit = _half_orbit(self.sys, ch.section, pq, self.z0, direction, self.tol, t_arm, self.method)
            pqh = ch.section.frame.to_pqh(hit.state)
            self.cache[key] = (np.r_[pqh[0], pqh[2], hit.state[3:]], hit.t, pq)
        return self.cache[key]


def match_strip(sys, charts, i: int, j: int, u_src: float, v_tgt: float, guess=(0.0, 0.0), J=None,
                halves: _HalfOrbits | None = None, refine_tol: float = 1e-10, max_iter: int = 20,
                fd_step: float = 1e-7):
    """Solve forward(u_src, v_src) = backward(u_tgt, v_tgt) for (v_src, u_tgt).

    Returns the matched :class:`StripPoint` and the Jacobian used, which can
    be passed back in as a chord for neighbouring solves.
    """
    if sys.aux_dim:
        raise CanardError("strip matching is implemented for systems without auxiliary variables")
    halves = halves or _HalfOrbits(sys, charts)
    y = np.asarray(guess, float).copy()

    def resid(y):
        f, tf, _ = halves(i, (u_src, y[0]), +1)
        b, tb, _ = halves(j, (y[1], v_tgt), -1)
        return f - b

    def jac(y, r):
        Jm = np.empty((2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = fd_step
            Jm[:, k] = (resid(y + e) - r) / fd_step
        return Jm

    r = resid(y)
    if J is None:
        J = jac(y, r)
    for _ in range(max_iter):
        if np.max(np.abs(r)) < refine_tol:
            break
        step = np.linalg.solve(J, r)
        lam = 1.0
        while True:
            try:
                r_new = resid(y - lam * step)
                if np.max(np.abs(r_new)) < np.max(np.abs(r)) or lam < 1e-3:
                    break
            except (CanardError, IntegrationError):
                if lam < 1e-3:
                    raise
            lam *= 0.5
        dy = -lam * step
        if np.max(np.abs(r_new)) > 0.5 * np.max(np.abs(r)):
            J = jac(y + dy, r_new)
        else:
            # Broyden update keeps the chord accurate without extra runs
            J = J + np.outer(r_new - r - J @ dy, dy) / (dy @ dy)
        y, r = y + dy, r_new
    res = float(np.max(np.abs(r)))
    if res >= refine_tol:
        raise CanardError(f"strip matching did not converge (residual {res:.3g})")
    _, tf, pq_s = halves(i, (u_src, y[0]), +1)
    _, tb, pq_t = halves(j, (y[1], v_tgt), -1)
    s = tf + (charts[j].sigma - tb)
    return StripPoint(i, j, float(u_src), float(y[0]), float(y[1]), float(v_tgt), float(s), res,
                      np.asarray(pq_s), np.asarray(pq_t)), J


def strip_samples(sys, charts, i: int, j: int, u_values, v_levels, halves=None, refine_tol: float = 1e-10):
    """Matched points over a (u_src, v_tgt) grid.

    Guesses come from neighbours: v_src mostly depends on u_src and u_tgt
    on v_tgt, so each solve usually needs a single Newton step.
    """
    halves = halves or _HalfOrbits(sys, charts)
    out = []
    J = None
    v_src = {}
    u_tgt = 0.0
    for row, v_t in enumerate(v_levels):
        for k, u_s in enumerate(u_values):
            if row:
                vg = v_src[k]
            elif k >= 2:
                vg = 2 * v_src[k - 1] - v_src[k - 2]
            else:
                vg = v_src.get(k - 1, 0.0)
            pt, J = match_strip(sys, charts, i, j, u_s, v_t, (vg, u_tgt), J, halves, refine_tol)
            if row == 0:
                v_src[k] = pt.v_src
            u_tgt = pt.u_tgt
            out.append(pt)
        u_tgt = out[-len(u_values)].u_tgt
    return out


def slowfast_covering_map(sys, charts, i: int, j: int, cache: dict | None = None, tol=(1e-9, 1e-11)) -> Callable:
    """g_ij in product coordinates: (v_i, u_i) -> (v_j, u_j) of W^K(h_i(u_i, v_i))."""
    cache = {} if cache is None else cache

    def g(x):
        key = (i, float(x[0]), float(x[1]))
        if key not in cache:
            cache[key] = eval_chaotic_return(sys, charts, i, charts[i].product_to_plane(x), tol=tol)
        u, v = chart_coordinates(charts[j], cache[key])
        return np.array([v, u])

    return g


def verify_slowfast_coverings(sys, charts, grid_n: int = 16, interior_n: int = 8, v_levels: int = 3,
                              refine_tol: float = 1e-10, progress: Callable | None = None) -> CoveringMatrix:
    """All K x K coverings of the designed slow-fast map on Π* = {|u|, |v| < alpha/2}.

    Grid samples give the boundary exits and the containment check away
    from the strips; matched strip points supply the samples whose images
    land in the target cylinder.
    """
    K = len(charts)
    cache: dict = {}
    halves = _HalfOrbits(sys, charts)
    reports, strips = [], {}
    for i in range(K):
        row = []
        a = charts[i].alpha / 2
        u_vals = np.linspace(-a, a, grid_n)
        for j in range(K):
            b = charts[j].alpha / 2
            pts = strip_samples(sys, charts, i, j, u_vals, np.linspace(-b, b, v_levels), halves, refine_tol)
            strips[(i, j)] = pts
            cyl = [(np.array([p.v_src, p.u_src]), np.array([p.v_tgt, p.u_tgt])) for p in pts]
            rep = verify_hyperbolicity(slowfast_covering_map(sys, charts, i, j, cache), charts[i].box(),
                                       charts[j].box(), 1, 1, grid_n, cyl, interior_n, source=i, target=j)
            if not all(abs(p.v_src) < a for p in pts):
                rep.verdict = "fail"
                rep.notes.append("strip lies outside the source rectangle")
            row.append(rep)
            if progress:
                progress(i, j, rep)
        reports.append(row)
    extras = {"strips": {f"{i + 1}->{j + 1}": [p.as_dict() for p in v] for (i, j), v in strips.items()},
              "alpha": charts[0].alpha, "epsilon": sys.epsilon}
    return CoveringMatrix(reports, extras=extras)


@dataclass
class SlowFastItineraries:
    """Symbolic orbits of the designed map built from matched legs.

    ``anchors[k]`` is the period-one point of branch k in chart k, as (u, v).
    ``legs[(i, j)]`` is the matched orbit from anchor i towards anchor j and
    ``leg_mismatch[(i, j)]`` how far its ends sit from the two anchors.  Any
    word is realized by chaining legs, with residual the largest mismatch
    along the word.
    """

    anchors: list
    legs: dict
    leg_mismatch: dict
    results: list
    alpha: float

    @property
    def max_residual(self) -> float:
        return max((r.max_residual for r in self.results), default=0.0)

    def as_dict(self) -> dict:
        return {"anchors": [list(map(float, a)) for a in self.anchors],
                "legs": {f"{i + 1}->{j + 1}": p.as_dict() for (i, j), p in self.legs.items()},
                "leg_mismatch": {f"{i + 1}->{j + 1}": m for (i, j), m in self.leg_mismatch.items()},
                "n_itineraries": len(self.results), "max_residual": self.max_residual,
                "min_margin": min((float(r.margins.min()) for r in self.results), default=None)}


def realize_slowfast_itineraries(sys, charts, max_length: int = 6, halves=None, refine_tol: float = 1e-10,
                                 tol: float = 1e-8, max_iter: int = 8) -> SlowFastItineraries:
    """Realize every word of length ``max_length`` over the K charts.

    The matched strips are exponentially thin, so the point of chart k that
    starts a leg towards any target and ends a leg from any source is, to
    working precision, the period-one point of branch k.  It is found by
    alternating self-leg matches.  The 2K legs between anchors are then
    matched once and words are chained from them.
    """
    K = len(charts)
    halves = halves or _HalfOrbits(sys, charts)
    anchors = []
    for k in range(K):
        u, v = 0.0, 0.0
        J = None
        for _ in range(max_iter):
            pt, J = match_strip(sys, charts, k, k, u, v, (v, u), J, halves, refine_tol)
            du, dv = pt.u_tgt - u, pt.v_src - v
            u, v = pt.u_tgt, pt.v_src
            if max(abs(du), abs(dv)) < 0.1 * tol:
                break
        else:
            raise ItineraryError(f"period-one point of branch {k + 1} did not settle", 1)
        anchors.append((u, v))
    legs, mismatch = {}, {}
    for i in range(K):
        for j in range(K):
            (ui, vi), (uj, vj) = anchors[i], anchors[j]
            pt, _ = match_strip(sys, charts, i, j, ui, vj, (vi, uj), None, halves, refine_tol)
            legs[(i, j)] = pt
            mismatch[(i, j)] = float(max(abs(pt.v_src - vi), abs(pt.u_tgt - uj), pt.residual))
    a = charts[0].alpha / 2
    results = []
    for word in itertools.product(range(K), repeat=max_length):
        its = np.array([[anchors[k][1], anchors[k][0]] for k in word])  # product coordinates (v, u)
        res = np.array([0.0] + [mismatch[(p, q)] for p, q in zip(word, word[1:])])
        marg = a - np.max(np.abs(its), axis=1)
        r = ItineraryResult(tuple(word), its[0].copy(), its, res, marg, False, np.array([]))
        if r.max_residual >= tol or marg.min() <= 0:
            raise ItineraryError(f"word {''.join(str(k + 1) for k in word)} not realized "
                                 f"(residual {r.max_residual:.3g}, margin {marg.min():.3g})", max_length)
        results.append(r)
    return SlowFastItineraries(anchors, legs, mismatch, results, charts[0].alpha)
