"""Slow-fast and planar parametrized systems, plus the built-in examples.

A :class:`SlowFastSystem` stores its right-hand sides as sympy expressions in
the symbols ``x1, x2, y, z1..zd, eps``.  Fast numeric closures and exact
partial derivatives are generated from those expressions on demand.  Optional
perturbations are plain callables that are never differentiated.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np
import sympy as sp

X1, X2, Y, EPS = sp.symbols("x1 x2 y eps", real=True)
PX, PY, PA = sp.symbols("x y a", real=True)


def z_symbols(d: int) -> tuple:
    return tuple(sp.symbols(f"z1:{d + 1}", real=True)) if d else ()


class SystemError_(ValueError):
    """Invalid system name or parameters."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned closed box; one (low, high) pair per coordinate."""

    lows: tuple
    highs: tuple

    def __post_init__(self):
        lo = np.asarray(self.lows, float)
        hi = np.asarray(self.highs, float)
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
            raise ValueError("box bounds must be matching non-empty vectors")
        if not np.all(hi > lo):
            raise ValueError("box must be non-empty in every coordinate")
        object.__setattr__(self, "lows", tuple(lo))
        object.__setattr__(self, "highs", tuple(hi))

    @classmethod
    def from_intervals(cls, intervals: Sequence[Sequence[float]]) -> "BoundingBox":
        return cls(tuple(i[0] for i in intervals), tuple(i[1] for i in intervals))

    @property
    def dim(self) -> int:
        return len(self.lows)

    def contains(self, point, pad: float = 0.0) -> bool:
        p = np.asarray(point, float)[: self.dim]
        lo, hi = np.asarray(self.lows)[: p.size], np.asarray(self.highs)[: p.size]
        return bool(np.all(p >= lo - pad) and np.all(p <= hi + pad))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = np.asarray(self.lows), np.asarray(self.highs)
        return lo + (hi - lo) * rng.random((n, self.dim))

    def grid(self, n: int) -> np.ndarray:
        axes = [np.linspace(a, b, n) for a, b in zip(self.lows, self.highs)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def _lambdify(args, exprs):
    return sp.lambdify(args, exprs, modules="math", cse=True)


@dataclass(frozen=True)
class SlowFastSystem:
    """x' = X + Xhat,  eps y' = Y + Yhat,  z' = Z  with x in R^2, y in R, z in R^d."""

    X: tuple
    Y: sp.Expr
    epsilon: float
    Z: tuple = ()
    name: str = "custom"
    params: Mapping = field(default_factory=dict)
    pert_X: Callable | None = None
    pert_Y: Callable | None = None
    pert_bound: float | None = None
    box: BoundingBox | None = None

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise SystemError_("epsilon must be positive")
        X = tuple(sp.sympify(e) for e in self.X)
        if len(X) != 2:
            raise SystemError_("X must have two components")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", sp.sympify(self.Y))
        object.__setattr__(self, "Z", tuple(sp.sympify(e) for e in self.Z))
        allowed = {X1, X2, Y, EPS, *z_symbols(len(self.Z))}
        for e in (*X, self.Y, *self.Z):
            extra = e.free_symbols - allowed
            if extra:
                raise SystemError_(f"unbound symbols in right-hand side: {sorted(map(str, extra))}")
        if self.Z:
            zs = set(z_symbols(len(self.Z)))
            if any(e.free_symbols & zs for e in (*X, self.Y)):
                raise SystemError_("X and Y may not depend on z")

    # -- dimensions ---------------------------------------------------------
    slow_dim = 2
    fast_dim = 1

    @property
    def aux_dim(self) -> int:
        return len(self.Z)

    @property
    def dim(self) -> int:
        return 3 + self.aux_dim

    @property
    def perturbed(self) -> bool:
        return self.pert_X is not None or self.pert_Y is not None

    def with_epsilon(self, epsilon: float) -> "SlowFastSystem":
        return dataclasses.replace(self, epsilon=float(epsilon))

    # -- numeric closures ---------------------------------------------------
    @cached_property
    def _zs(self):
        return z_symbols(self.aux_dim)

    @cached_property
    def _full(self):
        args = (X1, X2, Y, *self._zs, EPS)
        return _lambdify(args, [*self.X, self.Y, *self.Z])

    @cached_property
    def _full_jac(self):
        args = (X1, X2, Y, *self._zs, EPS)
        state = (X1, X2, Y, *self._zs)
        rows = sp.Matrix([*self.X, self.Y / EPS, *self.Z]).jacobian(state)
        return _lambdify(args, rows.tolist())

    @cached_property
    def _reduced(self):
        """Values and derivatives at eps = 0 needed on the slow surface."""
        X0 = [e.subs(EPS, 0) for e in self.X]
        Y0 = self.Y.subs(EPS, 0)
        Yx1, Yx2, Yy = (sp.diff(Y0, s) for s in (X1, X2, Y))
        exprs = {
            "X": X0,
            "Y": Y0,
            "Yx": [Yx1, Yx2],
            "Yy": Yy,
            "Yyy": sp.diff(Yy, Y),
            "Yxy": [sp.diff(Yy, X1), sp.diff(Yy, X2)],
            "Xx": [[sp.diff(e, s) for s in (X1, X2)] for e in X0],
            "Xy": [sp.diff(e, Y) for e in X0],
        }
        args = (X1, X2, Y)
        return exprs, {k: _lambdify(args, v) for k, v in exprs.items()}

    @cached_property
    def _desing(self):
        """Desingularized reduced field F = (Y_y X, -<X, Y_x>) on the slow surface and its Jacobian."""
        e = self._reduced[0]
        F = sp.Matrix([e["Yy"] * e["X"][0], e["Yy"] * e["X"][1],
                       -(e["X"][0] * e["Yx"][0] + e["X"][1] * e["Yx"][1])])
        args = (X1, X2, Y)
        return _lambdify(args, list(F)), _lambdify(args, F.jacobian(args).tolist())

    def desingularized(self, w) -> np.ndarray:
        return np.asarray(self._desing[0](w[0], w[1], w[2]), float)

    def desingularized_jac(self, w) -> np.ndarray:
        return np.asarray(self._desing[1](w[0], w[1], w[2]), float)

    def reduced_velocity(self, w) -> np.ndarray:
        """Velocity (x', y') of the reduced flow at an on-surface point w = (x1, x2, y)."""
        X, Yx, Yy = self.reduced("X", w), self.reduced("Yx", w), self.reduced("Yy", w)
        return np.array([X[0], X[1], -(X @ Yx) / Yy])

    def reduced_exprs(self) -> dict:
        return self._reduced[0]

    def reduced(self, key: str, w) -> np.ndarray | float:
        """Evaluate an eps = 0 quantity (``X``, ``Y``, ``Yx``, ``Yy``, ...) at w = (x1, x2, y)."""
        out = self._reduced[1][key](w[0], w[1], w[2])
        return np.asarray(out, float) if isinstance(out, (list, tuple)) else float(out)

    def rhs_parts(self, state, eps: float | None = None):
        """Unperturbed (X, Y, Z) at a full state."""
        eps = self.epsilon if eps is None else eps
        vals = self._full(*state[: self.dim], eps)
        return np.asarray(vals[:2], float), float(vals[2]), np.asarray(vals[3:], float)

    def smooth_rhs(self, t, s):
        vals = self._full(*s[: self.dim], self.epsilon)
        out = np.array(vals, float)
        out[2] /= self.epsilon
        return out

    def pert_rhs(self, t, s):
        out = np.zeros(self.dim)
        x, y, z = s[:2], s[2], s[3 : self.dim]
        if self.pert_X is not None:
            out[:2] = self.pert_X(x, y, z, self.epsilon)
        if self.pert_Y is not None:
            out[2] = self.pert_Y(x, y, z, self.epsilon) / self.epsilon
        return out

    def rhs(self, t, s):
        out = self.smooth_rhs(t, s)
        if self.perturbed:
            out += self.pert_rhs(t, s)
        return out

    def jac(self, t, s):
        """Jacobian of the smooth part (perturbations are never differentiated)."""
        return np.array(self._full_jac(*s[: self.dim], self.epsilon), float)

    def sample_rhs(self, points: np.ndarray) -> np.ndarray:
        return np.array([self.rhs(0.0, p) for p in points])

    def substitute(self, mapping: Mapping, **changes) -> "SlowFastSystem":
        """New system with a sympy substitution applied to every expression."""
        X = tuple(e.subs(mapping) for e in self.X)
        return dataclasses.replace(
            self, X=X, Y=self.Y.subs(mapping), Z=tuple(e.subs(mapping) for e in self.Z), **changes
        )


@dataclass(frozen=True)
class PlanarParamSystem:
    """x' = f1(x, y, a),  y' = f2(x, y, a) with a in [a_minus, a_plus].

    ``f`` are sympy expressions in ``x, y, a, eps``; the factor 1/eps of the
    fast equation is part of ``f[1]``.  ``meta`` carries family information
    (Liénard function F, predator-prey constants) used by :mod:`canardkit.planar`.
    """

    f: tuple
    param_range: tuple
    epsilon: float
    name: str = "planar"
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise SystemError_("epsilon must be positive")
        lo, hi = self.param_range
        if not lo < hi:
            raise SystemError_("param_range must satisfy a- < a+")
        f = tuple(sp.sympify(e) for e in self.f)
        extra = set().union(*(e.free_symbols for e in f)) - {PX, PY, PA, EPS}
        if extra:
            raise SystemError_(f"unbound symbols: {sorted(map(str, extra))}")
        object.__setattr__(self, "f", f)

    dim = 2
    perturbed = False

    @cached_property
    def _num(self):
        return _lambdify((PX, PY, PA, EPS), list(self.f))

    @cached_property
    def _jacnum(self):
        return _lambdify((PX, PY, PA, EPS), sp.Matrix(self.f).jacobian((PX, PY)).tolist())

    def rhs_at(self, state, a: float) -> np.ndarray:
        return np.array(self._num(state[0], state[1], a, self.epsilon), float)

    def jac_at(self, state, a: float) -> np.ndarray:
        return np.array(self._jacnum(state[0], state[1], a, self.epsilon), float)

    def at(self, a: float) -> "BoundPlanar":
        return BoundPlanar(self, float(a))

    def with_epsilon(self, epsilon: float) -> "PlanarParamSystem":
        return dataclasses.replace(self, epsilon=float(epsilon))


@dataclass(frozen=True)
class BoundPlanar:
    """A planar system with its parameter fixed; what the integrator consumes."""

    system: PlanarParamSystem
    a: float

    dim = 2
    perturbed = False

    @property
    def epsilon(self) -> float:
        return self.system.epsilon

    def rhs(self, t, s):
        return self.system.rhs_at(s, self.a)

    def jac(self, t, s):
        return self.system.jac_at(s, self.a)


# ---------------------------------------------------------------------------
# perturbations
# ---------------------------------------------------------------------------

def triangle_wave(s):
    """Unit-amplitude, unit-period triangle wave with slope 4."""
    return 1.0 - 4.0 * abs(s - math.floor(s + 0.5))


def sine_pert_X(delta: float, coord: int = 0) -> Callable:
    """X-hat = delta*sin(x_coord / delta^2) placed in the first slow component."""

    def pert(x, y, z, eps):
        return (delta * math.sin(x[coord] / delta**2), 0.0)

    return pert


def triangle_pert_Y(delta: float) -> Callable:
    """Y-hat = delta*triangle(y / delta^2): continuous, Lipschitz constant 4/delta."""

    def pert(x, y, z, eps):
        return delta * triangle_wave(y / delta**2)

    return pert


def perturbation_from_spec(spec: Mapping) -> tuple[Callable | None, Callable | None, float]:
    """Build (pert_X, pert_Y, delta) from a config mapping.

    ``{"kind": "sine_x" | "triangle_y" | "both" | "zero", "delta": float}``
    """
    kind = spec.get("kind", "both")
    delta = float(spec.get("delta", 0.0))
    if delta == 0.0 or kind == "zero":
        return None, None, 0.0
    if kind == "sine_x":
        return sine_pert_X(delta), None, delta
    if kind == "triangle_y":
        return None, triangle_pert_Y(delta), delta
    if kind == "both":
        return sine_pert_X(delta), triangle_pert_Y(delta), delta
    raise SystemError_(f"unknown perturbation kind {kind!r}")


@dataclass(frozen=True)
class PerturbationReport:
    sup_X: float
    sup_Y: float
    declared: float
    n_samples: int

    @property
    def within_bound(self) -> bool:
        return max(self.sup_X, self.sup_Y) <= self.declared * (1 + 1e-12)


def attach_perturbation(
    sys: SlowFastSystem,
    pert_X: Callable | None = None,
    pert_Y: Callable | None = None,
    bound: float = 0.0,
    box: BoundingBox | None = None,
    n_samples: int = 2000,
    seed: int = 0,
) -> tuple[SlowFastSystem, PerturbationReport]:
    """Install perturbations after checking finiteness and the declared sup-norm on a box."""
    box = box or sys.box
    if box is None:
        raise SystemError_("a bounding box is required to check the perturbation bound")
    rng = np.random.default_rng(seed)
    pts = box.sample(n_samples, rng)
    sx = sy = 0.0
    for p in pts:
        x, y, z = p[:2], p[2], p[3:]
        if pert_X is not None:
            v = np.asarray(pert_X(x, y, z, sys.epsilon), float)
            if not np.all(np.isfinite(v)):
                raise SystemError_(f"pert_X non-finite at {p}")
            sx = max(sx, float(np.max(np.abs(v))))
        if pert_Y is not None:
            v = float(pert_Y(x, y, z, sys.epsilon))
            if not math.isfinite(v):
                raise SystemError_(f"pert_Y non-finite at {p}")
            sy = max(sy, abs(v))
    report = PerturbationReport(sx, sy, float(bound), n_samples)
    if not report.within_bound:
        raise SystemError_(f"sampled sup-norm {max(sx, sy):.3g} exceeds declared bound {bound:.3g}")
    out = dataclasses.replace(sys, pert_X=pert_X, pert_Y=pert_Y, pert_bound=float(bound), box=box)
    return out, report


# ---------------------------------------------------------------------------
# built-in systems
# ---------------------------------------------------------------------------

def _expr_in_y(spec, name: str) -> sp.Expr:
    e = sp.sympify(spec, locals={"y": PY})
    if e.free_symbols - {PY}:
        raise SystemError_(f"{name} must be an expression in y only")
    return e


def _paper3d(p):
    a = float(p.get("a", 3.0))
    if not a > 0:
        raise SystemError_("paper3d needs a > 0")
    eps = float(p.get("eps", 0.1))
    X = (-sp.Float(a) * X2 + Y / 3, X1 + 1)
    Yexpr = X1 + Y**2 + X2 * Y
    Z = ()
    if "aux_decay" in p:
        Z = (-sp.Float(float(p["aux_decay"])) * z_symbols(1)[0],)
    box = BoundingBox((-4.0, -3.0, -4.0) + (-2.0,) * len(Z), (2.0, 3.0, 4.0) + (2.0,) * len(Z))
    return SlowFastSystem(X, Yexpr, eps, Z=Z, name="paper3d", params={"a": a}, box=box)


def _paper3d_twist(p):
    """paper3d with an extra rotation b*(x2, -x1 - 1)/3 in X about the point (-1, 0)."""
    a = float(p.get("a", 3.0))
    b = float(p.get("b", 1.0))
    eps = float(p.get("eps", 0.05))
    X = (-sp.Float(a) * X2 + Y / 3 + sp.Float(b) * X2 / 3, X1 + 1 - sp.Float(b) * (X1 + 1) / 3)
    Yexpr = X1 + Y**2 + X2 * Y
    box = BoundingBox((-4.0, -3.0, -4.0), (2.0, 3.0, 4.0))
    return SlowFastSystem(X, Yexpr, eps, name="paper3d_twist", params={"a": a, "b": b}, box=box)


# positive away from 0, minimum at 0, then a local max (~0.414 at y~0.869) and
# a lower local min (~0.313 at y~1.381)
MULTIMODAL_F_DEFAULT = "y**4 - 3*y**3 + 2.4*y**2"


def lienard_F_default(mu: float) -> sp.Expr:
    """Bimodal F with F(0)=0, F'(0)=F'(mu)=0, increasing on (0, mu)."""
    return PY**2 - 2 * PY**3 / (3 * sp.Float(mu))


def _lienard(p, family="lienard"):
    eps = float(p.get("eps", 0.01))
    if family == "bimodal":
        mu = float(p.get("mu", 1.0))
        if not mu > 0:
            raise SystemError_("bimodal needs mu > 0")
        F = _expr_in_y(p["F"], "F") if "F" in p else lienard_F_default(mu)
        meta = {"family": "lienard", "kind": "bimodal", "F": F, "mu": mu}
    elif family == "multimodal":
        F = _expr_in_y(p.get("F", MULTIMODAL_F_DEFAULT), "F")
        meta = {"family": "lienard", "kind": "multimodal", "F": F}
    else:
        F = _expr_in_y(p.get("F", "y**2"), "F")
        meta = {"family": "lienard", "kind": "lienard", "F": F}
    if F.subs(PY, 0) != 0:
        raise SystemError_("F must satisfy F(0) = 0")
    a_range = tuple(float(v) for v in p.get("a_range", (-0.3, 0.3)))
    f = (PY, (-PX + F.subs(PY, PY + PA)) / EPS)
    return PlanarParamSystem(f, a_range, eps, name=family, meta=meta)


def primer_polynomials(alphas: Sequence[float], betas: Sequence[float]) -> tuple[sp.Expr, sp.Expr]:
    """g = sum alpha_i y^i (i = 1..m), h = sum beta_j y^(m+j) (j = 1..n)."""
    alphas = [float(c) for c in alphas]
    betas = [float(c) for c in betas]
    if any(c < 0 for c in alphas + betas) or not any(c > 0 for c in alphas) or not any(c > 0 for c in betas):
        raise SystemError_("coefficients must be non-negative with at least one alpha and one beta positive")
    m = len(alphas)
    g = sum(sp.Float(c) * PY ** (i + 1) for i, c in enumerate(alphas))
    h = sum(sp.Float(c) * PY ** (m + j + 1) for j, c in enumerate(betas))
    return sp.nsimplify(g), sp.nsimplify(h)


def primer_integrals(M: float, N: float, v: float = 1.0, w: float = 1.0) -> tuple[sp.Expr, sp.Expr]:
    """Continuous-exponent analogue of the polynomial primer with constant weights.

    g(y) = v * int_0^M y^s ds,  h(y) = w * int_M^N y^s ds, in closed form.
    """
    if not (0 < M < N) or v <= 0 or w <= 0:
        raise SystemError_("need 0 < M < N and positive weights")
    g = sp.Float(v) * (PY ** sp.Float(M) - 1) / sp.log(PY)
    h = sp.Float(w) * (PY ** sp.Float(N) - PY ** sp.Float(M)) / sp.log(PY)
    return g, h


def _predator_prey(p):
    eps = float(p.get("eps", 1e-3))
    pp, q, r = (float(p.get(k, 1.0)) for k in ("p", "q", "r"))
    if min(pp, q, r) <= 0:
        raise SystemError_("p, q, r must be positive")
    if "g" in p or "h" in p:
        g = _expr_in_y(p.get("g", "y"), "g")
        h = _expr_in_y(p.get("h", "y**2"), "h")
    else:
        g, h = primer_polynomials(p.get("alphas", [1.0]), p.get("betas", [1.0]))
    f = _expr_in_y(p.get("f", "y"), "f")
    a_range = tuple(float(v) for v in p.get("a_range", (0.3, 0.7)))
    rhs = (PX * (pp - f), PY * (-q + PX * (r + g - PA * h)) / EPS)
    meta = {"family": "predator_prey", "p": pp, "q": q, "r": r, "f": f, "g": g, "h": h}
    return PlanarParamSystem(rhs, a_range, eps, name="predator_prey", meta=meta)


_BUILTINS = {
    "paper3d": _paper3d,
    "paper3d_twist": _paper3d_twist,
    "lienard": lambda p: _lienard(p, "lienard"),
    "bimodal": lambda p: _lienard(p, "bimodal"),
    "multimodal": lambda p: _lienard(p, "multimodal"),
    "predator_prey": _predator_prey,
}


def builtin_system(name: str, params: Mapping | None = None, **kw):
    """Construct one of the named example systems.

    >>> s = builtin_system("paper3d", {"a": 3, "eps": 0.1})
    >>> float(s.Y.subs({X1: 1, X2: 0, Y: 0}))
    1.0
    """
    params = {**(params or {}), **kw}
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise SystemError_(f"unknown system {name!r}; choose from {sorted(_BUILTINS)}") from None
    return factory(params)
