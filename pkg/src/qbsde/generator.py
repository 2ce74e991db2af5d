"""Drivers g(t, x, y, z) of quadratic BSDEs.

A :class:`GeneratorSpec` bundles the pointwise evaluator of a driver with the
structural constants used throughout the package:

* upper envelope ``g <= alpha_bar(t, x) + beta_bar |y| + gamma_bar/2 |z|^2``
  (and the same with ``phi(|y|)`` in place of ``beta_bar |y|``),
* lower envelope ``g >= -alpha_low(t, x) - r (|y| + |z|)``,
* Lipschitz constant ``K_gy`` in ``y`` and the monotonicity constant
  ``monotonicity_beta`` in ``y (g(t,0,z) - g(t,y,z)) <= beta |y|^2``,
* convexity in ``z``.

Evaluation is vectorised: ``y`` has shape ``(...)``, ``z`` has shape
``(..., d)`` and ``x`` has shape ``(..., dx)`` (or is ``None`` for drivers that
ignore the state).  The result has shape ``(...)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Union

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import BracketError, ValidationError

__all__ = [
    "GeneratorSpec",
    "pure_quadratic",
    "entropic_linear_y",
    "affine_in_y",
    "custom_generator",
    "eval_generator",
    "SamplePlan",
    "ClauseResult",
    "AssumptionReport",
    "check_assumptions",
    "InfConvolutionSearch",
    "inf_convolution",
    "lipschitz_approximant",
]

PURE_QUADRATIC = "pure-quadratic"
ENTROPIC_LINEAR_Y = "entropic-with-linear-y"
AFFINE_IN_Y = "affine-in-y"
CUSTOM = "custom"
INF_CONVOLUTION = "inf-convolution"
BUILTIN_KINDS = (PURE_QUADRATIC, ENTROPIC_LINEAR_Y, AFFINE_IN_Y)

Coefficient = Union[float, Callable]


def _coefficient_at(coef, t, x, shape):
    if callable(coef):
        value = np.asarray(coef(t, x), dtype=float)
        return np.broadcast_to(value, shape) if shape else value
    return np.full(shape, float(coef)) if shape else np.float64(coef)


def _norm(z):
    return np.sqrt(np.sum(np.square(z), axis=-1))


@dataclass(frozen=True)
class GeneratorSpec:
    """Driver of a BSDE together with its structural constants.

    Use the factory functions (:func:`pure_quadratic`, :func:`entropic_linear_y`,
    :func:`affine_in_y`, :func:`custom_generator`) rather than building this
    directly; they fill the constants consistently with the family.
    """

    kind: str
    dim: int
    gamma_bar: float
    beta_bar: float = 0.0
    alpha_bar: Coefficient = 0.0
    K_gy: float = 0.0
    r: float = 0.0
    alpha_low: Coefficient = 0.0
    monotonicity_beta: float = 0.0
    phi: Optional[Callable] = None
    params: Mapping = field(default_factory=dict)
    evaluator: Optional[Callable] = None
    gradient: Optional[Callable] = None
    conjugate: Optional[Callable] = None
    y_dependent: bool = True

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError("dim must be >= 1")
        if not self.gamma_bar > 0:
            raise ValidationError("gamma_bar must be > 0")
        for name in ("beta_bar", "K_gy", "r", "monotonicity_beta"):
            if not getattr(self, name) >= 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.kind not in BUILTIN_KINDS and self.evaluator is None:
            raise ValidationError(f"generator kind {self.kind!r} needs an evaluator")

    @property
    def is_builtin(self):
        return self.kind in BUILTIN_KINDS

    def alpha_bar_at(self, t, x=None, shape=()):
        return _coefficient_at(self.alpha_bar, t, x, shape)

    def alpha_low_at(self, t, x=None, shape=()):
        return _coefficient_at(self.alpha_low, t, x, shape)

    def phi_at(self, s):
        if self.phi is None:
            return self.beta_bar * np.asarray(s, dtype=float)
        return np.asarray(self.phi(s), dtype=float)

    def __call__(self, t, x, y, z):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        p = self.params
        if self.kind == PURE_QUADRATIC:
            return 0.5 * p["gamma"] * np.sum(np.square(z), axis=-1) + 0.0 * y
        if self.kind == ENTROPIC_LINEAR_Y:
            return p["alpha0"] + p["beta"] * y + 0.5 * p["gamma"] * np.sum(np.square(z), axis=-1)
        if self.kind == AFFINE_IN_Y:
            return p["a"] * y + z @ np.asarray(p["b"]) + p["c"]
        return np.asarray(self.evaluator(t, x, y, z), dtype=float)

    def z_gradient(self, t, x, y, z):
        """Analytic element of the z-subdifferential, or ``None`` if unavailable."""
        z = np.asarray(z, dtype=float)
        p = self.params
        if self.kind in (PURE_QUADRATIC, ENTROPIC_LINEAR_Y):
            return p["gamma"] * z
        if self.kind == AFFINE_IN_Y:
            return np.broadcast_to(np.asarray(p["b"], dtype=float), z.shape).copy()
        if self.gradient is not None:
            return np.asarray(self.gradient(t, x, y, z), dtype=float)
        return None


def pure_quadratic(gamma, dim=1):
    """``g(z) = gamma/2 |z|^2``."""
    gamma = float(gamma)
    return GeneratorSpec(
        kind=PURE_QUADRATIC,
        dim=dim,
        gamma_bar=gamma,
        params={"gamma": gamma},
        y_dependent=False,
    )


def entropic_linear_y(gamma, beta, alpha0=0.0, dim=1):
    """``g(y, z) = alpha0 + beta y + gamma/2 |z|^2``."""
    gamma, beta, alpha0 = float(gamma), float(beta), float(alpha0)
    return GeneratorSpec(
        kind=ENTROPIC_LINEAR_Y,
        dim=dim,
        gamma_bar=gamma,
        beta_bar=abs(beta),
        alpha_bar=max(alpha0, 0.0),
        K_gy=abs(beta),
        r=abs(beta),
        alpha_low=max(-alpha0, 0.0),
        monotonicity_beta=max(-beta, 0.0),
        params={"gamma": gamma, "beta": beta, "alpha0": alpha0},
        y_dependent=beta != 0.0,
    )


def affine_in_y(a=0.0, b=None, c=0.0, dim=1, gamma_bar=1.0):
    """``g(y, z) = a y + b.z + c``; ``g = 0`` with the defaults.

    There is no quadratic term, so ``gamma_bar`` is free; ``alpha_bar`` absorbs
    the linear z-term through ``b.z <= |b|^2/(2 gamma_bar) + gamma_bar/2 |z|^2``.
    """
    a, c = float(a), float(c)
    b = np.zeros(dim) if b is None else np.asarray(b, dtype=float).reshape(dim)
    nb = float(np.linalg.norm(b))
    return GeneratorSpec(
        kind=AFFINE_IN_Y,
        dim=dim,
        gamma_bar=float(gamma_bar),
        beta_bar=abs(a),
        alpha_bar=max(c, 0.0) + nb * nb / (2.0 * gamma_bar),
        K_gy=abs(a),
        r=max(abs(a), nb),
        alpha_low=max(-c, 0.0),
        monotonicity_beta=max(-a, 0.0),
        params={"a": a, "b": tuple(b.tolist()), "c": c},
        y_dependent=a != 0.0,
    )


def custom_generator(
    evaluator,
    *,
    dim=1,
    gamma_bar,
    beta_bar=0.0,
    alpha_bar=0.0,
    K_gy=0.0,
    r=0.0,
    alpha_low=0.0,
    monotonicity_beta=0.0,
    phi=None,
    y_dependent=True,
    gradient=None,
    conjugate=None,
    name=CUSTOM,
):
    """Wrap a user evaluator ``g(t, x, y, z)`` (vectorised over leading axes).

    The declared constants are trusted; run :func:`check_assumptions` to test
    them on samples.  ``gradient`` and ``conjugate`` are optional analytic fast
    paths for the z-subdifferential and the Legendre-Fenchel transform.
    """
    return GeneratorSpec(
        kind=name,
        dim=dim,
        gamma_bar=float(gamma_bar),
        beta_bar=float(beta_bar),
        alpha_bar=alpha_bar,
        K_gy=float(K_gy),
        r=float(r),
        alpha_low=alpha_low,
        monotonicity_beta=float(monotonicity_beta),
        phi=phi,
        evaluator=evaluator,
        gradient=gradient,
        conjugate=conjugate,
        y_dependent=y_dependent,
    )


def _check_point(spec, t, x, y, z):
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.shape != (spec.dim,):
        raise ValidationError(f"z must have dimension {spec.dim}, got shape {z.shape}")
    vals = [t, y, *z.tolist()]
    if x is not None:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        vals.extend(x.tolist())
    if not all(math.isfinite(v) for v in vals):
        raise ValidationError("non-finite generator input")
    return x, float(y), z


def eval_generator(spec, t, x, y, z):
    """Evaluate ``g(t, x, y, z)`` at a single point."""
    x, y, z = _check_point(spec, float(t), x, y, z)
    return float(spec(float(t), x, np.float64(y), z))


# --------------------------------------------------------------------------
# assumption checks


@dataclass(frozen=True)
class SamplePlan:
    n_samples: int = 2000
    t_box: tuple = (0.0, 1.0)
    x_box: tuple = (-3.0, 3.0)
    y_box: tuple = (-5.0, 5.0)
    z_box: tuple = (-5.0, 5.0)
    x_dim: int = 1
    seed: int = 0


@dataclass(frozen=True)
class ClauseResult:
    passed: bool
    worst_violation: float
    witness: float
    count: int

    def as_dict(self):
        return {
            "passed": self.passed,
            "worst_violation": self.worst_violation,
            "witness": self.witness,
            "count": self.count,
        }


@dataclass(frozen=True)
class AssumptionReport:
    clauses: Mapping[str, ClauseResult]

    @property
    def passed(self):
        return all(c.passed for c in self.clauses.values())

    def as_dict(self):
        return {"passed": self.passed, "clauses": {k: v.as_dict() for k, v in self.clauses.items()}}


def _clause(excess, witness, atol):
    """Summarise a clause whose violation is ``excess > atol``."""
    excess = np.asarray(excess, dtype=float)
    worst = float(np.max(excess)) if excess.size else 0.0
    return ClauseResult(
        passed=bool(worst <= atol),
        worst_violation=max(worst, 0.0),
        witness=float(witness),
        count=int(excess.size),
    )


def check_assumptions(spec, plan=SamplePlan()):
    """Sample the structural clauses of ``spec`` and report violations.

    Violations are report entries, never exceptions.  The ``lipschitz_y``
    witness is the largest sampled difference quotient in ``y``; the
    ``convexity_z`` witness is the largest midpoint gap
    ``g((z+z')/2) - (g(z)+g(z'))/2``.
    """
    rng = np.random.default_rng(plan.seed)
    n, d = plan.n_samples, spec.dim
    t = rng.uniform(*plan.t_box, size=n)
    x = rng.uniform(*plan.x_box, size=(n, plan.x_dim))
    y = rng.uniform(*plan.y_box, size=n)
    y2 = rng.uniform(*plan.y_box, size=n)
    z = rng.uniform(*plan.z_box, size=(n, d))
    z2 = rng.uniform(*plan.z_box, size=(n, d))

    def g(yy, zz):
        out = np.empty(n)
        for i in range(n):
            out[i] = spec(t[i], x[i], yy[i], zz[i])
        return out

    gv = g(y, z)
    scale = 1.0 + np.abs(gv)
    atol = 1e-9

    mid = g(y, 0.5 * (z + z2)) - 0.5 * (gv + g(y, z2))
    convexity = _clause(mid / scale, np.max(mid), atol)

    gy2 = g(y2, z)
    dy = np.abs(y - y2)
    ratio = np.where(dy > 0, np.abs(gv - gy2) / np.where(dy > 0, dy, 1.0), 0.0)
    lipschitz = _clause((ratio - spec.K_gy) / (1.0 + spec.K_gy), np.max(ratio), atol)

    ay = np.abs(y)
    az = _norm(z)
    abar = np.array([spec.alpha_bar_at(t[i], x[i]) for i in range(n)], dtype=float)
    alow = np.array([spec.alpha_low_at(t[i], x[i]) for i in range(n)], dtype=float)
    quad = 0.5 * spec.gamma_bar * az**2
    up1 = gv - (abar + spec.phi_at(ay) + quad)
    up2 = gv - (abar + spec.beta_bar * ay + quad)
    low = -alow - spec.r * (ay + az) - gv
    g0 = g(np.zeros(n), z)
    mono = y * (g0 - gv) - spec.monotonicity_beta * ay**2

    clauses = {
        "convexity_z": convexity,
        "lipschitz_y": lipschitz,
        "growth_upper_existence": _clause(up1 / scale, np.max(up1), atol),
        "growth_upper_uniqueness": _clause(up2 / scale, np.max(up2), atol),
        "growth_lower": _clause(low / scale, np.max(low), atol),
        "monotonicity_y": _clause(mono / scale, np.max(mono), atol),
        "alpha_nonnegative": _clause(-np.minimum(abar, alow), float(min(abar.min(), alow.min())), 0.0),
    }
    return AssumptionReport(clauses)


# --------------------------------------------------------------------------
# Lipschitz inf-convolution approximants g_n


@dataclass(frozen=True)
class InfConvolutionSearch:
    """Bounded search used by the numeric inf-convolution.

    ``radius=None`` derives the search box from the coercivity bracket of the
    objective (see :func:`inf_convolution`).
    """

    points: int = 61
    max_grid_evals: int = 200_000
    sweeps: int = 4
    xatol: float = 1e-12
    radius: Optional[float] = None
    force_numeric: bool = False


def _huber(z, gamma, n):
    nz = _norm(z)
    return np.where(gamma * nz <= n, 0.5 * gamma * nz**2, n * nz - n * n / (2.0 * gamma))


def _analytic_inf_convolution(spec, n, y, z):
    p = spec.params
    if spec.kind == PURE_QUADRATIC:
        return _huber(z, p["gamma"], n)
    if spec.kind == ENTROPIC_LINEAR_Y:
        if n < abs(p["beta"]):
            raise ValidationError(f"n={n} below the y-slope {abs(p['beta'])}: inf-convolution is -inf")
        return p["alpha0"] + p["beta"] * y + _huber(z, p["gamma"], n)
    if spec.kind == AFFINE_IN_Y:
        if n < abs(p["a"]) or n < float(np.linalg.norm(p["b"])):
            raise ValidationError(f"n={n} below the affine slopes: inf-convolution is -inf")
        return spec(0.0, None, y, z)
    raise AssertionError(spec.kind)


def _numeric_inf_convolution(spec, n, t, x, y, z, search):
    gz = float(spec(t, x, np.float64(y), z))
    if n <= spec.r:
        raise ValidationError(f"n={n} must exceed the lower-growth slope r={spec.r}")
    # n(|p-y| + |q-z|) <= g(y,z) - g(p,q) <= g(y,z) + alpha_low + r(|y|+|z|) + r(|p-y|+|q-z|)
    slack = gz + float(spec.alpha_low_at(t, x)) + spec.r * (abs(y) + float(np.linalg.norm(z)))
    bracket = max(slack, 0.0) / (n - spec.r)
    if search.radius is not None:
        half = float(search.radius)
    elif bracket == 0.0:
        return gz
    else:
        half = 1.25 * bracket

    centre = np.concatenate([[y], z]) if spec.y_dependent else np.asarray(z, dtype=float)
    k = centre.size

    def objective(v):
        v = np.atleast_2d(v)
        if spec.y_dependent:
            pp, qq = v[:, 0], v[:, 1:]
            pen = n * np.abs(pp - y)
        else:
            pp, qq = np.full(v.shape[0], y), v
            pen = 0.0
        return spec(t, None if x is None else np.broadcast_to(x, (v.shape[0],) + np.shape(x)), pp, qq) + pen + n * _norm(qq - z)

    pts = int(min(search.points, max(5, search.max_grid_evals ** (1.0 / k))))
    pts += 1 - pts % 2
    axes = [np.linspace(c - half, c + half, pts) for c in centre]
    mesh = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=-1)
    vals = objective(mesh)
    i_best = int(np.argmin(vals))
    idx = np.unravel_index(i_best, (pts,) * k)
    if any(j in (0, pts - 1) for j in idx):
        raise BracketError(
            f"inf-convolution minimiser on the search boundary (half-width {half:.4g}); "
            "declared lower-growth constants may be wrong"
        )
    best = mesh[i_best].copy()
    best_val = float(vals[i_best])
    h = 2.0 * half / (pts - 1)
    for _ in range(search.sweeps):
        for j in range(k):
            def along(s, j=j):
                v = best.copy()
                v[j] = s
                return float(objective(v)[0])

            res = minimize_scalar(along, bounds=(best[j] - h, best[j] + h), method="bounded",
                                  options={"xatol": search.xatol})
            if res.fun < best_val:
                best[j] = res.x
                best_val = float(res.fun)
        h *= 0.5
    return min(best_val, gz)


def inf_convolution(spec, n, t, x, y, z, search=InfConvolutionSearch()):
    """``g_n(t,x,y,z) = inf_{p,q} g(t,x,p,q) + n|p-y| + n|q-z|`` at one point.

    Built-in families use the closed form (a Huber function in ``z``); custom
    drivers, or ``search.force_numeric``, use a uniform grid over the
    coercivity bracket followed by coordinate-wise golden-section refinement.

    Raises
    ------
    BracketError
        When the grid minimiser sits on the search-box boundary.
    """
    x, y, z = _check_point(spec, float(t), x, y, z)
    if n <= 0:
        raise ValidationError("n must be a positive integer")
    if spec.is_builtin and not search.force_numeric:
        return float(_analytic_inf_convolution(spec, n, np.float64(y), z))
    return float(_numeric_inf_convolution(spec, n, float(t), x, y, z, search))


def lipschitz_approximant(spec, n, search=InfConvolutionSearch()):
    """Return ``g_n`` as a vectorised :class:`GeneratorSpec`.

    ``g_n <= g`` so the upper envelopes and ``K_gy`` carry over; the lower
    envelope holds for ``n >= r``.
    """
    if n <= 0:
        raise ValidationError("n must be a positive integer")
    if spec.is_builtin and not search.force_numeric:
        _analytic_inf_convolution(spec, n, np.zeros(1), np.zeros((1, spec.dim)))

        def evaluator(t, x, y, z, _spec=spec, _n=n):
            return _analytic_inf_convolution(_spec, _n, np.asarray(y, float), np.asarray(z, float))
    else:
        def evaluator(t, x, y, z, _spec=spec, _n=n):
            y = np.asarray(y, dtype=float)
            z = np.asarray(z, dtype=float)
            out = np.empty(y.shape)
            xs = None if x is None else np.asarray(x, dtype=float)
            for i in itertools.product(*(range(s) for s in y.shape)):
                xi = None if xs is None else xs[i]
                out[i] = _numeric_inf_convolution(_spec, _n, float(t), xi, float(y[i]), z[i], search)
            return out

    return replace(
        spec,
        kind=INF_CONVOLUTION,
        evaluator=evaluator,
        gradient=None,
        conjugate=None,
        params={"base": spec.kind, "n": n, **dict(spec.params)},
    )
