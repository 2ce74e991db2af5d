"""Legendre-Fenchel transform of a driver in its z argument.

``f(t, x, y, q) = sup_z (z.q - g(t, x, y, z))`` takes values in
``R u {+inf}``.  Built-in families have closed forms; anything else goes
through a bounded concave maximisation over an expanding sequence of boxes.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .errors import InfiniteValueError, SubgradientCertificateError, ValidationError
from .generator import AFFINE_IN_Y, ENTROPIC_LINEAR_Y, PURE_QUADRATIC, _check_point

__all__ = [
    "ExtendedReal",
    "SupSearch",
    "DualGeneratorView",
    "fenchel_transform",
    "subdifferential_select",
    "fenchel_young_gap",
]


@functools.total_ordering
@dataclass(frozen=True)
class ExtendedReal:
    """A real number or ``+inf``; infinite values carry no payload."""

    finite: bool
    value: float = 0.0

    @classmethod
    def of(cls, v):
        v = float(v)
        if math.isinf(v) and v > 0:
            return cls(False, 0.0)
        if not math.isfinite(v):
            raise ValidationError(f"{v} is not an extended real in R u {{+inf}}")
        return cls(True, v)

    INF = None  # set below

    def __float__(self):
        return self.value if self.finite else math.inf

    def __eq__(self, other):
        if isinstance(other, ExtendedReal):
            return float(self) == float(other)
        if isinstance(other, (int, float)):
            return float(self) == float(other)
        return NotImplemented

    def __lt__(self, other):
        return float(self) < float(other)

    def __hash__(self):
        return hash(float(self))

    def _require_finite(self, other=None):
        if not self.finite or (isinstance(other, ExtendedReal) and not other.finite):
            raise InfiniteValueError("arithmetic on an infinite extended real")

    def __add__(self, other):
        self._require_finite(other)
        return self.value + float(other)

    __radd__ = __add__

    def __sub__(self, other):
        self._require_finite(other)
        return self.value - float(other)

    def __rsub__(self, other):
        self._require_finite(other)
        return float(other) - self.value

    def __neg__(self):
        self._require_finite()
        return -self.value

    def __repr__(self):
        return f"ExtendedReal({self.value!r})" if self.finite else "ExtendedReal(+inf)"


ExtendedReal.INF = ExtendedReal(False, 0.0)


@dataclass(frozen=True)
class SupSearch:
    """Expanding-box search for the numeric conjugate.

    The supremum is declared infinite when the box maximum grows by more than
    ``divergence_tol`` between radius ``2**(max_power-1)`` and ``2**max_power``.
    """

    max_power: int = 20
    divergence_tol: float = 1e-3
    grid_points: int = 2001
    xatol: float = 1e-11


@dataclass(frozen=True)
class DualGeneratorView:
    """Dual-side view of a :class:`~qbsde.generator.GeneratorSpec`.

    ``analytic=False`` forces the numeric paths even for built-in families;
    the two must agree within 1e-6 on finite values.
    """

    spec: object
    search: SupSearch = SupSearch()
    analytic: bool = True
    fd_scale: float = 1e-5

    @property
    def dim(self):
        return self.spec.dim

    def _has_closed_form(self):
        return self.analytic and (self.spec.is_builtin or self.spec.conjugate is not None)

    # -- conjugate -----------------------------------------------------

    def conjugate(self, t, x, y, q):
        """Vectorised ``f``: ``y`` shape ``(...)``, ``q`` shape ``(..., d)``; ``+inf`` where infinite."""
        y = np.asarray(y, dtype=float)
        q = np.asarray(q, dtype=float)
        if self._has_closed_form():
            return self._closed_form_conjugate(t, x, y, q)
        out = np.empty(np.broadcast_shapes(y.shape, q.shape[:-1]))
        yb = np.broadcast_to(y, out.shape)
        qb = np.broadcast_to(q, out.shape + (self.dim,))
        xb = None if x is None else np.broadcast_to(np.asarray(x, float), out.shape + np.shape(x)[-1:])
        for i in np.ndindex(out.shape):
            out[i] = self._numeric_conjugate(t, None if xb is None else xb[i], float(yb[i]), qb[i])
        return out

    def _closed_form_conjugate(self, t, x, y, q):
        spec = self.spec
        p = spec.params
        if spec.kind == PURE_QUADRATIC:
            return np.sum(q * q, axis=-1) / (2.0 * p["gamma"]) + 0.0 * y
        if spec.kind == ENTROPIC_LINEAR_Y:
            return np.sum(q * q, axis=-1) / (2.0 * p["gamma"]) - p["alpha0"] - p["beta"] * y
        if spec.kind == AFFINE_IN_Y:
            b = np.asarray(p["b"], dtype=float)
            on_domain = np.all(np.abs(q - b) <= 1e-12 * (1.0 + np.abs(b)), axis=-1)
            return np.where(on_domain, -p["a"] * y - p["c"], np.inf)
        return np.asarray(spec.conjugate(t, x, y, q), dtype=float)

    def _box_max(self, t, x, y, q, radius):
        """Maximise the concave map z -> z.q - g on the box |z|_inf <= radius."""
        d = self.dim
        spec = self.spec

        if d == 1:
            grid = np.linspace(-radius, radius, self.search.grid_points)
            vals = grid * q[0] - spec(t, None if x is None else np.broadcast_to(x, (grid.size,) + np.shape(x)),
                                      np.full(grid.size, y), grid[:, None])
            i = int(np.argmax(vals))
            h = grid[1] - grid[0]
            lo, hi = max(grid[i] - h, -radius), min(grid[i] + h, radius)

            def neg(s):
                return -(s * q[0] - float(spec(t, x, np.float64(y), np.array([s]))))

            res = minimize_scalar(neg, bounds=(lo, hi), method="bounded",
                                  options={"xatol": self.search.xatol * max(1.0, h)})
            return max(float(vals[i]), -float(res.fun))

        def neg(zz):
            return -(float(np.dot(zz, q)) - float(spec(t, x, np.float64(y), zz)))

        best = None
        for start in (np.zeros(d), np.clip(q, -radius, radius)):
            res = minimize(neg, start, method="L-BFGS-B", bounds=[(-radius, radius)] * d)
            res = minimize(neg, res.x, method="Powell", bounds=[(-radius, radius)] * d,
                           options={"xtol": 1e-10, "ftol": 1e-14})
            if best is None or res.fun < best:
                best = res.fun
        return -float(best)

    def _numeric_conjugate(self, t, x, y, q):
        top = self.search.max_power
        inner = self._box_max(t, x, y, q, 2.0 ** (top - 1))
        outer = self._box_max(t, x, y, q, 2.0 ** top)
        running = max(inner, outer)
        if running - inner > self.search.divergence_tol:
            return math.inf
        return running

    # -- subdifferential -----------------------------------------------

    def subgradient(self, t, x, y, z):
        """Vectorised minimal-norm selection from the z-subdifferential (no certificate)."""
        z = np.asarray(z, dtype=float)
        if self.analytic:
            grad = self.spec.z_gradient(t, x, y, z)
            if grad is not None:
                return grad
        out = np.empty(z.shape)
        yb = np.broadcast_to(np.asarray(y, float), z.shape[:-1])
        xb = None if x is None else np.broadcast_to(np.asarray(x, float), z.shape[:-1] + np.shape(x)[-1:])
        for i in np.ndindex(z.shape[:-1]):
            out[i] = self._numeric_subgradient(t, None if xb is None else xb[i], float(yb[i]), z[i])
        return out

    def _numeric_subgradient(self, t, x, y, z):
        spec = self.spec
        d = z.size
        g0 = float(spec(t, x, np.float64(y), z))
        out = np.empty(d)
        for j in range(d):
            h = self.fd_scale * (1.0 + abs(z[j]))
            e = np.zeros(d)
            e[j] = h
            gp = float(spec(t, x, np.float64(y), z + e))
            gm = float(spec(t, x, np.float64(y), z - e))
            right = (gp - g0) / h
            left = (g0 - gm) / h
            if right - left > 1e-3 * (1.0 + abs(right) + abs(left)) and d == 1:
                # kink: interval [left, right], take its minimal-norm point
                out[j] = min(max(0.0, left), right)
            else:
                out[j] = (gp - gm) / (2.0 * h)
        return out

    def certify_subgradient(self, t, x, y, z, q, n_probe=64, seed=0, atol=1e-7):
        """Largest violation of ``g(z') - g(z) >= (z'-z).q`` on probe points."""
        rng = np.random.default_rng(seed)
        d = self.dim
        scales = np.logspace(-4, 1, n_probe) * (1.0 + float(np.linalg.norm(z)))
        dirs = rng.standard_normal((n_probe, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        probes = z + scales[:, None] * dirs
        g0 = float(self.spec(t, x, np.float64(y), z))
        xb = None if x is None else np.broadcast_to(x, (n_probe,) + np.shape(x))
        gp = np.asarray(self.spec(t, xb, np.full(n_probe, y), probes), dtype=float)
        slack = gp - g0 - (probes - z) @ q
        worst = float(-slack.min())
        if worst > atol:
            raise SubgradientCertificateError(
                f"subgradient inequality violated by {worst:.3g} at z={z.tolist()}"
            )
        return max(worst, 0.0)


def _scalar_args(view, t, x, y, v, name):
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.shape != (view.dim,):
        raise ValidationError(f"{name} must have dimension {view.dim}, got shape {v.shape}")
    return _check_point(view.spec, float(t), x, y, v)


def fenchel_transform(view, t, x, y, q):
    """``f(t,x,y,q)`` as an :class:`ExtendedReal`."""
    x, y, q = _scalar_args(view, t, x, y, q, "q")
    value = float(view.conjugate(float(t), x, np.float64(y), q))
    return ExtendedReal.of(value)


def subdifferential_select(view, t, x, y, z, certify=True):
    """Minimal-norm member of the z-subdifferential of ``g`` at ``z``.

    Raises
    ------
    SubgradientCertificateError
        If the selection violates the subgradient inequality on sampled
        points (non-convex or mis-declared driver).
    """
    x, y, z = _scalar_args(view, t, x, y, z, "z")
    q = np.asarray(view.subgradient(float(t), x, np.float64(y), z), dtype=float).reshape(view.dim)
    if certify:
        view.certify_subgradient(float(t), x, y, z, q)
    return q


def fenchel_young_gap(view, t, x, y, z, q):
    """``g(z) + f(q) - z.q``; nonnegative, zero iff ``q`` is a subgradient at ``z``."""
    x, y, z = _scalar_args(view, t, x, y, z, "z")
    q = np.atleast_1d(np.asarray(q, dtype=float))
    f = fenchel_transform(view, t, x, y, q)
    if not f.finite:
        raise InfiniteValueError("f is +inf at q; the Fenchel-Young gap is undefined")
    g = float(view.spec(float(t), x, np.float64(y), z))
    return g + f.value - float(np.dot(z, q))
