"""Semilinear quadratic PDE in one space dimension.

Solves

    u_t + b u_x + 1/2 sigma^2 u_xx - g(t, x, u, -sigma u_x) = 0,   u(T, .) = h

by a backward theta-scheme on ``[-R, R]``, provides the Cole-Hopf closed form
for the pure-quadratic driver and compares the grid solution with the
Markovian BSDE value ``u(t, x) = Y_t^{t,x}``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import solve_banded
from scipy.special import logsumexp

from .errors import ConvergenceError, NumericalError, ValidationError
from .generator import AssumptionReport, ClauseResult, _clause, lipschitz_approximant

__all__ = [
    "PdeSpec",
    "PdeGrid",
    "PdeSolution",
    "A4Report",
    "check_A4",
    "solve_pde_fd",
    "heat_semigroup",
    "cole_hopf_oracle",
    "sup_norm_error",
    "refinement_study",
    "boundary_influence",
    "FKRow",
    "FKTable",
    "bsde_runner",
    "feynman_kac_compare",
    "LadderReport",
    "viscosity_ladder",
    "ModulusReport",
    "sample_point_pairs",
    "continuity_modulus_check",
    "write_pde_csv",
]


@dataclass(frozen=True)
class PdeSpec:
    """PDE data: a 1-d diffusion, a driver, the terminal function and the
    structural constants ``(r, beta, gamma, alpha, alpha_prime)``.

    ``terminal`` maps states of shape ``(n, 1)`` to values ``(n,)``, exactly as
    the BSDE terminal function does.
    """

    sde: object
    generator: object
    terminal: Callable
    horizon: float = 1.0
    r: float = 1.0
    beta: float = 0.0
    gamma: float = 1.0
    alpha: float = 0.0
    alpha_prime: float = 0.0
    name: str = "pde"

    def __post_init__(self):
        if self.sde.x_dim != 1 or self.sde.w_dim != 1:
            raise ValidationError("the finite-difference solver handles one space dimension only")
        if self.generator.dim != 1:
            raise ValidationError("driver dimension must be 1")
        if not self.horizon > 0:
            raise ValidationError("horizon must be positive")
        for name in ("r", "beta", "gamma", "alpha", "alpha_prime"):
            if not getattr(self, name) >= 0:
                raise ValidationError(f"{name} must be >= 0")

    def h(self, x):
        return np.asarray(self.terminal(np.asarray(x, dtype=float).reshape(-1, 1)), dtype=float).reshape(-1)

    def sigma(self, t):
        return float(self.sde.sigma_at(t)[0, 0])


@dataclass(frozen=True)
class PdeGrid:
    time_nodes: int = 101
    space_nodes: int = 401
    radius: float = 6.0
    theta: float = 1.0
    max_iterations: int = 50
    tol: float = 1e-10

    def __post_init__(self):
        if self.time_nodes < 2 or self.space_nodes < 5:
            raise ValidationError("need at least 2 time nodes and 5 space nodes")
        if not self.radius > 0:
            raise ValidationError("radius must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise ValidationError("theta must lie in [0, 1]")

    def refined(self, time_factor=4, space_factor=2):
        return PdeGrid((self.time_nodes - 1) * time_factor + 1, (self.space_nodes - 1) * space_factor + 1,
                       self.radius, self.theta, self.max_iterations, self.tol)


@dataclass(frozen=True, eq=False)
class PdeSolution:
    """Grid values ``u[i, j] = u(t_i, x_j)``."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    theta: float
    dt: float
    dx: float
    radius: float
    boundary: str
    iterations: int = 0
    label: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.u)):
            raise NumericalError("PDE solution has non-finite values")

    def at(self, t, x):
        """Bilinear interpolation at points inside the grid."""
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        if np.any(t < self.t[0]) or np.any(t > self.t[-1]) or np.any(np.abs(x) > self.radius):
            raise ValidationError("point outside the PDE grid")
        interp = RegularGridInterpolator((self.t, self.x), self.u)
        tb, xb = np.broadcast_arrays(t, x)
        return interp(np.stack([tb.ravel(), xb.ravel()], axis=1)).reshape(tb.shape)

    def interior(self, fraction=0.5):
        """Mask of space nodes with ``|x| <= fraction * R``."""
        return np.abs(self.x) <= fraction * self.radius + 1e-12

    def same_grid(self, other):
        return self.u.shape == other.u.shape and np.allclose(self.t, other.t) and np.allclose(self.x, other.x)


def _nodes(horizon, grid):
    t = np.linspace(0.0, horizon, grid.time_nodes)
    x = np.linspace(-grid.radius, grid.radius, grid.space_nodes)
    return t, x


# --------------------------------------------------------------------------
# Assumption (A.4)


@dataclass(frozen=True)
class A4Report:
    clauses: dict
    smallness_lhs: float
    smallness_rhs: float

    @property
    def passed(self):
        return all(c.passed for c in self.clauses.values())

    def as_dict(self):
        d = AssumptionReport(self.clauses).as_dict()
        d["smallness_lhs"] = self.smallness_lhs
        d["smallness_rhs"] = self.smallness_rhs if math.isfinite(self.smallness_rhs) else "inf"
        return d


def check_A4(spec, n_samples=2000, box=5.0, seed=0):
    """Check the PDE structural conditions.

    The smallness condition ``alpha' + T alpha < 1/(2 gamma e^{3 beta T} |sigma|^2 T)``
    is evaluated exactly from the declared constants (the right side is
    infinite when ``gamma = 0``); the remaining clauses are sampled on
    ``|x|, |y|, |z| <= box``.  Violations are report entries.
    """
    T = spec.horizon
    sig = spec.sde.sigma_sup
    lhs = spec.alpha_prime + T * spec.alpha
    denom = 2.0 * spec.gamma * math.exp(3.0 * spec.beta * T) * sig**2 * T
    rhs = math.inf if denom == 0 else 1.0 / denom
    small = ClauseResult(lhs < rhs, max(lhs - rhs, 0.0) if math.isfinite(rhs) else 0.0, lhs, 1)

    rng = np.random.default_rng(seed)
    n = n_samples
    t = rng.uniform(0.0, T, n)
    x = rng.uniform(-box, box, (n, 1))
    x2 = rng.uniform(-box, box, (n, 1))
    y = rng.uniform(-box, box, n)
    y2 = rng.uniform(-box, box, n)
    z = rng.uniform(-box, box, (n, 1))
    z2 = rng.uniform(-box, box, (n, 1))
    gen = spec.generator

    def g(xx, yy, zz):
        return np.array([float(gen(t[i], xx[i], yy[i], zz[i])) for i in range(n)])

    gv = g(x, y, z)
    scale = 1.0 + np.abs(gv)
    atol = 1e-9
    ax2 = x[:, 0] ** 2
    az = np.abs(z[:, 0])
    dy = np.abs(y - y2)
    lip_y = np.where(dy > 0, np.abs(gv - g(x, y2, z)) - spec.beta * dy, 0.0)
    mid = g(x, y, 0.5 * (z + z2)) - 0.5 * (gv + g(x, y, z2))
    g_low = -spec.r * (1 + ax2 + np.abs(y) + az) - gv
    g_up = gv - (spec.r + spec.alpha * ax2 + spec.beta * np.abs(y) + 0.5 * spec.gamma * az**2)
    hx = spec.h(x)
    hx2 = spec.h(x2)
    h_low = -spec.r - spec.alpha_prime * ax2 - hx
    h_up = hx - spec.r * (1 + ax2)
    mod = spec.r * (1 + np.abs(x[:, 0]) + np.abs(x2[:, 0])) * np.abs(x[:, 0] - x2[:, 0])
    g_x = np.abs(gv - g(x2, y, z)) - mod
    h_x = np.abs(hx - hx2) - mod
    hscale = 1.0 + np.abs(hx)
    clauses = {
        "lipschitz_y": _clause(lip_y / scale, np.max(lip_y), atol),
        "convexity_z": _clause(mid / scale, np.max(mid), atol),
        "growth_g": _clause(np.maximum(g_low, g_up) / scale, np.max(np.maximum(g_low, g_up)), atol),
        "growth_h": _clause(np.maximum(h_low, h_up) / hscale, np.max(np.maximum(h_low, h_up)), atol),
        "locally_lipschitz_x_g": _clause(g_x / scale, np.max(g_x), atol),
        "locally_lipschitz_x_h": _clause(h_x / hscale, np.max(h_x), atol),
        "smallness": small,
    }
    return A4Report(clauses, lhs, rhs)


# --------------------------------------------------------------------------
# heat semigroup, boundary data and the closed form


def _variance(spec, t):
    """``int_t^T sigma(s)^2 ds`` by Simpson's rule on 65 points."""
    T = spec.horizon
    if t >= T:
        return 0.0
    s = np.linspace(t, T, 65)
    v = np.array([spec.sigma(si) ** 2 for si in s])
    w = np.ones(65)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return float((T - t) / 192.0 * np.dot(w, v))


def heat_semigroup(spec, t, x, nodes=96):
    """``E[h(x + N(0, int_t^T sigma^2))]`` by Gauss-Hermite quadrature (drift ignored)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    var = _variance(spec, t)
    if var == 0:
        return spec.h(x)
    xi, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    pts = x[:, None] + math.sqrt(var) * xi[None, :]
    return spec.h(pts.ravel()).reshape(pts.shape) @ w


def _boundary_values(spec, t, xb, delta=1e-4):
    """Dirichlet data at ``x = +-R``: the heat semigroup ``v`` of ``h`` minus
    ``(T - t) g(t, x, v, -sigma v_x)``."""
    out = np.empty((t.size, xb.size))
    gen = spec.generator
    for i, ti in enumerate(t):
        v = heat_semigroup(spec, ti, xb)
        if ti >= spec.horizon:
            out[i] = v
            continue
        vx = (heat_semigroup(spec, ti, xb + delta) - heat_semigroup(spec, ti, xb - delta)) / (2 * delta)
        zarg = (-spec.sigma(ti) * vx)[:, None]
        out[i] = v - (spec.horizon - ti) * np.asarray(gen(ti, xb[:, None], v, zarg), dtype=float)
    return out


def cole_hopf_oracle(gamma, h, sde, grid=None, horizon=1.0, nodes=96):
    """Closed-form solution for the driver ``(gamma/2) z^2`` and zero drift.

    ``u = -(1/gamma) log E[exp(-gamma h(x + sigma W_{T-t}))]`` computed by
    Gauss-Hermite quadrature in log-sum-exp form.

    Raises
    ------
    NumericalError
        When the quadrature produces non-finite values (extreme ``gamma h``).
    """
    if not gamma > 0:
        raise ValidationError("gamma must be positive")
    if not sde.drift_free:
        raise ValidationError("the closed form needs a drift-free diffusion")
    grid = grid or PdeGrid()
    from .generator import pure_quadratic

    spec = PdeSpec(sde, pure_quadratic(gamma, 1), h, horizon, gamma=gamma)
    t, x = _nodes(horizon, grid)
    u = np.empty((t.size, x.size))
    xi, w = np.polynomial.hermite_e.hermegauss(nodes)
    logw = np.log(w / w.sum())
    with np.errstate(over="ignore", invalid="ignore"):
        for i, ti in enumerate(t):
            var = _variance(spec, ti)
            if var == 0:
                u[i] = spec.h(x)
                continue
            pts = x[:, None] + math.sqrt(var) * xi[None, :]
            hv = spec.h(pts.ravel()).reshape(pts.shape)
            u[i] = -logsumexp(-gamma * hv + logw[None, :], axis=1) / gamma
    if not np.all(np.isfinite(u)):
        raise NumericalError("Cole-Hopf quadrature under- or overflowed")
    dx = x[1] - x[0]
    return PdeSolution(t, x, u, 1.0, t[1] - t[0], dx, grid.radius, "closed-form", 0, "cole-hopf")


# --------------------------------------------------------------------------
# finite differences


def _z_derivative(gen, t, x, y, z, gv):
    grad = gen.z_gradient(t, x, y, z)
    if grad is not None:
        return np.asarray(grad, dtype=float)[:, 0]
    h = 1e-6 * (1.0 + np.abs(z))
    return (np.asarray(gen(t, x, y, z + h), dtype=float) - np.asarray(gen(t, x, y, z - h), dtype=float)) / (2 * h[:, 0])


def _y_derivative(gen, t, x, y, z):
    if not gen.y_dependent:
        return np.zeros(y.shape)
    h = 1e-6 * (1.0 + np.abs(y))
    return (np.asarray(gen(t, x, y + h, z), dtype=float) - np.asarray(gen(t, x, y - h, z), dtype=float)) / (2 * h)


def solve_pde_fd(spec, grid=None):
    """Backward theta-scheme with centered differences and Dirichlet data at ``|x| = R``.

    Each step solves the nonlinear system
    ``u - theta dt L u + dt g(u, -sigma D u) = u_next + (1 - theta) dt L u_next``
    by Newton iterations on the tridiagonal Jacobian (cap and tolerance from
    ``grid``).  For ``theta < 1`` the explicit part must satisfy
    ``(1 - theta) dt sigma^2 / dx^2 <= 1/2``.

    Raises
    ------
    ValidationError
        If the stability guard fails.
    ConvergenceError
        If a step does not converge.
    """
    grid = grid or PdeGrid()
    t, x = _nodes(spec.horizon, grid)
    dt = t[1] - t[0]
    dx = x[1] - x[0]
    th = grid.theta
    if th < 1.0:
        worst = max(spec.sigma(ti) ** 2 for ti in t)
        if (1.0 - th) * dt * worst / dx**2 > 0.5:
            raise ValidationError(
                f"stability guard: (1-theta) dt sigma^2/dx^2 = {(1 - th) * dt * worst / dx**2:.3g} > 1/2"
            )
    nx = x.size
    xi = x[1:-1]
    xcol = xi[:, None]
    gen = spec.generator
    u = np.empty((t.size, nx))
    u[-1] = spec.h(x)
    bd = _boundary_values(spec, t, x[[0, -1]])
    worst_its = 0
    for n in range(t.size - 2, -1, -1):
        tn = t[n]
        sig = spec.sigma(tn)
        b = spec.sde.drift_at(tn, xcol)[:, 0]
        lo = 0.5 * sig**2 / dx**2 - b / (2 * dx)
        di = -(sig**2) / dx**2 * np.ones(nx - 2)
        up = 0.5 * sig**2 / dx**2 + b / (2 * dx)
        nxt = u[n + 1]
        rhs = nxt[1:-1].copy()
        if th < 1.0:
            rhs += (1.0 - th) * dt * (lo * nxt[:-2] + di * nxt[1:-1] + up * nxt[2:])
        cur = nxt.copy()
        cur[0], cur[-1] = bd[n]
        for it in range(1, grid.max_iterations + 1):
            ui = cur[1:-1]
            zarg = (-sig * (cur[2:] - cur[:-2]) / (2 * dx))[:, None]
            gv = np.asarray(gen(tn, xcol, ui, zarg), dtype=float)
            gz = _z_derivative(gen, tn, xcol, ui, zarg, gv)
            gy = _y_derivative(gen, tn, xcol, ui, zarg)
            F = ui - th * dt * (lo * cur[:-2] + di * ui + up * cur[2:]) + dt * gv - rhs
            ab = np.zeros((3, nx))
            ab[1, 0] = ab[1, -1] = 1.0
            ab[1, 1:-1] = 1.0 - th * dt * di + dt * gy
            ab[2, :-2] = -th * dt * lo + dt * gz * sig / (2 * dx)  # d/du_{i-1}
            ab[0, 2:] = -th * dt * up - dt * gz * sig / (2 * dx)  # d/du_{i+1}
            full = np.zeros(nx)
            full[1:-1] = F
            full[0] = cur[0] - bd[n, 0]
            full[-1] = cur[-1] - bd[n, 1]
            step = solve_banded((1, 1), ab, full)
            cur = cur - step
            if not np.all(np.isfinite(cur)):
                raise NumericalError(f"non-finite PDE values at t={tn:.6g}")
            if np.max(np.abs(step)) <= grid.tol * (1.0 + np.max(np.abs(cur))):
                break
        else:
            raise ConvergenceError(f"PDE step at t={tn:.6g} did not converge in {grid.max_iterations} iterations")
        worst_its = max(worst_its, it)
        u[n] = cur
    return PdeSolution(t, x, u, th, dt, dx, grid.radius, "dirichlet-heat-semigroup", worst_its, spec.name)


def sup_norm_error(a, b, fraction=0.5):
    """Sup-norm distance over all times and the interior ``|x| <= fraction R``."""
    if not a.same_grid(b):
        raise ValidationError("solutions live on different grids")
    mask = a.interior(fraction)
    return float(np.max(np.abs(a.u[:, mask] - b.u[:, mask])))


def refinement_study(spec, reference, grid=None, levels=2, fraction=0.5):
    """Errors against ``reference(grid) -> PdeSolution`` under ``dx -> dx/2, dt -> dt/4``."""
    grid = grid or PdeGrid()
    errors = []
    for _ in range(levels):
        errors.append(sup_norm_error(solve_pde_fd(spec, grid), reference(grid), fraction))
        grid = grid.refined()
    return errors


def boundary_influence(spec, grid, points):
    """Largest change of ``u`` at ``points`` when the radius doubles at fixed ``dx``."""
    wide = PdeGrid(grid.time_nodes, 2 * (grid.space_nodes - 1) + 1, 2 * grid.radius, grid.theta,
                   grid.max_iterations, grid.tol)
    a = solve_pde_fd(spec, grid)
    b = solve_pde_fd(spec, wide)
    pts = np.asarray(points, dtype=float)
    return float(np.max(np.abs(a.at(pts[:, 0], pts[:, 1]) - b.at(pts[:, 0], pts[:, 1]))))


# --------------------------------------------------------------------------
# Feynman-Kac comparison


@dataclass(frozen=True)
class FKRow:
    t: float
    x: float
    u_fd: float
    y0: float
    stderr: float
    difference: float
    tolerance: float

    @property
    def within(self):
        return self.difference <= self.tolerance

    def as_dict(self):
        d = dict(self.__dict__)
        d["within"] = self.within
        return d


@dataclass(frozen=True)
class FKTable:
    rows: tuple

    @property
    def passed(self):
        return all(r.within for r in self.rows)

    @property
    def max_difference(self):
        return max(r.difference for r in self.rows)

    def as_dict(self):
        return {"passed": self.passed, "rows": [r.as_dict() for r in self.rows]}


def bsde_runner(spec, steps=50, paths=2**16, seed=7, basis=None, opts=None, threads=1):
    """``(t, x) -> (Y_t^{t,x}, stderr)`` from a regression BSDE solve with the PDE's data."""
    from .bsde import solve_bsde_lsmc
    from .paths import TimeGrid, simulate_forward

    grid = TimeGrid(spec.horizon, steps)

    def run(t, x):
        bundle = simulate_forward(spec.sde, t, [x], grid, paths, seed, threads)
        sol = solve_bsde_lsmc(spec.generator, spec.terminal, bundle, basis, opts)
        return sol.y0, sol.y0_stderr

    return run


def feynman_kac_compare(pde, runner, points, tol=0.05, fraction=0.9):
    """Per-point comparison of the grid solution with the BSDE value.

    ``runner`` is another :class:`PdeSolution` or a callable
    ``(t, x) -> (value, stderr)``.  The per-point tolerance is ``tol`` plus
    three standard errors of the BSDE estimate.
    """
    rows = []
    for t, x in points:
        if not (pde.t[0] <= t <= pde.t[-1]) or abs(x) > fraction * pde.radius:
            raise ValidationError(f"point ({t}, {x}) is outside the grid interior")
        u = float(pde.at(t, x))
        if isinstance(runner, PdeSolution):
            y, se = float(runner.at(t, x)), 0.0
        else:
            y, se = runner(t, x)
        rows.append(FKRow(float(t), float(x), u, float(y), float(se), abs(u - y), tol + 3.0 * se))
    return FKTable(tuple(rows))


# --------------------------------------------------------------------------
# ladder and modulus


@dataclass
class LadderReport:
    n_list: tuple
    solutions: list
    violations: list
    max_increase: list
    sup_distances: list

    @property
    def monotone(self):
        return all(v == 0 for v in self.violations)

    def as_dict(self):
        return {
            "n_list": list(self.n_list),
            "u00": [float(s.at(0.0, 0.0)) for s in self.solutions],
            "violations": self.violations,
            "max_increase": self.max_increase,
            "sup_distances": self.sup_distances,
            "monotone": self.monotone,
        }


def viscosity_ladder(spec, n_list, grid=None, slack=1e-6):
    """Solve with the Lipschitz approximants ``g_n`` and check ``u_n`` decreases in ``n``."""
    n_list = tuple(int(n) for n in n_list)
    if any(b <= a for a, b in zip(n_list, n_list[1:])) or not n_list:
        raise ValidationError("n_list must be strictly increasing")
    from dataclasses import replace

    sols = []
    for n in n_list:
        gn = lipschitz_approximant(spec.generator, n)
        sols.append(solve_pde_fd(replace(spec, generator=gn, name=f"{spec.name} n={n}"), grid))
    viol, inc, dist = [], [], []
    for a, b in zip(sols, sols[1:]):
        diff = b.u - a.u
        viol.append(int(np.sum(diff > slack)))
        inc.append(float(max(np.max(diff), 0.0)))
        dist.append(float(np.max(np.abs(diff))))
    return LadderReport(n_list, sols, viol, inc, dist)


@dataclass(frozen=True)
class ModulusReport:
    spatial_constant: float
    growth_constant: float
    pairs: int

    def as_dict(self):
        return dict(self.__dict__)


def sample_point_pairs(pde, count=500, seed=0, fraction=0.5, same_time=False):
    """Random pairs ``((t, x), (t', x'))`` inside ``|x| <= fraction R``."""
    rng = np.random.default_rng(seed)
    lim = fraction * pde.radius
    t1 = rng.uniform(pde.t[0], pde.t[-1], count)
    t2 = t1 if same_time else rng.uniform(pde.t[0], pde.t[-1], count)
    x1 = rng.uniform(-lim, lim, count)
    x2 = rng.uniform(-lim, lim, count)
    return [((a, b), (c, d)) for a, b, c, d in zip(t1, x1, t2, x2)]


def continuity_modulus_check(pde, pairs):
    """Smallest empirical constants in the continuity modulus and quadratic growth.

    ``spatial_constant`` is the least ``C`` with
    ``|u(t,x) - u(t',x')| <= C[(1+|x|+|x'|)|x-x'| + (1+x^2+x'^2)|t-t'|^(1/2)]``
    over the pairs; ``growth_constant`` the least ``C`` with ``|u| <= C(1 + x^2)``
    over all their endpoints.
    """
    if not pairs:
        return ModulusReport(0.0, 0.0, 0)
    p = np.asarray(pairs, dtype=float)
    t1, x1, t2, x2 = p[:, 0, 0], p[:, 0, 1], p[:, 1, 0], p[:, 1, 1]
    u1 = pde.at(t1, x1)
    u2 = pde.at(t2, x2)
    denom = (1 + np.abs(x1) + np.abs(x2)) * np.abs(x1 - x2) + (1 + x1**2 + x2**2) * np.sqrt(np.abs(t1 - t2))
    num = np.abs(u1 - u2)
    ratio = np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), 0.0)
    growth = max(float(np.max(np.abs(u1) / (1 + x1**2))), float(np.max(np.abs(u2) / (1 + x2**2))))
    return ModulusReport(float(np.max(ratio)), growth, len(pairs))


def write_pde_csv(sol, path, time_stride=1, space_stride=1):
    """Rows ``t, x, u`` in time-major order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "u"])
        for i in range(0, sol.t.size, time_stride):
            for j in range(0, sol.x.size, space_stride):
                w.writerow([repr(float(sol.t[i])), repr(float(sol.x[j])), repr(float(sol.u[i, j]))])
