"""Forward diffusion paths, Girsanov densities and moment diagnostics.

Brownian increments are counter-based: path ``i`` draws its uniforms from a
Philox stream keyed by the seed with the path index in the counter, so a
bundle is bit-identical whatever the number of worker threads.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtri

from ._stats import mean_and_stderr, tail_dominated
from .errors import NumericalError, ValidationError

__all__ = [
    "TimeGrid",
    "SdeSpec",
    "brownian",
    "ornstein_uhlenbeck",
    "linear_sde",
    "PathBundle",
    "gaussian_increments",
    "simulate_forward",
    "girsanov_weights",
    "step_ratio_residuals",
    "GirsanovCheck",
    "girsanov_consistency",
    "MomentEstimate",
    "exp_moment_estimate",
    "write_paths_csv",
]


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("a time grid needs at least one step")
        if not self.horizon > 0:
            raise ValidationError("horizon must be positive")

    @property
    def dt(self):
        return self.horizon / self.steps

    @property
    def nodes(self):
        return np.arange(self.steps + 1) * self.dt

    def index_of(self, t):
        """Grid index of ``t``; ``t`` must be a node up to 1e-9 relative."""
        k = int(round(t / self.dt))
        if not 0 <= k <= self.steps or abs(k * self.dt - t) > 1e-9 * max(1.0, self.horizon):
            raise ValidationError(f"t={t} is not a node of the grid (dt={self.dt})")
        return k


@dataclass(frozen=True)
class SdeSpec:
    """``dX = b(t, X) dt + sigma(t) dW`` with ``x_dim`` states and ``w_dim`` noises.

    ``drift(t, x)`` maps ``(n, x_dim)`` to ``(n, x_dim)``; ``sigma(t)`` returns
    an ``(x_dim, w_dim)`` matrix.  ``K`` bounds both the Lipschitz constant of
    the drift and ``|b(t, 0)|``; ``sigma_sup`` bounds the operator norm of sigma.
    """

    drift: Callable
    sigma: Callable
    x_dim: int
    w_dim: int
    K: float
    sigma_sup: float
    name: str = "custom"
    params: dict = field(default_factory=dict)
    drift_free: bool = False

    def drift_at(self, t, x):
        return np.asarray(self.drift(t, x), dtype=float)

    def sigma_at(self, t):
        s = np.asarray(self.sigma(t), dtype=float)
        return s.reshape(self.x_dim, self.w_dim)

    def check_constants(self, n_samples=1000, radius=5.0, horizon=1.0, seed=0):
        """Largest sampled excess over the declared ``K`` and ``sigma_sup`` (0 if they hold)."""
        rng = np.random.default_rng(seed)
        t = rng.uniform(0.0, horizon, n_samples)
        x = rng.uniform(-radius, radius, (n_samples, self.x_dim))
        x2 = rng.uniform(-radius, radius, (n_samples, self.x_dim))
        worst_lip = worst_origin = worst_sigma = 0.0
        for i in range(n_samples):
            bx = self.drift_at(t[i], x[i:i + 1])[0]
            bx2 = self.drift_at(t[i], x2[i:i + 1])[0]
            b0 = self.drift_at(t[i], np.zeros((1, self.x_dim)))[0]
            dx = np.linalg.norm(x[i] - x2[i])
            if dx > 0:
                worst_lip = max(worst_lip, np.linalg.norm(bx - bx2) / dx - self.K)
            worst_origin = max(worst_origin, np.linalg.norm(b0) - self.K)
            worst_sigma = max(worst_sigma, np.linalg.norm(self.sigma_at(t[i]), 2) - self.sigma_sup)
        return {"lipschitz": worst_lip, "origin": worst_origin, "sigma": worst_sigma}


def brownian(dim=1, scale=1.0):
    """``dX = scale dW``."""
    s = float(scale)
    mat = s * np.eye(dim)
    return SdeSpec(
        drift=lambda t, x: np.zeros_like(x),
        sigma=lambda t: mat,
        x_dim=dim,
        w_dim=dim,
        K=0.0,
        sigma_sup=abs(s),
        name="brownian",
        params={"dim": dim, "sigma": s},
        drift_free=True,
    )


def ornstein_uhlenbeck(kappa, theta=0.0, scale=1.0, dim=1):
    """``dX = kappa (theta - X) dt + scale dW``."""
    kappa, theta, s = float(kappa), float(theta), float(scale)
    mat = s * np.eye(dim)
    return SdeSpec(
        drift=lambda t, x: kappa * (theta - x),
        sigma=lambda t: mat,
        x_dim=dim,
        w_dim=dim,
        K=max(abs(kappa), abs(kappa * theta) * math.sqrt(dim)),
        sigma_sup=abs(s),
        name="ornstein-uhlenbeck",
        params={"kappa": kappa, "theta": theta, "sigma": s, "dim": dim},
        drift_free=kappa == 0.0,
    )


def linear_sde(A, c, sigma):
    """``dX = (A X + c) dt + sigma dW`` with constant matrices."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    sig = np.atleast_2d(np.asarray(sigma, dtype=float))
    return SdeSpec(
        drift=lambda t, x: x @ A.T + c,
        sigma=lambda t: sig,
        x_dim=A.shape[0],
        w_dim=sig.shape[1],
        K=max(float(np.linalg.norm(A, 2)), float(np.linalg.norm(c))),
        sigma_sup=float(np.linalg.norm(sig, 2)),
        name="linear",
        params={"A": A.tolist(), "c": c.tolist(), "sigma": sig.tolist()},
        drift_free=not A.any() and not c.any(),
    )


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Simulated Brownian increments and Euler states.

    ``dW`` has shape ``(paths, steps, w_dim)``; ``X`` has shape
    ``(paths, steps + 1, x_dim)``.  States are frozen at ``x0`` up to the
    start index ``k0`` (the grid index of ``t0``).
    """

    grid: TimeGrid
    seed: int
    dW: np.ndarray
    X: np.ndarray
    t0: float
    x0: np.ndarray
    k0: int
    sde: SdeSpec

    @property
    def paths(self):
        return self.X.shape[0]

    @property
    def w_dim(self):
        return self.dW.shape[2]

    @property
    def x_dim(self):
        return self.X.shape[2]

    @property
    def W(self):
        """Brownian paths ``W_k`` (with ``W_0 = 0``), shape ``(paths, steps+1, w_dim)``."""
        w = np.zeros((self.paths, self.grid.steps + 1, self.w_dim))
        np.cumsum(self.dW, axis=1, out=w[:, 1:])
        return w


_UNIT = 2.0 ** -53


def _path_normals(seed, start, stop, count):
    out = np.empty((stop - start, count))
    for j, i in enumerate(range(start, stop)):
        raw = np.random.Philox(key=seed, counter=[0, 0, 0, i]).random_raw(count)
        out[j] = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _UNIT
    return ndtri(out)


def gaussian_increments(seed, paths, steps, dim, dt, threads=1, chunk=4096):
    """Standard-normal increments scaled by ``sqrt(dt)``, shape ``(paths, steps, dim)``.

    Each path owns a Philox stream (key ``seed``, path index in the counter);
    normals come from the inverse normal CDF of 53-bit uniforms.
    """
    if paths < 1:
        raise ValidationError("paths must be >= 1")
    if seed < 0:
        raise ValidationError("seed must be nonnegative")
    count = steps * dim
    bounds = [(s, min(s + chunk, paths)) for s in range(0, paths, chunk)]
    out = np.empty((paths, count))

    def work(b):
        out[b[0]:b[1]] = _path_normals(seed, b[0], b[1], count)

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, bounds))
    else:
        for b in bounds:
            work(b)
    return (out * math.sqrt(dt)).reshape(paths, steps, dim)


def simulate_forward(spec, t0, x0, grid, paths, seed, threads=1):
    """Euler-Maruyama paths of ``spec`` started at ``(t0, x0)``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (spec.x_dim,):
        raise ValidationError(f"x0 must have dimension {spec.x_dim}")
    if not np.all(np.isfinite(x0)):
        raise ValidationError("x0 must be finite")
    k0 = grid.index_of(t0)
    dt = grid.dt
    dW = gaussian_increments(seed, paths, grid.steps, spec.w_dim, dt, threads=threads)
    X = np.empty((paths, grid.steps + 1, spec.x_dim))
    X[:, : k0 + 1] = x0
    nodes = grid.nodes
    for k in range(k0, grid.steps):
        b = spec.drift_at(nodes[k], X[:, k])
        sig = spec.sigma_at(nodes[k])
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(sig))):
            raise NumericalError(f"non-finite drift or diffusion at step {k}")
        X[:, k + 1] = X[:, k] + b * dt + dW[:, k] @ sig.T
    return PathBundle(grid=grid, seed=seed, dW=dW, X=X, t0=float(t0), x0=x0, k0=k0, sde=spec)


def _control_values(control, bundle):
    q = np.asarray(getattr(control, "values", control), dtype=float)
    if q.shape != bundle.dW.shape:
        raise ValidationError(f"control shape {q.shape} does not match increments {bundle.dW.shape}")
    if not np.all(np.isfinite(q)):
        raise ValidationError("control has non-finite values")
    return q


def girsanov_weights(control, bundle):
    """Density path ``M_k = exp(sum_j q_j.dW_j - 1/2 |q_j|^2 dt)``, shape ``(paths, steps+1)``."""
    q = _control_values(control, bundle)
    incr = np.sum(q * bundle.dW, axis=2) - 0.5 * np.sum(q * q, axis=2) * bundle.grid.dt
    logm = np.zeros((bundle.paths, bundle.grid.steps + 1))
    np.cumsum(incr, axis=1, out=logm[:, 1:])
    return np.exp(logm)


def step_ratio_residuals(weights, bundle):
    """Regression test of ``E[M_{k+1}/M_k | X_k] = 1`` step by step.

    Regresses the one-step ratio on ``[1, standardised X_k]``; returns the
    per-step z-scores of ``intercept - 1`` and of the slopes, shape
    ``(steps, 1 + x_dim)``.
    """
    ratio = weights[:, 1:] / weights[:, :-1]
    steps = bundle.grid.steps
    n = bundle.paths
    out = np.zeros((steps, 1 + bundle.x_dim))
    for k in range(steps):
        xk = bundle.X[:, k]
        sd = xk.std(axis=0)
        live = sd > 1e-12
        design = np.ones((n, 1 + int(live.sum())))
        design[:, 1:] = (xk[:, live] - xk[:, live].mean(axis=0)) / sd[live]
        coef, *_ = np.linalg.lstsq(design, ratio[:, k], rcond=None)
        resid = ratio[:, k] - design @ coef
        s = resid.std(ddof=design.shape[1]) / math.sqrt(n)
        z = np.zeros(1 + bundle.x_dim)
        if s > 1e-12:  # a deterministic ratio (q = 0) has nothing to test
            z[0] = (coef[0] - 1.0) / s
            z[1:][live] = coef[1:] / s
        out[k] = z
    return out


@dataclass(frozen=True)
class GirsanovCheck:
    weighted: float
    weighted_stderr: float
    shifted: float
    shifted_stderr: float

    @property
    def combined_stderr(self):
        return math.hypot(self.weighted_stderr, self.shifted_stderr)

    @property
    def consistent(self):
        return abs(self.weighted - self.shifted) <= 3.0 * self.combined_stderr

    def as_dict(self):
        d = dict(self.__dict__)
        d.update(combined_stderr=self.combined_stderr, consistent=self.consistent)
        return d


def girsanov_consistency(spec, x0, grid, c, paths, seed, threads=1):
    """Compare ``E[M_T X_T]`` with ``E[X_T]`` simulated under drift ``b + sigma c``.

    The shifted simulation uses seed ``seed + 1`` so the two estimates are
    independent; the comparison is per state coordinate, the worst reported.
    """
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if c.shape != (spec.w_dim,):
        raise ValidationError(f"constant control must have dimension {spec.w_dim}")
    base = simulate_forward(spec, 0.0, x0, grid, paths, seed, threads)
    m = girsanov_weights(np.broadcast_to(c, base.dW.shape), base)[:, -1]
    shifted_spec = SdeSpec(
        drift=lambda t, x: spec.drift_at(t, x) + spec.sigma_at(t) @ c,
        sigma=spec.sigma, x_dim=spec.x_dim, w_dim=spec.w_dim,
        K=spec.K + spec.sigma_sup * float(np.linalg.norm(c)), sigma_sup=spec.sigma_sup,
        name=f"{spec.name}+shift",
    )
    shifted = simulate_forward(shifted_spec, 0.0, x0, grid, paths, seed + 1, threads)
    worst = None
    for j in range(spec.x_dim):
        w, wse = mean_and_stderr(m * base.X[:, -1, j])
        s, sse = mean_and_stderr(shifted.X[:, -1, j])
        check = GirsanovCheck(w, wse, s, sse)
        if worst is None or abs(w - s) / max(check.combined_stderr, 1e-300) > \
                abs(worst.weighted - worst.shifted) / max(worst.combined_stderr, 1e-300):
            worst = check
    return worst


@dataclass(frozen=True)
class MomentEstimate:
    value: float
    stderr: float
    unstable: bool
    certified_regime: Optional[bool]
    lambda_limit: Optional[float]

    def as_dict(self):
        return dict(self.__dict__)


def exp_moment_estimate(bundle, lam):
    """Monte Carlo estimate of ``E[max_k exp(lam |X_k|^2)]`` over grid nodes.

    ``certified_regime`` records whether ``lam`` lies below
    ``1 / (2 exp(2KT) sigma_sup^2 T)``; outside it the number is a diagnostic
    only.  ``unstable`` flags estimates dominated by under 0.1% of the paths.
    """
    if lam < 0:
        raise ValidationError("lambda must be nonnegative")
    T = bundle.grid.horizon
    sde = bundle.sde
    denom = 2.0 * math.exp(2.0 * sde.K * T) * sde.sigma_sup**2 * T
    limit = math.inf if denom == 0 else 1.0 / denom
    if lam == 0:
        return MomentEstimate(1.0, 0.0, False, True, limit)
    sq = np.max(np.sum(np.square(bundle.X), axis=2), axis=1)
    samples = np.exp(lam * sq)
    mean, se = mean_and_stderr(samples)
    return MomentEstimate(mean, se, tail_dominated(samples), lam < limit, limit)


def write_paths_csv(bundle, path, max_paths=None):
    """One row per (path, node): ``path, k, t, x_0, ..., x_{dx-1}``."""
    n = bundle.paths if max_paths is None else min(max_paths, bundle.paths)
    nodes = bundle.grid.nodes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "k", "t"] + [f"x{j}" for j in range(bundle.x_dim)])
        for i in range(n):
            for k in range(bundle.grid.steps + 1):
                w.writerow([i, k, repr(float(nodes[k]))] + [repr(float(v)) for v in bundle.X[i, k]])
