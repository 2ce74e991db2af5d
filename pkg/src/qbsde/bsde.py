"""Regression Monte Carlo solver for ``Y_t = xi - int_t^T g ds + int_t^T Z dW``.

With this sign convention ``dY = g dt - Z dW``, so one backward step reads

    Y_k = E_k[Y_{k+1}] - g(t_k, X_k, Y_k, Z_k) dt,
    Z_k = -E_k[Y_{k+1} dW_k] / dt,

with both conditional expectations replaced by polynomial regressions on
``X_k`` and the implicit ``Y_k`` found by fixed-point iteration.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from ._stats import mean_and_stderr, tail_dominated
from .errors import ConvergenceError, NumericalError, ValidationError
from .generator import lipschitz_approximant, InfConvolutionSearch
from .paths import simulate_forward
from .regression import PolynomialBasis

__all__ = [
    "SolverOptions",
    "BSDESolution",
    "solve_bsde_lsmc",
    "entropic_value",
    "alpha_path_integrals",
    "sandwich_lower_bound",
    "conditional_moment_factor",
    "LadderResult",
    "solve_lipschitz_sequence",
    "MomentReport",
    "uniqueness_class_check",
    "PartitionedSolve",
    "solve_partitioned",
    "write_solution_csv",
]


@dataclass(frozen=True)
class SolverOptions:
    """Knobs of the backward sweep.

    ``z_clamp=None`` uses ``10 * (1 + max |X|)`` over the bundle.
    """

    z_clamp: Optional[float] = None
    fixed_point_iterations: int = 10
    fixed_point_tol: float = 1e-10

    def as_dict(self):
        return {
            "z_clamp": self.z_clamp,
            "fixed_point_iterations": self.fixed_point_iterations,
            "fixed_point_tol": self.fixed_point_tol,
        }


def _implicit_step(g, t, x, base, z, dt, opts, y_dependent, sign=-1.0):
    """Solve ``y = base + sign * g(t, x, y, z) * dt``; return ``(y, iterations)``."""
    if not y_dependent:
        return base + sign * np.asarray(g(t, x, base, z), dtype=float) * dt, 1
    y = base
    for it in range(1, opts.fixed_point_iterations + 1):
        new = base + sign * np.asarray(g(t, x, y, z), dtype=float) * dt
        err = float(np.max(np.abs(new - y)))
        y = new
        if err <= opts.fixed_point_tol * (1.0 + float(np.max(np.abs(y)))):
            return y, it
    raise ConvergenceError(
        f"implicit step at t={t:.6g} did not converge in {opts.fixed_point_iterations} iterations"
    )


@dataclass(eq=False)
class BSDESolution:
    """Discrete ``(Y, Z)`` on a bundle with the sweep's diagnostics.

    ``Y`` has shape ``(paths, steps+1)`` and ``Z`` shape ``(paths, steps, d)``;
    arrays are indexed on the local grid whose absolute times are ``nodes``.
    """

    spec: object
    nodes: np.ndarray
    X: np.ndarray
    dW: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    driver: np.ndarray
    y_models: list
    z_models: list
    clamp_counts: np.ndarray
    reg_stderr: np.ndarray
    dp_residual: np.ndarray
    fixed_point_iterations: np.ndarray
    options: dict
    y0: float
    y0_stderr: float
    start_index: int = 0
    z_clamp: float = math.inf
    bundle: object = None

    @property
    def steps(self):
        return self.Z.shape[1]

    @property
    def dt(self):
        return float(self.nodes[1] - self.nodes[0])

    @property
    def clamp_count(self):
        return int(self.clamp_counts.sum())

    def value_function(self, k):
        """``x -> Y_k(x)`` from the node-``k`` regressions, re-solving the implicit step."""
        if not 0 <= k < self.steps:
            raise ValidationError(f"no regression stored at node {k}")
        ym, zm = self.y_models[k], self.z_models[k]
        t = float(self.nodes[k])
        opts = SolverOptions(**self.options)
        spec = self.spec

        def value(x):
            x = np.atleast_2d(np.asarray(x, dtype=float))
            z = np.clip(np.atleast_2d(zm(x)).reshape(x.shape[0], -1), -self.z_clamp, self.z_clamp)
            y, _ = _implicit_step(spec, t, x, ym(x), z, self.dt, opts, spec.y_dependent)
            return y

        return value

    def summary(self):
        return {
            "y0": self.y0,
            "y0_stderr": self.y0_stderr,
            "clamp_count": self.clamp_count,
            "max_dp_residual": float(np.max(self.dp_residual)),
            "max_dp_residual_ratio": float(np.max(self.dp_residual / np.maximum(self.reg_stderr, 1e-300))),
            "max_fixed_point_iterations": int(np.max(self.fixed_point_iterations)),
            "options": self.options,
        }


def _sweep(spec, xi, X, dW, nodes, basis, opts, start=0):
    n, steps, d = dW.shape
    if d != spec.dim:
        raise ValidationError(f"driver dimension {spec.dim} does not match Brownian dimension {d}")
    xi = np.asarray(xi, dtype=float).reshape(n)
    if not np.all(np.isfinite(xi)):
        raise ValidationError("terminal values must be finite")
    dt = float(nodes[1] - nodes[0])
    bound = opts.z_clamp if opts.z_clamp is not None else 10.0 * (1.0 + float(np.max(np.abs(X))))
    Y = np.empty((n, steps + 1))
    Z = np.zeros((n, steps, d))
    Y[:, steps] = xi
    driver = np.zeros((n, steps))
    y_models = [None] * steps
    z_models = [None] * steps
    clamps = np.zeros(steps, dtype=int)
    reg_se = np.zeros(steps)
    dp_res = np.zeros(steps)
    iters = np.zeros(steps, dtype=int)
    for k in range(steps - 1, start - 1, -1):
        t = float(nodes[k])
        xk = X[:, k]
        proj = basis.projector(xk)
        ey, y_models[k] = proj.fit(Y[:, k + 1])
        # a conditional mean lies in the range of its target; stops tail extrapolation
        ey = np.clip(ey, Y[:, k + 1].min(), Y[:, k + 1].max())
        innov = Y[:, k + 1] - ey
        zk, z_models[k] = proj.fit(-innov[:, None] * dW[:, k] / dt)
        over = np.abs(zk) > bound
        clamps[k] = int(over.sum())
        if clamps[k]:
            zk = np.clip(zk, -bound, bound)
        yk, iters[k] = _implicit_step(spec, t, xk, ey, zk, dt, opts, spec.y_dependent)
        gk = np.asarray(spec(t, xk, yk, zk), dtype=float)
        if not (np.all(np.isfinite(yk)) and np.all(np.isfinite(zk))):
            raise NumericalError(f"non-finite (Y, Z) at node {k}")
        Y[:, k] = yk
        Z[:, k] = zk
        driver[:, k] = gk
        reg_se[k] = math.sqrt(float(np.mean(innov * innov)))
        dp_res[k] = float(np.mean(np.abs(yk - Y[:, k + 1] + gk * dt - np.sum(zk * dW[:, k], axis=1))))
    if start > 0:
        Y[:, :start] = Y[:, [start]]
    pathwise = xi - driver[:, start:].sum(axis=1) * dt
    _, se = mean_and_stderr(pathwise)
    return dict(
        Y=Y, Z=Z, driver=driver, y_models=y_models, z_models=z_models, clamp_counts=clamps,
        reg_stderr=reg_se, dp_residual=dp_res, fixed_point_iterations=iters,
        y0=float(np.mean(Y[:, start])), y0_stderr=se, z_clamp=bound,
    )


def solve_bsde_lsmc(spec, terminal, bundle, basis=None, opts=None):
    """Solve the BSDE with driver ``spec`` and terminal ``terminal(X_T)`` on ``bundle``.

    ``y0`` is the solution at the bundle's start node ``t0``; its standard
    error is that of the pathwise estimator ``xi - sum g dt``.

    Raises
    ------
    RankDeficientError
        If a regression design is singular.
    ConvergenceError
        If the implicit step does not converge within the iteration cap.
    """
    basis = basis or PolynomialBasis()
    opts = opts or SolverOptions()
    if bundle.paths < 1:
        raise ValidationError("empty path bundle")
    xi = terminal(bundle.X[:, -1]) if callable(terminal) else terminal
    out = _sweep(spec, xi, bundle.X, bundle.dW, bundle.grid.nodes, basis, opts, start=bundle.k0)
    return BSDESolution(spec=spec, nodes=bundle.grid.nodes, X=bundle.X, dW=bundle.dW,
                        options=opts.as_dict(), start_index=bundle.k0, bundle=bundle, **out)


def write_solution_csv(solution, path, max_paths=None):
    """One row per (path, node): ``path, k, t, Y, Z_0..Z_{d-1}`` (Z empty at the last node)."""
    n = solution.Y.shape[0] if max_paths is None else min(max_paths, solution.Y.shape[0])
    d = solution.Z.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "k", "t", "Y"] + [f"Z{j}" for j in range(d)])
        for i in range(n):
            for k in range(solution.steps + 1):
                zs = [repr(float(v)) for v in solution.Z[i, k]] if k < solution.steps else [""] * d
                w.writerow([i, k, repr(float(solution.nodes[k])), repr(float(solution.Y[i, k]))] + zs)


# --------------------------------------------------------------------------
# closed forms and envelopes


def _log_mean_exp(a):
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValidationError("samples must be finite")
    lme = float(logsumexp(a) - math.log(a.size))
    if not math.isfinite(lme):
        raise NumericalError("exponential moment overflow; terminal condition out of class")
    # delta-method standard error of log mean exp
    w = np.exp(a - lme)
    se = float(w.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else math.inf
    return lme, se


def entropic_value(gamma, terminal_samples, return_stderr=False):
    """``-(1/gamma) log mean exp(-gamma xi)``: the exact ``Y_0`` for ``g = gamma/2 |z|^2``."""
    if not gamma > 0:
        raise ValidationError("gamma must be positive")
    lme, se = _log_mean_exp(-gamma * np.asarray(terminal_samples, dtype=float))
    value = -lme / gamma
    return (value, se / gamma) if return_stderr else value


def alpha_path_integrals(spec, bundle, k=0, beta=None):
    """Per-path left Riemann sums of ``alpha_bar(s, X_s) exp(beta (s - t_k))`` over ``[t_k, T]``."""
    beta = spec.monotonicity_beta if beta is None else beta
    nodes = bundle.grid.nodes
    n = bundle.paths
    total = np.zeros(n)
    for j in range(k, bundle.grid.steps):
        a = spec.alpha_bar_at(nodes[j], bundle.X[:, j], shape=(n,))
        total += a * math.exp(beta * (nodes[j] - nodes[k]))
    return total * bundle.grid.dt


def sandwich_lower_bound(spec, terminal_samples, alpha_integrals, t, horizon, return_stderr=False):
    """Explicit lower envelope of ``Y_t`` from the existence theory.

    ``-(1/gamma) log mean exp(gamma e^{beta (T-t)} xi^- + gamma * I)`` where
    ``I`` are the per-path integrals of ``alpha_bar e^{beta (r-t)}``, ``gamma``
    is ``spec.gamma_bar`` and ``beta`` the monotonicity constant.
    """
    xi = np.asarray(terminal_samples, dtype=float)
    integrals = np.broadcast_to(np.asarray(alpha_integrals, dtype=float), xi.shape)
    gamma = spec.gamma_bar
    expo = gamma * math.exp(spec.monotonicity_beta * (horizon - t)) * np.maximum(-xi, 0.0) + gamma * integrals
    lme, se = _log_mean_exp(expo)
    value = -lme / gamma + 0.0  # no negative zero for nonnegative terminals
    return (value, se / gamma) if return_stderr else value


def conditional_moment_factor(terminal_samples, alpha_low_integrals, p):
    """``(E[(xi^+)^p + (int alpha_low)^p])^{1/p}``, the moment factor of the upper envelope."""
    if not p > 1:
        raise ValidationError("p must exceed 1")
    xi = np.asarray(terminal_samples, dtype=float)
    a = np.broadcast_to(np.asarray(alpha_low_integrals, dtype=float), xi.shape)
    return float(np.mean(np.maximum(xi, 0.0) ** p + np.abs(a) ** p) ** (1.0 / p))


# --------------------------------------------------------------------------
# approximation ladder


@dataclass
class LadderResult:
    n_list: list
    solutions: list
    y0: list
    y0_stderr: list
    violations: list = field(default_factory=list)

    def as_dict(self):
        return {
            "n_list": list(self.n_list),
            "y0": self.y0,
            "y0_stderr": self.y0_stderr,
            "violations": self.violations,
        }


def solve_lipschitz_sequence(spec, terminal, bundle, n_list, basis=None, opts=None,
                             search=InfConvolutionSearch()):
    """Solve with the Lipschitz approximants ``g_n`` for each ``n`` in ``n_list``.

    ``g_n`` increases to ``g``, so the values should decrease in ``n``.  The
    per-node violations count paths where ``Y^{n'}_k > Y^n_k + 1e-9`` for
    consecutive ``n < n'``.
    """
    n_list = [int(v) for v in n_list]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValidationError("n_list must be strictly increasing")
    if n_list and n_list[0] < math.ceil(spec.r):
        raise ValidationError(f"every n must be >= ceil(r) = {math.ceil(spec.r)}")
    sols = [solve_bsde_lsmc(lipschitz_approximant(spec, n, search), terminal, bundle, basis, opts)
            for n in n_list]
    result = LadderResult(n_list, sols, [s.y0 for s in sols], [s.y0_stderr for s in sols])
    for (na, a), (nb, b) in zip(zip(n_list, sols), zip(n_list[1:], sols[1:])):
        excess = b.Y - a.Y
        bad = excess > 1e-9
        result.violations.append({
            "pair": [na, nb],
            "violating_entries": int(bad.sum()),
            "max_excess": float(max(excess.max(), 0.0)),
            "per_node": bad.sum(axis=0).tolist(),
        })
    return result


# --------------------------------------------------------------------------
# exponential-moment class


@dataclass(frozen=True)
class MomentReport:
    p: float
    epsilon: float
    exp_pA: float
    exp_pA_stderr: float
    exp_pA_flag: bool
    exp_eps_Yplus: float
    exp_eps_Yplus_stderr: float
    exp_eps_Yplus_flag: bool

    @property
    def flagged(self):
        return self.exp_pA_flag or self.exp_eps_Yplus_flag

    def as_dict(self):
        d = dict(self.__dict__)
        d["flagged"] = self.flagged
        return d


def uniqueness_class_check(solution, spec, p, epsilon):
    """Estimate ``E[exp(p A*)]`` and ``E[exp(eps (Y^+)*)]`` on grid nodes.

    ``A_t = Y_t^- + int_0^t alpha_bar ds``.  Flags mark estimates dominated
    by under 0.1% of paths, where divergence of the expectation is suspected.
    """
    if not p > spec.gamma_bar:
        raise ValidationError(f"p={p} must exceed gamma_bar={spec.gamma_bar}")
    if not epsilon > 0:
        raise ValidationError("epsilon must be positive")
    Y = solution.Y[:, solution.start_index:]
    X = solution.X[:, solution.start_index:]
    nodes = solution.nodes[solution.start_index:]
    n = Y.shape[0]
    dt = solution.dt
    cum = np.zeros((n, Y.shape[1]))
    for j in range(Y.shape[1] - 1):
        cum[:, j + 1] = cum[:, j] + spec.alpha_bar_at(nodes[j], X[:, j], shape=(n,)) * dt
    a_star = np.max(np.maximum(-Y, 0.0) + cum, axis=1)
    yp_star = np.max(np.maximum(Y, 0.0), axis=1)
    with np.errstate(over="ignore"):
        ea = np.exp(p * a_star)
        ey = np.exp(epsilon * yp_star)
    ma, sa = mean_and_stderr(ea)
    my, sy = mean_and_stderr(ey)
    return MomentReport(p, epsilon, ma, sa, tail_dominated(ea), my, sy, tail_dominated(ey))


# --------------------------------------------------------------------------
# concatenated sub-interval solve


@dataclass
class PartitionedSolve:
    n_intervals: int
    y0: float
    y0_stderr: float
    boundary_nodes: list
    pieces: list


def solve_partitioned(spec, terminal, sde, x0, grid, n_intervals, paths, seed, basis=None,
                      opts=None, threads=1):
    """Solve on ``[t_i, t_{i+1}]`` from the last interval backwards.

    Each interval uses its own bundle (seed ``seed + i``); its terminal value is
    the regression value function of the later interval evaluated at the new
    states, so the pieces only share the fitted functions.
    """
    if grid.steps % n_intervals:
        raise ValidationError(f"{grid.steps} steps cannot be split into {n_intervals} intervals")
    width = grid.steps // n_intervals
    basis = basis or PolynomialBasis()
    opts = opts or SolverOptions()
    nodes = grid.nodes
    value_next = None
    pieces = []
    for i in range(n_intervals - 1, -1, -1):
        a, b = i * width, (i + 1) * width
        bundle = simulate_forward(sde, 0.0, x0, grid, paths, seed + i, threads=threads)
        xb = bundle.X[:, b]
        xi = terminal(xb) if value_next is None else value_next(xb)
        out = _sweep(spec, xi, bundle.X[:, a:b + 1], bundle.dW[:, a:b], nodes[a:b + 1], basis, opts)
        piece = BSDESolution(spec=spec, nodes=nodes[a:b + 1], X=bundle.X[:, a:b + 1],
                             dW=bundle.dW[:, a:b], options=opts.as_dict(), **out)
        pieces.insert(0, piece)
        if i > 0:
            value_next = piece.value_function(0)
    first = pieces[0]
    return PartitionedSolve(n_intervals, first.y0, first.y0_stderr,
                            [float(nodes[i * width]) for i in range(n_intervals + 1)], pieces)
