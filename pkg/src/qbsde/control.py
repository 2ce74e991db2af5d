"""Stochastic-control side of the duality: controls, costs, gaps, admissibility.

A control ``q`` tilts the measure by the Girsanov density ``M``.  Its cost
``Y^q`` solves the linear backward equation

    Y^q_k = E^Q_k[Y^q_{k+1}] + f(t_k, X_k, Y^q_k, q_k) dt,

where ``f`` is the Legendre-Fenchel transform of the driver.  Every cost
dominates the BSDE solution ``Y`` and the subgradient feedback
``q* in d_z g(Y, Z)`` attains it.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional

import numpy as np
from scipy.stats import norm

from ._stats import effective_sample_size, mean_and_stderr, tail_dominated, weighted_mean_and_stderr
from .bsde import SolverOptions, _implicit_step
from .errors import InadmissibleControlError, ValidationError, WeightDegeneracyError
from .paths import TimeGrid, girsanov_weights, simulate_forward, step_ratio_residuals
from .regression import PolynomialBasis

__all__ = [
    "ControlProcess",
    "constant_control",
    "function_control",
    "feedback_control",
    "PartitionParams",
    "partition_count",
    "CostProcess",
    "evaluate_control",
    "optimal_control_from_solution",
    "GapReport",
    "duality_gap",
    "AdmissibilityReport",
    "admissibility_check",
    "IdentityReport",
    "relative_entropy_identity",
    "control_battery",
]


@dataclass(frozen=True, eq=False)
class ControlProcess:
    """Control values ``q_k`` per path and step, shape ``(paths, steps, d)``.

    ``kind`` is ``"constant"``, ``"function"`` (deterministic function of
    ``(t, x)``, kept in ``fn`` so it can be re-evaluated on other bundles) or
    ``"feedback"`` (a table aligned with one bundle).
    """

    kind: str
    values: np.ndarray
    bundle: object
    label: str = ""
    fn: Optional[Callable] = None

    def __post_init__(self):
        if self.values.shape != self.bundle.dW.shape:
            raise ValidationError(
                f"control shape {self.values.shape} does not match the bundle {self.bundle.dW.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("control values must be finite")

    def on(self, bundle):
        """The same control on another bundle (not available for feedback tables)."""
        if self.kind == "feedback":
            raise ValidationError("a feedback table is tied to its bundle")
        return function_control(self.fn, bundle, self.label, kind=self.kind)


def function_control(fn, bundle, label="", kind="function"):
    """Control ``q_k = fn(t_k, X_k)`` with ``fn`` mapping ``(n, x_dim)`` to ``(n, d)``."""
    n, steps, d = bundle.dW.shape
    vals = np.empty((n, steps, d))
    nodes = bundle.grid.nodes
    for k in range(steps):
        vals[:, k] = np.broadcast_to(np.asarray(fn(nodes[k], bundle.X[:, k]), dtype=float), (n, d))
    return ControlProcess(kind, vals, bundle, label, fn)


def constant_control(c, bundle, label=None):
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if c.shape != (bundle.w_dim,):
        raise ValidationError(f"constant control must have dimension {bundle.w_dim}")
    return function_control(lambda t, x: c, bundle, label or f"constant {c.tolist()}", kind="constant")


def feedback_control(values, bundle, label="feedback"):
    return ControlProcess("feedback", np.asarray(values, dtype=float), bundle, label)


# --------------------------------------------------------------------------
# partition of [0, T]


@dataclass(frozen=True)
class PartitionParams:
    p: float
    epsilon: float
    gamma_bar: float
    beta_bar: float
    horizon: float
    N: int
    step_bound: float

    @property
    def nodes(self):
        return tuple(i * self.horizon / self.N for i in range(self.N + 1))


def partition_count(p, epsilon, gamma_bar, beta_bar, horizon):
    """Smallest ``N >= 1`` with ``T/N < (1/gamma_bar - 1/p) / (beta_bar (1/p + 1/epsilon))``.

    The comparison is done in exact rational arithmetic on the float inputs.
    """
    if not p > gamma_bar:
        raise ValidationError(f"p={p} must exceed gamma_bar={gamma_bar}")
    if not epsilon > 0 or not horizon > 0 or not gamma_bar > 0 or beta_bar < 0:
        raise ValidationError("need epsilon > 0, horizon > 0, gamma_bar > 0, beta_bar >= 0")
    if beta_bar == 0:
        return PartitionParams(p, epsilon, gamma_bar, beta_bar, horizon, 1, math.inf)
    P, E, G, B, T = (Fraction(v) for v in (p, epsilon, gamma_bar, beta_bar, horizon))
    bound = (1 / G - 1 / P) / (B * (1 / P + 1 / E))
    N = max(1, math.floor(T / bound))
    while T / N >= bound:
        N += 1
    return PartitionParams(p, epsilon, gamma_bar, beta_bar, horizon, N, float(bound))


# --------------------------------------------------------------------------
# cost functional


@dataclass(eq=False)
class CostProcess:
    """Cost ``Y^q`` per path and node, with node-0 summaries.

    ``stderr`` is the standard error of the self-normalised direct estimator
    ``E^Q[xi + sum f dt]``; it upper-bounds the spread of the nested
    regression estimate ``y0`` in practice and is what comparisons use.
    """

    label: str
    values: np.ndarray
    y0: float
    stderr: float
    direct_y0: float
    ess: float
    f_values: np.ndarray

    def as_dict(self):
        return {
            "label": self.label,
            "y0": self.y0,
            "stderr": self.stderr,
            "direct_y0": self.direct_y0,
            "ess_fraction": self.ess / self.values.shape[0],
        }


def _conjugate_along(view, control, bundle, y=None):
    n, steps, _ = control.values.shape
    nodes = bundle.grid.nodes
    out = np.empty((n, steps))
    for k in range(steps):
        yk = np.zeros(n) if y is None else y[:, k]
        out[:, k] = view.conjugate(nodes[k], bundle.X[:, k], yk, control.values[:, k])
    return out


def evaluate_control(view, control, terminal, bundle, basis=None, opts=None, min_ess_fraction=0.01):
    """Cost process of ``control`` by Girsanov-weighted regression.

    Conditional expectations under the tilted measure are weighted
    least-squares fits under the reference measure, with the one-step density
    ratio ``M_{k+1}/M_k`` as weights.  The implicit ``y`` dependence of ``f``
    is resolved by fixed-point iteration.

    Raises
    ------
    InadmissibleControlError
        If ``f`` is infinite somewhere along the control.
    WeightDegeneracyError
        If the effective sample size of ``M_T`` falls under ``min_ess_fraction``.
    """
    basis = basis or PolynomialBasis()
    opts = opts or SolverOptions()
    if control.bundle is not bundle and control.values.shape != bundle.dW.shape:
        raise ValidationError("control is not aligned with the bundle")
    f0 = _conjugate_along(view, control, bundle)
    if not np.all(np.isfinite(f0)):
        k = int(np.argwhere(~np.isfinite(f0))[0][1])
        raise InadmissibleControlError(f"f is +inf along control {control.label!r} at step {k}")
    n, steps, _ = bundle.dW.shape
    k0 = bundle.k0
    M = girsanov_weights(control, bundle)
    mt = M[:, -1] / M[:, k0]
    ess = effective_sample_size(mt)
    if ess < min_ess_fraction * n:
        raise WeightDegeneracyError(
            f"effective sample size {ess:.1f} below {min_ess_fraction:.0%} of {n} paths for {control.label!r}"
        )
    nodes = bundle.grid.nodes
    dt = bundle.grid.dt
    xi = terminal(bundle.X[:, -1]) if callable(terminal) else np.asarray(terminal, dtype=float)
    spec = view.spec
    yq = np.empty((n, steps + 1))
    yq[:, -1] = xi
    fvals = f0.copy()
    for k in range(steps - 1, k0 - 1, -1):
        ratio = M[:, k + 1] / M[:, k]
        proj = basis.projector(bundle.X[:, k], weights=ratio)
        base, _ = proj.fit(yq[:, k + 1])
        qk = control.values[:, k]
        yq[:, k], _ = _implicit_step(view.conjugate, nodes[k], bundle.X[:, k], base, qk, dt, opts,
                                     spec.y_dependent, sign=1.0)
        if spec.y_dependent:
            fvals[:, k] = view.conjugate(nodes[k], bundle.X[:, k], yq[:, k], qk)
    if k0 > 0:
        yq[:, :k0] = yq[:, [k0]]
    direct = xi + fvals[:, k0:].sum(axis=1) * dt
    direct_y0, se = weighted_mean_and_stderr(direct, mt)
    return CostProcess(control.label, yq, float(np.mean(yq[:, k0])), se, direct_y0, ess, fvals)


def optimal_control_from_solution(view, solution, certify_per_step=4):
    """Feedback ``q*_k`` in the z-subdifferential at ``(t_k, X_k, Y_k, Z_k)``.

    A few points per step go through the subgradient-inequality certificate;
    a failure propagates as :class:`~qbsde.errors.SubgradientCertificateError`.
    """
    n, steps, d = solution.Z.shape
    q = np.empty((n, steps, d))
    idx = np.linspace(0, n - 1, certify_per_step).astype(int) if certify_per_step else []
    for k in range(steps):
        t = float(solution.nodes[k])
        q[:, k] = view.subgradient(t, solution.X[:, k], solution.Y[:, k], solution.Z[:, k])
        for i in idx:
            view.certify_subgradient(t, solution.X[i, k], float(solution.Y[i, k]), solution.Z[i, k], q[i, k])
    bundle = solution.bundle
    if bundle is None:
        raise ValidationError("solution carries no bundle")
    return feedback_control(q, bundle, label="optimal feedback")


# --------------------------------------------------------------------------
# duality gap


@dataclass
class GapReport:
    label: str
    mean: np.ndarray
    min: np.ndarray
    stderr: np.ndarray
    combined_stderr: np.ndarray
    node0_gap: float
    node0_combined_stderr: float
    comparison_holds: bool
    attained: bool
    tolerance: float

    def as_dict(self):
        return {
            "label": self.label,
            "node0_gap": self.node0_gap,
            "node0_combined_stderr": self.node0_combined_stderr,
            "min_node_mean": float(np.min(self.mean)),
            "worst_node_zscore": float(np.min(self.mean / np.maximum(self.combined_stderr, 1e-300))),
            "comparison_holds": self.comparison_holds,
            "attained": self.attained,
            "tolerance": self.tolerance,
        }


def duality_gap(solution, cost, tolerance=0.05, numeric_floor=1e-6):
    """Node statistics of ``Y^q - Y`` and the two verdicts.

    ``comparison_holds`` when every node mean is at least ``-3`` combined
    standard errors; ``attained`` when the node-0 gap is within ``tolerance``.
    Per-path minima are reported but not used in the verdict since
    individual regression values carry pointwise fitting error.
    ``numeric_floor * (1 + |Y|)`` is allowed on top of the sampling error so
    that deterministic problems (zero standard error) are judged against
    regression round-off rather than against exact equality.
    """
    if isinstance(cost, CostProcess):
        values, cost_se, label = cost.values, cost.stderr, cost.label
    else:
        values, cost_se, label = np.asarray(cost, dtype=float), 0.0, "array"
    if values.shape != solution.Y.shape:
        raise ValidationError("cost and solution grids are not aligned")
    k0 = solution.start_index
    gap = values[:, k0:] - solution.Y[:, k0:]
    n = gap.shape[0]
    mean = gap.mean(axis=0)
    se = gap.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(gap.shape[1])
    same = values is solution.Y or np.array_equal(values, solution.Y)
    base = 0.0 if same else solution.y0_stderr**2 + cost_se**2
    combined = np.sqrt(se**2 + base)
    floor = numeric_floor * (1.0 + np.abs(solution.Y[:, k0:].mean(axis=0)))
    comparison = bool(np.all(mean >= -3.0 * combined - floor))
    return GapReport(label, mean, gap.min(axis=0), se, combined, float(mean[0]), float(combined[0]),
                     comparison, bool(abs(mean[0]) <= tolerance), tolerance)


# --------------------------------------------------------------------------
# admissibility


@dataclass
class AdmissibilityReport:
    label: str
    admissible: bool
    reasons: list
    max_path_energy: float
    energy_refinement: Optional[list]
    mean_MT: float
    mean_MT_stderr: float
    martingale_ok: bool
    max_step_zscore: float
    integrability: float
    integrability_flag: bool
    q_energy: float
    q_energy_flag: bool

    def as_dict(self):
        return dict(self.__dict__)


def _energy(values, dt):
    return np.sum(values * values, axis=(1, 2)) * dt


# refined bundles depend only on the base bundle, so a battery of controls shares them
_REFINED = {}


def _refined_bundle(bundle, level):
    key = (id(bundle), level)
    hit = _REFINED.get(key)
    if hit is not None and hit[0]() is bundle:
        return hit[1]
    fine = TimeGrid(bundle.grid.horizon, bundle.grid.steps * 2**level)
    fb = simulate_forward(bundle.sde, bundle.t0, bundle.x0, fine, min(bundle.paths, 4096), bundle.seed)
    _REFINED[key] = (weakref.ref(bundle), fb)
    weakref.finalize(bundle, _REFINED.pop, key, None)
    return fb


def admissibility_check(view, control, terminal, bundle, refinements=2):
    """Discrete evidence for the admissibility conditions of ``control``.

    (a) per-path energy ``sum |q|^2 dt`` finite, and for function controls
    stable under grid doubling; (b) ``E[M_T]`` within 3 standard errors of 1
    and per-step density ratios with mean 1 (Bonferroni-adjusted over steps);
    (c) ``E^Q[|xi| + sum |f(0, q)| dt]`` finite; (d) ``E^Q[sum |q|^2 dt]``.
    Expectations dominated by under 0.1% of paths are flagged, not failed.
    """
    reasons = []
    dt = bundle.grid.dt
    n, steps, _ = bundle.dW.shape
    energy = _energy(control.values, dt)
    max_energy = float(np.max(energy))
    refinement = None
    if control.kind in ("function", "constant") and refinements > 0:
        levels = [mean_and_stderr(energy)]
        for r in range(1, refinements + 1):
            fb = _refined_bundle(bundle, r)
            levels.append(mean_and_stderr(_energy(control.on(fb).values, fb.grid.dt)))
        refinement = [m for m, _ in levels]
        (m0, _), (m1, s1), (m2, s2) = levels[-3:]
        d1, d2 = m1 - m0, m2 - m1
        # growth must be systematic: beyond sampling noise and not shrinking geometrically
        if d2 > 3.0 * math.hypot(s1, s2) and d2 > 1e-3 * (1.0 + abs(m2)) and d2 > 0.75 * d1:
            reasons.append("control energy grows without bound under grid refinement")
    if not math.isfinite(max_energy):
        reasons.append("infinite path energy")

    M = girsanov_weights(control, bundle)
    mt = M[:, -1]
    mean_mt, se_mt = mean_and_stderr(mt)
    z = step_ratio_residuals(M, bundle)
    threshold = norm.isf(0.0027 / (2 * z.size))
    max_z = float(np.max(np.abs(z)))
    martingale_ok = bool(abs(mean_mt - 1.0) <= 3.0 * se_mt + 1e-12 and max_z <= threshold)
    if not martingale_ok:
        reasons.append("density fails the martingale tests")

    f0 = _conjugate_along(view, control, bundle)
    xi = terminal(bundle.X[:, -1]) if callable(terminal) else np.asarray(terminal, dtype=float)
    if not np.all(np.isfinite(f0)):
        reasons.append("f(t, x, 0, q) is +inf along the control")
        integ = math.inf
        integ_flag = True
    else:
        contrib = mt * (np.abs(xi) + np.abs(f0).sum(axis=1) * dt)
        integ = float(np.mean(contrib))
        integ_flag = tail_dominated(contrib)
    qc = mt * energy
    return AdmissibilityReport(
        control.label, not reasons, reasons, max_energy, refinement, mean_mt, se_mt,
        martingale_ok, max_z, integ, integ_flag, float(np.mean(qc)), tail_dominated(qc),
    )


@dataclass(frozen=True)
class IdentityReport:
    lhs: float
    lhs_stderr: float
    rhs: float
    rhs_stderr: float
    difference: float
    combined_stderr: float

    @property
    def consistent(self):
        return abs(self.difference) <= 3.0 * self.combined_stderr + 1e-12

    def as_dict(self):
        d = dict(self.__dict__)
        d["consistent"] = self.consistent
        return d


def relative_entropy_identity(control, bundle):
    """Both sides of ``2 E[M_T log M_T] = E^Q[int |q|^2 ds]``."""
    M = girsanov_weights(control, bundle)
    mt = M[:, -1]
    lhs, lse = mean_and_stderr(2.0 * mt * np.log(mt))
    rhs, rse = mean_and_stderr(mt * _energy(control.values, bundle.grid.dt))
    return IdentityReport(lhs, lse, rhs, rse, lhs - rhs, math.hypot(lse, rse))


# --------------------------------------------------------------------------
# control battery


def control_battery(bundle, optimal=None, size=20, seed=0, constants=None):
    """Controls used to test the comparison direction of the duality.

    Constant vectors on a lattice, linear feedbacks ``a x + b`` with random
    coefficients, and smooth perturbations of ``optimal`` when given.
    """
    rng = np.random.default_rng(seed)
    d = bundle.w_dim
    dx = bundle.x_dim
    battery = []
    lattice = constants if constants is not None else [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5]
    for c in lattice:
        battery.append(constant_control(np.full(d, float(c)), bundle))
    n_pert = 0 if optimal is None else max(0, (size - len(battery)) // 2)
    n_lin = max(0, size - len(battery) - n_pert)
    for _ in range(n_lin):
        a = rng.uniform(-0.5, 0.5, (d, dx))
        b = rng.uniform(-1.0, 1.0, d)
        battery.append(function_control(lambda t, x, a=a, b=b: x @ a.T + b, bundle,
                                        f"linear a={np.round(a, 3).tolist()} b={np.round(b, 3).tolist()}"))
    nodes = bundle.grid.nodes
    for _ in range(n_pert):
        amp = rng.uniform(0.1, 0.5)
        freq = rng.uniform(0.5, 2.0, dx)
        phase = rng.uniform(0.0, 2 * math.pi)
        bump = np.stack([amp * np.sin(bundle.X[:, k] @ freq + phase + nodes[k]) for k in range(bundle.grid.steps)],
                        axis=1)
        battery.append(feedback_control(optimal.values + bump[:, :, None], bundle,
                                        f"optimal + {amp:.3f} sin(x.{np.round(freq, 3).tolist()} + {phase:.3f} + t)"))
    return battery
