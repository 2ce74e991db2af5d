"""Shared test routines used by both the module tests and the acceptance suite."""

import numpy as np

from qbsde.fenchel import DualGeneratorView, fenchel_young_gap, subdifferential_select
from qbsde.generator import affine_in_y, entropic_linear_y, pure_quadratic

BUILTIN_FAMILIES = {
    "pure-quadratic": pure_quadratic(1.5),
    "entropic-with-linear-y": entropic_linear_y(0.8, 0.6, 0.3),
    "affine-in-y": affine_in_y(0.7, [0.4], -0.2),
}


def fenchel_suite(spec, draws=10_000, seed=0):
    """Worst-case slacks of the conjugate invariants over random draws.

    Returns a dict of the most negative gap, the largest gap at the selected
    subgradient, and the worst violations of the coercive bound and of the
    Lipschitz-in-y bound, all over the finite samples.
    """
    view = DualGeneratorView(spec)
    rng = np.random.default_rng(seed)
    d = spec.dim
    t = rng.uniform(0.0, 1.0, draws)
    y = rng.uniform(-5.0, 5.0, draws)
    y2 = rng.uniform(-5.0, 5.0, draws)
    z = rng.uniform(-5.0, 5.0, (draws, d))
    q = rng.uniform(-5.0, 5.0, (draws, d))
    if spec.kind == "affine-in-y":
        # the effective domain is the single slope b; draw half the q's there
        q[::2] = np.asarray(spec.params["b"])

    min_gap = np.inf
    max_equality_gap = 0.0
    coercive = 0.0
    lipschitz = 0.0
    finite = 0
    for i in range(draws):
        f1 = view.conjugate(t[i], None, y[i], q[i])
        if np.isfinite(f1):
            finite += 1
            min_gap = min(min_gap, fenchel_young_gap(view, t[i], None, y[i], z[i], q[i]))
            lower = -float(spec.alpha_bar_at(t[i])) - spec.beta_bar * abs(y[i]) + q[i] @ q[i] / (2 * spec.gamma_bar)
            coercive = max(coercive, lower - float(f1))
            f2 = view.conjugate(t[i], None, y2[i], q[i])
            lipschitz = max(lipschitz, abs(float(f1) - float(f2)) - spec.K_gy * abs(y[i] - y2[i]))
        qs = subdifferential_select(view, t[i], None, y[i], z[i])
        max_equality_gap = max(max_equality_gap, abs(fenchel_young_gap(view, t[i], None, y[i], z[i], qs)))
    return {
        "finite": finite,
        "min_gap": float(min_gap),
        "equality_gap": float(max_equality_gap),
        "coercive_violation": float(coercive),
        "lipschitz_violation": float(lipschitz),
    }


def fenchel_suite_passes(res):
    return (res["finite"] > 0 and res["min_gap"] >= -1e-9 and res["equality_gap"] <= 1e-6
            and res["coercive_violation"] <= 1e-6 and res["lipschitz_violation"] <= 1e-6)
