"""Small Monte Carlo helpers used by several modules."""

from __future__ import annotations

import math

import numpy as np

# A sample mean is "dominated" when the top DOMINATION_FRACTION of paths
# carries more than DOMINATION_SHARE of the total mass (100x their fair share).
DOMINATION_FRACTION = 1e-3
DOMINATION_SHARE = 0.1


def mean_and_stderr(samples):
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    mean = float(samples.mean())
    if n < 2:
        return mean, float("inf")
    return mean, float(samples.std(ddof=1) / math.sqrt(n))


def tail_dominated(contributions, fraction=DOMINATION_FRACTION, share=DOMINATION_SHARE):
    """True when the top ``fraction`` of nonnegative contributions exceed ``share`` of the sum."""
    c = np.abs(np.asarray(contributions, dtype=float).ravel())
    total = c.sum()
    if not np.isfinite(total):
        return True
    if total == 0.0:
        return False
    k = max(1, math.ceil(fraction * c.size))
    top = np.partition(c, c.size - k)[c.size - k:].sum()
    return bool(top > share * total)


def effective_sample_size(weights):
    w = np.asarray(weights, dtype=float)
    s1 = w.sum()
    s2 = np.square(w).sum()
    if s2 == 0.0:
        return 0.0
    return float(s1 * s1 / s2)


def weighted_mean_and_stderr(values, weights):
    """Self-normalised weighted mean with its delta-method standard error."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    sw = w.sum()
    mean = float(np.dot(w, v) / sw)
    se = float(math.sqrt(np.dot(w * w, np.square(v - mean))) / sw)
    return mean, se
