"""Polynomial least-squares regression used for conditional expectations."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import RankDeficientError, ValidationError

__all__ = ["PolynomialBasis", "Projector", "RegressionModel"]


def _exponents(dim, degree):
    out = [e for e in itertools.product(range(degree + 1), repeat=dim) if sum(e) <= degree]
    out.sort(key=lambda e: (sum(e), tuple(-v for v in e)))
    return np.array(out, dtype=int).reshape(len(out), dim)


def _design(zs, exps):
    cols = np.ones((zs.shape[0], exps.shape[0]))
    for j in range(zs.shape[1]):
        powers = np.ones((zs.shape[0], exps[:, j].max() + 1))
        for p in range(1, powers.shape[1]):
            powers[:, p] = powers[:, p - 1] * zs[:, j]
        cols *= powers[:, exps[:, j]]
    return cols


@dataclass(frozen=True)
class RegressionModel:
    """A fitted polynomial, evaluable at new states."""

    mean: np.ndarray
    scale: np.ndarray
    live: np.ndarray
    exponents: np.ndarray
    coef: np.ndarray

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        zs = (x[:, self.live] - self.mean) / self.scale
        return _design(zs, self.exponents) @ self.coef


class Projector:
    """Weighted least-squares projection onto a fixed design.

    The normal matrix is factorised once so several targets can share it.
    """

    def __init__(self, basis, x, weights=None):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.ndim != 2:
            raise ValidationError("regressors must be a (paths, dim) array")
        n = x.shape[0]
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        live = scale > 1e-12 * (1.0 + np.abs(mean))
        self.mean = mean[live]
        self.scale = scale[live]
        self.live = live
        self.exponents = _exponents(int(live.sum()), basis.degree)
        self.design = _design((x[:, live] - self.mean) / self.scale, self.exponents)
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        aw = self.design if self.weights is None else self.design * self.weights[:, None]
        gram = aw.T @ self.design / n
        eig = np.linalg.eigvalsh(gram)
        if eig[0] <= basis.rank_tol * eig[-1]:
            raise RankDeficientError(
                f"regression design is rank-deficient (eigenvalue ratio {eig[0] / eig[-1]:.3g})"
            )
        ridge = basis.ridge * np.trace(gram) / gram.shape[0]
        self._factor = cho_factor(gram + ridge * np.eye(gram.shape[0]))
        self._aw = aw
        self._n = n

    def coefficients(self, target):
        return cho_solve(self._factor, self._aw.T @ target / self._n)

    def fit(self, target):
        """Return ``(fitted values, model)`` for a target of shape ``(n,)`` or ``(n, m)``."""
        coef = self.coefficients(target)
        model = RegressionModel(self.mean, self.scale, self.live, self.exponents, coef)
        return self.design @ coef, model


@dataclass(frozen=True)
class PolynomialBasis:
    """Monomials of total degree ``<= degree`` in standardised coordinates.

    Coordinates with zero sample spread are dropped, so a deterministic state
    reduces the fit to a (weighted) sample mean.
    """

    degree: int = 4
    ridge: float = 1e-10
    rank_tol: float = 1e-13

    def __post_init__(self):
        if self.degree < 1:
            raise ValidationError("basis degree must be >= 1")

    def projector(self, x, weights=None):
        return Projector(self, x, weights)
