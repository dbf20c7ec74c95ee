"""Empirical probability measures on R^d.

An :class:`EmpiricalMeasure` is a weighted atom cloud standing in for a law in
P_2(R^d).  The module provides integration, the quadratic Wasserstein distance
(exact in one dimension, exact assignment for tiny clouds otherwise) and
finite-difference estimators of the Lions (L-)derivative.
"""

from __future__ import annotations

from functools import cached_property
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import NonFiniteError

_WEIGHT_TOL = 1e-12
_MAX_EXACT_ATOMS = 10


class EmpiricalMeasure:
    """Weighted atoms ``atoms[i]`` with probabilities ``weights[i]``.

    Instances are treated as immutable; the arrays are copied and flagged
    read-only at construction so they can be shared between workers.
    """

    def __init__(self, atoms, weights=None):
        atoms = np.array(atoms, dtype=float)
        if atoms.ndim == 0:
            atoms = atoms.reshape(1, 1)
        elif atoms.ndim == 1:
            atoms = atoms.reshape(-1, 1)
        if atoms.ndim != 2 or atoms.shape[0] == 0:
            raise ValueError("an empirical measure needs at least one atom")
        if not np.all(np.isfinite(atoms)):
            bad = int(np.argwhere(~np.isfinite(atoms))[0, 0])
            raise NonFiniteError(f"atom {bad} is not finite", index=bad)
        if weights is None:
            self.uniform = True
            w = np.full(atoms.shape[0], 1.0 / atoms.shape[0])
        else:
            w = np.array(weights, dtype=float).reshape(-1)
            if w.shape[0] != atoms.shape[0]:
                raise ValueError("weights and atoms differ in length")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and nonnegative")
            if abs(w.sum() - 1.0) > _WEIGHT_TOL:
                raise ValueError(f"weights sum to {w.sum():.15g}, not 1")
            self.uniform = bool(np.all(w == w[0]))
        atoms.setflags(write=False)
        w.setflags(write=False)
        self.atoms = atoms
        self.weights = w

    @classmethod
    def from_cloud(cls, atoms: np.ndarray) -> "EmpiricalMeasure":
        """Uniform measure on a freshly computed ``(N, d)`` array, no copy or checks.

        Used on the simulation hot path where the caller owns ``atoms`` and has
        already checked finiteness.
        """
        obj = cls.__new__(cls)
        atoms = np.asarray(atoms, dtype=float)
        obj.atoms = atoms
        obj.weights = np.full(atoms.shape[0], 1.0 / atoms.shape[0])
        obj.uniform = True
        return obj

    @classmethod
    def dirac(cls, point) -> "EmpiricalMeasure":
        return cls(np.atleast_1d(np.asarray(point, dtype=float))[None, :])

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @cached_property
    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    @cached_property
    def second_moment(self) -> float:
        return float(self.weights @ np.sum(self.atoms**2, axis=1))

    def moment(self, k: int) -> np.ndarray:
        return self.weights @ self.atoms**k

    def expect(self, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Unchecked ``sum_i w_i f(atom_i)`` for vectorised ``f``; hot path."""
        return self.weights @ f(self.atoms)

    def fingerprint(self, decimals: int = 6) -> tuple:
        """Cheap cache key: atom count and first four moments, rounded."""
        moments = np.concatenate([self.moment(k) for k in (1, 2, 3, 4)])
        return (self.n_atoms, self.dim) + tuple(np.round(moments, decimals).tolist())

    def shifted(self, displacement) -> "EmpiricalMeasure":
        """Push-forward under ``x -> x + displacement(x)`` given per atom."""
        return EmpiricalMeasure(self.atoms + np.asarray(displacement, dtype=float),
                                None if self.uniform else self.weights)

    def resample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` atoms (exact copies when uniform and ``n == n_atoms``)."""
        if self.uniform and n == self.n_atoms:
            return np.array(self.atoms)
        idx = rng.choice(self.n_atoms, size=n, p=self.weights)
        return self.atoms[idx]

    def __repr__(self):
        return f"EmpiricalMeasure(n_atoms={self.n_atoms}, dim={self.dim})"


def as_measure(obj) -> EmpiricalMeasure:
    return obj if isinstance(obj, EmpiricalMeasure) else EmpiricalMeasure(obj)


def integrate(mu: EmpiricalMeasure, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Return ``sum_i w_i f(atom_i)``.

    ``f`` receives the ``(N, d)`` atom array and returns ``(N,)`` or ``(N, k)``.
    A non-finite value raises :class:`NonFiniteError` carrying the atom.
    """
    values = np.asarray(f(mu.atoms), dtype=float)
    if values.shape[0] != mu.n_atoms:
        raise ValueError("integrand must return one value per atom")
    finite = np.isfinite(values).reshape(mu.n_atoms, -1).all(axis=1)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise NonFiniteError(f"integrand not finite at atom {mu.atoms[bad]}",
                             index=bad, atom=mu.atoms[bad].copy())
    out = np.tensordot(mu.weights, values, axes=(0, 0))
    return out


def _w2_squared_1d(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    ia = np.argsort(a.atoms[:, 0], kind="stable")
    ib = np.argsort(b.atoms[:, 0], kind="stable")
    xa, wa = a.atoms[ia, 0], a.weights[ia]
    xb, wb = b.atoms[ib, 0], b.weights[ib]
    if a.uniform and b.uniform and a.n_atoms == b.n_atoms:
        return float(np.mean((xa - xb) ** 2))
    ca = np.cumsum(wa)
    cb = np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    levels = np.union1d(ca, cb)
    widths = np.diff(np.concatenate([[0.0], levels]))
    # quantile functions are left-continuous step functions
    qa = xa[np.minimum(np.searchsorted(ca, levels, side="left"), len(xa) - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, levels, side="left"), len(xb) - 1)]
    return float(np.sum(widths * (qa - qb) ** 2))


def wasserstein2(mu1: EmpiricalMeasure, mu2: EmpiricalMeasure) -> float:
    """Quadratic Wasserstein distance between two empirical measures.

    Exact for d = 1 (quantile coupling).  For d > 1 only uniform clouds with the
    same atom count (at most 10) are supported; the optimal coupling is then a
    permutation and is found by exact assignment.
    """
    mu1, mu2 = as_measure(mu1), as_measure(mu2)
    if mu1.dim != mu2.dim:
        raise ValueError(f"dimension mismatch: {mu1.dim} vs {mu2.dim}")
    if mu1.dim == 1:
        return float(np.sqrt(max(_w2_squared_1d(mu1, mu2), 0.0)))
    if not (mu1.uniform and mu2.uniform and mu1.n_atoms == mu2.n_atoms
            and mu1.n_atoms <= _MAX_EXACT_ATOMS):
        raise NotImplementedError(
            "W2 for d > 1 needs uniform clouds with equal atom count <= "
            f"{_MAX_EXACT_ATOMS}")
    cost = np.sum((mu1.atoms[:, None, :] - mu2.atoms[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def lions_derivative(f: Callable[[EmpiricalMeasure], float], mu: EmpiricalMeasure,
                     i: int, h: float | None = None) -> np.ndarray:
    """Finite-particle estimate of ``d_mu f(mu)(atom_i)``.

    Shifting atom ``i`` by ``t e_j`` changes ``f`` at rate ``w_i * d_mu f(atom_i)_j``;
    the central difference is therefore divided by the atom weight (``1/N`` for
    uniform clouds).  Default bump ``h = 1e-4 * (1 + |atom_i|)``.
    """
    mu = as_measure(mu)
    atom = mu.atoms[i]
    if h is None:
        h = 1e-4 * (1.0 + float(np.linalg.norm(atom)))
    if h <= 0:
        raise ValueError("bump size must be positive")
    weights = None if mu.uniform else mu.weights
    grad = np.empty(mu.dim)
    for j in range(mu.dim):
        plus = np.array(mu.atoms)
        minus = np.array(mu.atoms)
        plus[i, j] += h
        minus[i, j] -= h
        diff = (np.asarray(f(EmpiricalMeasure(plus, weights)), dtype=float)
                - np.asarray(f(EmpiricalMeasure(minus, weights)), dtype=float))
        grad[j] = float(diff) / (2.0 * h * mu.weights[i])
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite Lions difference quotient", index=i)
    return grad


def directional_derivative(f: Callable[[EmpiricalMeasure], np.ndarray], mu: EmpiricalMeasure,
                           direction, s: float | None = None) -> np.ndarray:
    """Derivative of ``f`` along the push-forward ``mu o (I + t*direction)^-1`` at t=0.

    Equals ``sum_j w_j d_mu f(mu)(atom_j) . direction_j``, i.e. the cloud average of
    the Lions derivative against a per-atom vector field, at the cost of two
    evaluations of ``f``.  ``s`` defaults to a bump moving the cloud by 1e-4 in
    root-mean-square.
    """
    mu = as_measure(mu)
    direction = np.asarray(direction, dtype=float).reshape(mu.atoms.shape)
    rms = float(np.sqrt(mu.weights @ np.sum(direction**2, axis=1)))
    if rms == 0.0:
        return np.zeros_like(np.asarray(f(mu), dtype=float))
    if s is None:
        s = 1e-4 * (1.0 + float(np.sqrt(mu.second_moment))) / rms
    fp = np.asarray(f(mu.shifted(s * direction)), dtype=float)
    fm = np.asarray(f(mu.shifted(-s * direction)), dtype=float)
    out = (fp - fm) / (2.0 * s)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite directional difference quotient")
    return out
