"""Averaged equation, deviation process and the linear fluctuation limit.

The limit ``U`` of the rescaled deviation ``(X^eps - Xbar)/sqrt(eps)`` solves a
linear McKean-Vlasov SDE driven by the slow noise ``B`` of ``Xbar`` and an
independent noise ``V`` with diffusion ``Upsilon``.  Copy expectations such as
``E~[d_mu hbar(x, mu)(Xbar~) U~]`` are realised as cloud averages; a cloud
average of the Lions derivative against a per-particle vector field is a
directional derivative along the push-forward ``mu o (I + s U)^-1``, which costs
two evaluations of the coefficient per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .engine import InitialCondition, PathBundle, SimConfig, averaged_euler
from .errors import NonFiniteError
from .frozen import AveragedDrift
from .measure import EmpiricalMeasure, directional_derivative, lions_derivative
from .model import ModelSpec
from .poisson import estimate_upsilon
from .streams import ReplicaStreams


def simulate_averaged(model: ModelSpec, cfg: SimConfig, hbar: Callable,
                      initial: InitialCondition | None = None, stored=None,
                      replica: int = 0) -> PathBundle:
    """Mean-field Euler for the averaged equation.

    ``stored`` (a :class:`PathBundle`) supplies the slow increments and start to
    replay; otherwise they are drawn from the replica streams exactly as the
    coupled engine draws them, so the two runs share ``B`` and ``rho``.
    """
    if stored is not None:
        X0, dB = stored.X[0], stored.dB
        if dB.shape[0] != cfg.n_steps:
            raise ValueError("stored increments do not match the macro grid")
    else:
        initial = initial or InitialCondition.default(model)
        streams = ReplicaStreams(cfg.seed, replica)
        X0, _, _ = initial.draw(model, cfg.n_particles, streams)
        dB = streams.B.standard_normal((cfg.n_steps, cfg.n_particles, model.d1)) * math.sqrt(cfg.dt)
    Xs = averaged_euler(model, hbar, X0, dB, cfg.dt)
    return PathBundle(t=cfg.dt * np.arange(cfg.n_steps + 1), X=Xs, dB=dB,
                      meta=dict(seed=cfg.seed, replica=replica, dt=cfg.dt, averaged=True))


@dataclass
class DeviationPaths:
    t: np.ndarray
    U: np.ndarray
    epsilon: float

    def __post_init__(self):
        if np.any(self.U[0] != 0):
            raise ValueError("deviation must start at zero")


def deviation_paths(coupled, epsilon: float) -> DeviationPaths:
    """``(X^eps - Xbar) / sqrt(eps)`` from a coupled pair of bundles."""
    xe, xb = coupled
    if xe.X.shape != xb.X.shape or not np.array_equal(xe.t, xb.t):
        raise ValueError("bundles do not share a time grid")
    if not np.array_equal(xe.X[0], xb.X[0]):
        raise ValueError("bundles do not share initial samples")
    U = (xe.X - xb.X) / math.sqrt(epsilon)
    U[0] = 0.0
    return DeviationPaths(t=xe.t.copy(), U=U, epsilon=epsilon)


class UpsilonTable:
    """Fluctuation diffusion tabulated along a reference averaged path.

    At every ``every``-th macro step the diffusion is estimated on ``n_nodes``
    slow states spanning the cloud, and evaluated in between by piecewise-linear
    interpolation in ``x`` (n = 1) or at the cloud mean (n > 1).  Only arrays
    are kept, so a table can be shipped to worker processes.
    """

    def __init__(self, model: ModelSpec, hbar: AveragedDrift, xbar: PathBundle, every: int = 4,
                 n_nodes: int = 5, **upsilon_opts):
        self.every = max(1, int(every))
        self.times, self.nodes, self.values = [], [], []
        opts = dict(upsilon_opts)
        for k in range(0, xbar.X.shape[0] - 1, self.every):
            X = xbar.X[k]
            mu = EmpiricalMeasure.from_cloud(X)
            inv = hbar.invariant(mu)
            if model.n == 1 and n_nodes > 1:
                nodes = np.linspace(X.min(), X.max(), n_nodes).reshape(-1, 1)
            else:
                nodes = X.mean(axis=0, keepdims=True)
            vals = [estimate_upsilon(model, x, mu, inv, dt=hbar.fast_step, **opts).matrix
                    for x in nodes]
            self.times.append(k)
            self.nodes.append(nodes)
            self.values.append(np.array(vals))

    def __call__(self, k: int, X: np.ndarray) -> np.ndarray:
        i = min(k // self.every, len(self.times) - 1)
        nodes, vals = self.nodes[i], self.values[i]
        if nodes.shape[0] == 1:
            return np.broadcast_to(vals[0], (X.shape[0],) + vals[0].shape)
        return np.interp(X[:, 0], nodes[:, 0], vals[:, 0, 0])[:, None, None]


@dataclass
class LimitCoefficients:
    """Finite-difference coefficients of the fluctuation limit.

    ``dx_hbar(x, mu) -> (N, n, n)``, ``dmu_hbar(x, mu, j) -> (n, n)`` (Lions
    derivative at atom ``j`` for one point ``x``), ``dx_gamma1``/``dmu_gamma1``
    likewise with the noise axis flattened, and ``upsilon(k, x) -> (N, n, n)``.  The solver itself uses the
    directional forms ``drift``/``diffusion`` which contract against ``U``.
    """

    model: ModelSpec
    hbar: Callable
    upsilon: Callable
    fd_step: float = 1e-4
    extras: dict = field(default_factory=dict)

    def _dx(self, f, X, U):
        s = self.fd_step
        return (f(X + s * U) - f(X - s * U)) / (2 * s)

    def drift(self, X, mu, U):
        """``dx hbar(X) U + E~[d_mu hbar(X)(X~) U~]``, shape ``(N, n)``."""
        tx = self._dx(lambda Z: self.hbar(Z, mu), X, U)
        tm = directional_derivative(lambda nu: self.hbar(X, nu), mu, U)
        return tx + tm

    def diffusion(self, X, mu, U):
        """``dx gamma1(X) U + E~[d_mu gamma1(X)(X~) U~]``, shape ``(N, n, d1)``."""
        g = self.model.gamma1
        tx = self._dx(lambda Z: g(Z, mu), X, U)
        tm = directional_derivative(lambda nu: g(X, nu), mu, U)
        return tx + tm

    def dx_hbar(self, X, mu):
        n = self.model.n
        out = np.empty((X.shape[0], n, n))
        for j in range(n):
            e = np.zeros_like(X)
            e[:, j] = 1.0
            out[:, :, j] = self._dx(lambda Z: self.hbar(Z, mu), X, e)
        return out

    def _lions_rows(self, f, x, mu, j, h):
        x = np.asarray(x, dtype=float).reshape(1, self.model.n)
        k = np.asarray(f(x, mu)).size
        return np.array([lions_derivative(lambda nu, i=i: np.ravel(f(x, nu))[i], mu, j, h)
                         for i in range(k)])

    def dmu_hbar(self, x, mu, j, h=None):
        """Lions derivative of ``mu -> hbar(x, mu)`` at atom ``j``, shape ``(n, n)``."""
        return self._lions_rows(self.hbar, x, mu, j, h)

    def dx_gamma1(self, X, mu):
        n = self.model.n
        out = np.empty((X.shape[0], n, self.model.d1, n))
        for j in range(n):
            e = np.zeros_like(X)
            e[:, j] = 1.0
            out[..., j] = self._dx(lambda Z: self.model.gamma1(Z, mu), X, e)
        return out

    def dmu_gamma1(self, x, mu, j, h=None):
        """Lions derivative of ``mu -> gamma1(x, mu)`` at atom ``j``, shape ``(n*d1, n)``."""
        return self._lions_rows(self.model.gamma1, x, mu, j, h)


def build_limit_coefficients(model: ModelSpec, hbar: AveragedDrift, xbar: PathBundle | None = None,
                             upsilon: Callable | None = None, every: int = 4, n_nodes: int = 5,
                             **upsilon_opts) -> LimitCoefficients:
    """Coefficients from an averaged-drift cache; Upsilon tabulated along ``xbar``."""
    if upsilon is None:
        if xbar is None:
            raise ValueError("need a reference averaged path or an explicit upsilon")
        upsilon = UpsilonTable(model, hbar, xbar, every=every, n_nodes=n_nodes, **upsilon_opts)
    return LimitCoefficients(model=model, hbar=hbar, upsilon=upsilon)


def simulate_limit_U(model: ModelSpec, cfg: SimConfig, coeffs, xbar: PathBundle,
                     replica: int = 0) -> PathBundle:
    """Euler scheme for the linear limit equation along the stored averaged path.

    ``B`` increments are those stored in ``xbar``; ``V`` comes from its own
    stream.  ``coeffs`` needs ``drift``, ``diffusion`` and ``upsilon(k, X)``.
    """
    K, N = xbar.dB.shape[0], xbar.X.shape[1]
    n = model.n
    streams = ReplicaStreams(cfg.seed, replica)
    dV = streams.V.standard_normal((K, N, n)) * math.sqrt(cfg.dt)
    U = np.zeros((N, n))
    Us = np.empty((K + 1, N, n))
    Us[0] = U
    for k in range(K):
        X = xbar.X[k]
        mu = EmpiricalMeasure.from_cloud(X)
        a = coeffs.drift(X, mu, U)
        b = coeffs.diffusion(X, mu, U)
        ups = coeffs.upsilon(k, X)
        U = (U + a * cfg.dt + np.einsum("bnd,bd->bn", b, xbar.dB[k])
             + np.einsum("bnp,bp->bn", ups, dV[k]))
        if not np.all(np.isfinite(U)):
            raise NonFiniteError("limit process not finite", term="coefficients")
        Us[k + 1] = U
    return PathBundle(t=xbar.t.copy(), X=Us, dB=xbar.dB,
                      meta=dict(seed=cfg.seed, replica=replica, limit=True))
