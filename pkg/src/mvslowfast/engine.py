"""Two-timescale Euler-Maruyama integrator for the coupled particle system.

Each macro step of size ``dt`` freezes the slow empirical law, advances the two
fast clouds (started at xi-samples and at the fixed point y0) through
``substeps`` micro steps driven by one shared set of fast increments, and then
moves the slow cloud with one Euler step.  The slow drift is the average of
``h1`` over the micro steps, i.e. a left-point quadrature of the fast path
inside the macro step (see ``SimConfig.average_drift``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, NonFiniteError, StiffnessError
from .measure import EmpiricalMeasure
from .model import ModelSpec
from .streams import ReplicaStreams

# default fast-time micro step, in units of 1/fast_rate
DEFAULT_FAST_STEP = 0.1
# refuse micro steps whose fast-time size exceeds this multiple of 1/fast_rate
CFL_LIMIT = 1.0


@dataclass(frozen=True)
class SimConfig:
    epsilon: float
    dt: float = 2.0**-6
    n_particles: int = 1000
    horizon: float = 1.0
    seed: int = 0
    substeps: int | None = None
    replicas: int = 1
    fast_step: float | None = None
    average_drift: bool = True

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.n_particles < 2:
            raise ConfigError("need at least 2 particles")
        if self.horizon < 0:
            raise ConfigError("horizon must be nonnegative")
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        if self.substeps is not None and self.substeps < 1:
            raise ConfigError("substeps must be >= 1")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError("horizon must be an integer multiple of dt")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def fast_step_for(self, model: ModelSpec) -> float:
        """Fast-time micro step size ``h_f`` (in units where the fast drift is O(1))."""
        if self.fast_step is not None:
            return float(self.fast_step)
        return DEFAULT_FAST_STEP / model.fast_rate

    def substeps_for(self, model: ModelSpec) -> int:
        if self.substeps is not None:
            return int(self.substeps)
        return max(1, math.ceil(self.dt / (self.epsilon * self.fast_step_for(model)) - 1e-9))

    def with_epsilon(self, epsilon: float) -> "SimConfig":
        return replace(self, epsilon=epsilon)


def check_cfl(model: ModelSpec, cfg: SimConfig) -> float:
    """Return the fast-time micro step; raise if it is unstable."""
    h_fast = cfg.dt / (cfg.epsilon * cfg.substeps_for(model))
    if h_fast * model.fast_rate > CFL_LIMIT:
        raise StiffnessError(
            f"fast-time micro step {h_fast:.3g} exceeds {CFL_LIMIT}/fast_rate; "
            "increase substeps or decrease dt")
    return h_fast


# --------------------------------------------------------------------------
# initial conditions


def gaussian_sampler(mean=0.0, std=1.0, dim=1):
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (dim,))
    std = np.broadcast_to(np.asarray(std, dtype=float), (dim,))

    def sample(rng, n):
        return mean + std * rng.standard_normal((n, dim))

    return sample


def constant_sampler(value=0.0, dim=1):
    value = np.broadcast_to(np.asarray(value, dtype=float), (dim,))

    def sample(rng, n):
        return np.tile(value, (n, 1))

    return sample


def sampler_from_dict(spec, dim) -> Callable:
    """``{"kind": "gaussian", "mean": .., "std": ..}`` or ``{"kind": "constant", "value": ..}``."""
    if isinstance(spec, (int, float)):
        return constant_sampler(spec, dim)
    spec = dict(spec)
    kind = spec.pop("kind", "gaussian")
    if kind == "gaussian":
        return gaussian_sampler(spec.pop("mean", 0.0), spec.pop("std", 1.0), dim)
    if kind == "constant":
        return constant_sampler(spec.pop("value", 0.0), dim)
    raise ConfigError(f"unknown sampler kind {kind!r}")


@dataclass
class InitialCondition:
    """Laws of the slow start ``rho`` and fast start ``xi`` plus the fixed point ``y0``."""

    rho: Callable
    xi: Callable
    y0: np.ndarray

    @classmethod
    def default(cls, model: ModelSpec) -> "InitialCondition":
        return cls(gaussian_sampler(0.0, 1.0, model.n), gaussian_sampler(0.0, 1.0, model.m),
                   np.zeros(model.m))

    @classmethod
    def from_dict(cls, model: ModelSpec, spec: dict | None) -> "InitialCondition":
        spec = dict(spec or {})
        rho = sampler_from_dict(spec.pop("rho", {"kind": "gaussian"}), model.n)
        xi = sampler_from_dict(spec.pop("xi", {"kind": "gaussian"}), model.m)
        y0 = np.broadcast_to(np.asarray(spec.pop("y0", 0.0), dtype=float), (model.m,)).copy()
        if spec:
            raise ConfigError(f"unknown initial-condition keys: {sorted(spec)}")
        return cls(rho, xi, y0)

    def draw(self, model: ModelSpec, n: int, streams: ReplicaStreams):
        X = np.asarray(self.rho(streams.rho, n), dtype=float).reshape(n, model.n)
        Yxi = np.asarray(self.xi(streams.xi, n), dtype=float).reshape(n, model.m)
        Yy0 = np.tile(np.asarray(self.y0, dtype=float).reshape(model.m), (n, 1))
        for name, arr in (("rho", X), ("xi", Yxi), ("y0", Yy0)):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"initial {name} sample is not finite", term=name)
        return X, Yxi, Yy0


# --------------------------------------------------------------------------
# state containers


@dataclass
class ParticleCloud:
    X: np.ndarray
    Yxi: np.ndarray
    Yy0: np.ndarray
    time: float = 0.0

    def copy(self) -> "ParticleCloud":
        return ParticleCloud(self.X.copy(), self.Yxi.copy(), self.Yy0.copy(), self.time)


@dataclass
class PathBundle:
    """Trajectories on the macro grid.

    ``X`` has shape ``(K+1, N, n)``; ``Yxi``/``Yy0`` are ``(K+1, N, m)`` or None when
    fast storage was switched off; ``dB`` holds the ``K`` slow increments
    ``(K, N, d1)``.  ``micro`` optionally stores per-macro-step averages of an
    observer evaluated on every micro step.
    """

    t: np.ndarray
    X: np.ndarray
    dB: np.ndarray
    Yxi: np.ndarray | None = None
    Yy0: np.ndarray | None = None
    micro: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.t.ndim != 1 or np.any(np.diff(self.t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        if self.dB.shape[0] != len(self.t) - 1 or self.X.shape[0] != len(self.t):
            raise ValueError("increment count does not match the time grid")

    @property
    def n_particles(self) -> int:
        return self.X.shape[1]

    def to_csv(self, path, replica: int = 0, append: bool = False) -> None:
        """Long-format CSV: replica, particle, t, X..., Yxi..., Yy0..."""
        K1, N, n = self.X.shape
        cols = [np.full(K1 * N, replica), np.tile(np.arange(N), K1), np.repeat(self.t, N)]
        header = ["replica", "particle", "t"] + [f"X{j}" for j in range(n)]
        blocks = [self.X.reshape(K1 * N, -1)]
        for name, arr in (("Yxi", self.Yxi), ("Yy0", self.Yy0)):
            if arr is not None:
                blocks.append(arr.reshape(K1 * N, -1))
                header += [f"{name}{j}" for j in range(arr.shape[2])]
        data = np.column_stack(cols + blocks)
        fmt = ["%d", "%d"] + ["%.17g"] * (data.shape[1] - 2)
        with open(path, "a" if append else "w") as fh:
            np.savetxt(fh, data, delimiter=",", fmt=fmt,
                       header="" if append else ",".join(header), comments="")

    def save_npz(self, path) -> None:
        arrays = {"t": self.t, "X": self.X, "dB": self.dB}
        for name in ("Yxi", "Yy0", "micro"):
            if getattr(self, name) is not None:
                arrays[name] = getattr(self, name)
        np.savez_compressed(path, meta=np.array(repr(self.meta)), **arrays)

    @classmethod
    def load_npz(cls, path) -> "PathBundle":
        import ast

        with np.load(Path(path), allow_pickle=False) as z:
            kw = {k: z[k] for k in z.files if k != "meta"}
            meta = ast.literal_eval(str(z["meta"])) if "meta" in z.files else {}
        return cls(meta=meta, **kw)


# --------------------------------------------------------------------------
# stepping


def _diffuse(g, dW):
    # (B, k, d) x (B, d) -> (B, k)
    return np.einsum("bkd,bd->bk", g, dW)


def _locate_bad(arr):
    bad = np.argwhere(~np.isfinite(arr))
    return int(bad[0, 0]) if len(bad) else None


def _fast_substeps(model, mu, X, Y, n, eps, delta, S, w_rng, hook=None):
    """Advance the stacked fast state ``Y = [Yxi; Yy0]`` through ``S`` micro steps.

    Returns the new stacked state and the micro-average of ``h1`` evaluated at
    the y0-cloud (left points).  ``hook(j, Yxi, Yy0, nu)`` sees every micro state.
    """
    drift = np.zeros_like(X)
    sq = math.sqrt(delta)
    for j in range(S):
        Yxi, Yy0 = Y[:n], Y[n:]
        nu = EmpiricalMeasure.from_cloud(Yxi)
        drift += model.h1(X, mu, Yy0, nu)
        if hook is not None:
            hook(j, Yxi, Yy0, nu)
        dW = w_rng.standard_normal((n, model.d2)) * sq
        h2v = model.h2(mu, Y, nu)
        g2 = model.gamma2(mu, Y, nu)
        Y = Y + h2v * (delta / eps) + _diffuse(g2, np.concatenate([dW, dW])) / math.sqrt(eps)
        if not np.all(np.isfinite(Y)):
            i = _locate_bad(Y)
            term = "h2" if not np.all(np.isfinite(h2v)) else "gamma2"
            raise NonFiniteError(f"fast state of particle {i % n} not finite ({term})",
                                 index=i % n, term=term)
    return Y, drift / S


def step(model: ModelSpec, cloud: ParticleCloud, cfg: SimConfig, streams: ReplicaStreams,
         dB: np.ndarray | None = None, observer: Callable | None = None):
    """Advance ``cloud`` by one macro step; returns ``(new_cloud, dB, observer_mean)``.

    ``dB`` may be supplied (to replay stored increments); otherwise it is drawn
    from the replica's ``B`` stream.  ``observer(X, mu, Yy0, nu)`` is evaluated on
    every micro step and its average is returned.
    """
    check_cfl(model, cfg)
    S = cfg.substeps_for(model)
    n = cloud.X.shape[0]
    eps, dt = cfg.epsilon, cfg.dt
    X = cloud.X
    mu = EmpiricalMeasure.from_cloud(X)
    if dB is None:
        dB = streams.B.standard_normal((n, model.d1)) * math.sqrt(dt)

    acc = []

    def hook(j, Yxi, Yy0, nu):
        acc.append(np.asarray(observer(X, mu, Yy0, nu), dtype=float))

    Y0 = np.concatenate([cloud.Yxi, cloud.Yy0])
    if cfg.average_drift:
        Y, drift = _fast_substeps(model, mu, X, Y0, n, eps, dt / S, S, streams.W,
                                  hook if observer else None)
    else:
        Y, _ = _fast_substeps(model, mu, X, Y0, n, eps, dt / S, S, streams.W,
                              hook if observer else None)
        drift = model.h1(X, mu, Y[n:], EmpiricalMeasure.from_cloud(Y[:n]))
    g1 = model.gamma1(X, mu)
    X_new = X + drift * dt + _diffuse(g1, dB)
    if not np.all(np.isfinite(X_new)):
        i = _locate_bad(X_new)
        term = "h1" if not np.all(np.isfinite(drift)) else "gamma1"
        raise NonFiniteError(f"slow state of particle {i} not finite ({term})", index=i, term=term)
    obs = np.mean(acc, axis=0) if observer else None
    return ParticleCloud(X_new, Y[:n], Y[n:], cloud.time + dt), dB, obs


def simulate_system(model: ModelSpec, cfg: SimConfig, initial: InitialCondition | None = None,
                    replica: int = 0, store_fast: bool = True,
                    observer: Callable | None = None) -> PathBundle:
    """Simulate one replica of the coupled system over ``[0, horizon]``."""
    initial = initial or InitialCondition.default(model)
    streams = ReplicaStreams(cfg.seed, replica)
    check_cfl(model, cfg)
    N, K = cfg.n_particles, cfg.n_steps
    X, Yxi, Yy0 = initial.draw(model, N, streams)
    # draw the whole slow noise up front so it is shared across epsilon
    dB_all = streams.B.standard_normal((K, N, model.d1)) * math.sqrt(cfg.dt)
    cloud = ParticleCloud(X, Yxi, Yy0)
    Xs = np.empty((K + 1, N, model.n))
    Xs[0] = X
    Yxs = Yys = None
    if store_fast:
        Yxs = np.empty((K + 1, N, model.m))
        Yys = np.empty((K + 1, N, model.m))
        Yxs[0], Yys[0] = Yxi, Yy0
    micro = []
    for k in range(K):
        cloud, _, obs = step(model, cloud, cfg, streams, dB=dB_all[k], observer=observer)
        Xs[k + 1] = cloud.X
        if store_fast:
            Yxs[k + 1], Yys[k + 1] = cloud.Yxi, cloud.Yy0
        if observer:
            micro.append(obs)
    t = cfg.dt * np.arange(K + 1)
    meta = dict(epsilon=cfg.epsilon, dt=cfg.dt, seed=cfg.seed, replica=replica,
                substeps=cfg.substeps_for(model), model=model.name)
    return PathBundle(t=t, X=Xs, dB=dB_all, Yxi=Yxs, Yy0=Yys,
                      micro=np.array(micro) if observer else None, meta=meta)


def averaged_euler(model: ModelSpec, hbar: Callable, X0: np.ndarray, dB: np.ndarray,
                   dt: float) -> np.ndarray:
    """Mean-field Euler for the averaged equation replaying increments ``dB``.

    ``hbar(x (N, n), mu)`` returns ``(N, n)``.  Returns ``(K+1, N, n)``.
    """
    K = dB.shape[0]
    Xs = np.empty((K + 1,) + X0.shape)
    Xs[0] = X = np.array(X0, dtype=float)
    for k in range(K):
        mu = EmpiricalMeasure.from_cloud(X)
        X = X + np.asarray(hbar(X, mu)) * dt + _diffuse(model.gamma1(X, mu), dB[k])
        if not np.all(np.isfinite(X)):
            raise NonFiniteError("averaged state not finite", index=_locate_bad(X), term="hbar")
        Xs[k + 1] = X
    return Xs


def simulate_coupled_averaged(model: ModelSpec, cfg: SimConfig, hbar: Callable,
                              initial: InitialCondition | None = None, replica: int = 0,
                              store_fast: bool = False):
    """Return ``(bundle for X^eps, bundle for Xbar)`` sharing B and the slow start."""
    eps_bundle = simulate_system(model, cfg, initial, replica, store_fast=store_fast)
    Xbar = averaged_euler(model, hbar, eps_bundle.X[0], eps_bundle.dB, cfg.dt)
    bar_bundle = PathBundle(t=eps_bundle.t.copy(), X=Xbar, dB=eps_bundle.dB,
                            meta=dict(eps_bundle.meta, averaged=True))
    return eps_bundle, bar_bundle
