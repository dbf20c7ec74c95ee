"""Frozen fast dynamics: invariant measure, averaged drift and mixing rate.

With the slow law ``mu`` held fixed the fast pair runs in fast time,

    dY = h2(mu, Y, law(Y^xi)) dt + gamma2(mu, Y, law(Y^xi)) dW,

and its stationary law ``eta^mu`` defines the averaged drift
``hbar(x, mu) = int h1(x, mu, y, eta^mu) eta^mu(dy)``; the measure slot of ``h1``
receives ``eta^mu`` itself.
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import NonFiniteError, NonStationaryError, NotContractingError
from .measure import EmpiricalMeasure
from .model import AssumptionReport, ModelSpec
from .streams import stream

# fast-time step used when none is given, in units of 1/fast_rate
DEFAULT_FROZEN_STEP = 0.02


@dataclass
class FrozenPaths:
    t: np.ndarray
    Yxi: np.ndarray
    Yy0: np.ndarray


@dataclass
class InvariantEstimate:
    eta: EmpiricalMeasure
    burn_in: float
    horizon: float
    thinning: float
    dt: float
    rate: float
    moments: dict = field(default_factory=dict)
    stderr: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.eta.n_atoms < 100:
            raise ValueError("invariant estimate needs at least 100 atoms")
        if not self.burn_in < self.horizon:
            raise ValueError("burn-in must be shorter than the horizon")


@dataclass
class MixingEstimate:
    rate: float
    stderr: float
    guaranteed: float | None
    t: np.ndarray
    gap: np.ndarray

    @property
    def dominates_guarantee(self) -> bool | None:
        if self.guaranteed is None:
            return None
        return bool(self.rate >= self.guaranteed)


def default_frozen_step(model: ModelSpec) -> float:
    return DEFAULT_FROZEN_STEP / model.fast_rate


def frozen_increment(model, mu, Y, n, h, dW):
    """One Euler step of the stacked fast state ``[Yxi; Yy0]`` with shared ``dW``."""
    nu = EmpiricalMeasure.from_cloud(Y[:n])
    dW2 = np.concatenate([dW, dW]) if Y.shape[0] == 2 * n else dW
    out = Y + model.h2(mu, Y, nu) * h + np.einsum("bkd,bd->bk", model.gamma2(mu, Y, nu), dW2)
    if not np.all(np.isfinite(out)):
        i = int(np.argwhere(~np.isfinite(out))[0, 0]) % n
        raise NonFiniteError(f"frozen fast state of particle {i} not finite", index=i, term="h2")
    return out


def simulate_frozen(model: ModelSpec, mu: EmpiricalMeasure, init=None, horizon: float = 10.0,
                    dt: float | None = None, seed: int = 0, n_particles: int = 1000,
                    record_every: int = 1, replica: int = 0) -> FrozenPaths:
    """Simulate the frozen pair with common noise; ``init = (xi_sampler, y0)``.

    Default start: ``xi ~ N(0, 1)`` and ``y0 = 0``.
    """
    dt = dt or default_frozen_step(model)
    n = n_particles
    if init is None:
        xi_s, y0 = None, np.zeros(model.m)
    else:
        xi_s, y0 = init
    rng = stream(seed, replica, "frozen")
    if xi_s is None:
        Yxi = rng.standard_normal((n, model.m))
    else:
        Yxi = np.asarray(xi_s(rng, n), dtype=float).reshape(n, model.m)
    Yy0 = np.tile(np.asarray(y0, dtype=float).reshape(model.m), (n, 1))
    Y = np.concatenate([Yxi, Yy0])
    K = int(math.ceil(horizon / dt - 1e-9))
    ts, xs, ys = [0.0], [Y[:n].copy()], [Y[n:].copy()]
    sq = math.sqrt(dt)
    for k in range(1, K + 1):
        Y = frozen_increment(model, mu, Y, n, dt, rng.standard_normal((n, model.d2)) * sq)
        if k % record_every == 0 or k == K:
            ts.append(k * dt)
            xs.append(Y[:n].copy())
            ys.append(Y[n:].copy())
    return FrozenPaths(np.array(ts), np.array(xs), np.array(ys))


def mixing_rate(model: ModelSpec, mu: EmpiricalMeasure, y0_a, y0_b, horizon: float | None = None,
                dt: float | None = None, n_particles: int = 64, seed: int = 0,
                probe: AssumptionReport | None = None) -> MixingEstimate:
    """Fit ``rho`` in ``E|Y^a_t - Y^b_t|^2 ~ C exp(-rho t)`` for two self-interacting clouds.

    Each cloud starts as a point mass and uses its own empirical law in the
    measure slot; both see the same fast noise.  The fit uses ``t`` in
    ``[0.1, 1] * horizon``.
    """
    dt = dt or default_frozen_step(model)
    horizon = horizon or 12.0 / model.fast_rate
    n = n_particles
    ya = np.tile(np.asarray(y0_a, dtype=float).reshape(model.m), (n, 1))
    yb = np.tile(np.asarray(y0_b, dtype=float).reshape(model.m), (n, 1))
    rng = stream(seed, 0, "mixing")
    K = int(math.ceil(horizon / dt - 1e-9))
    gap = np.empty(K + 1)
    gap[0] = np.mean(np.sum((ya - yb) ** 2, axis=1))
    if gap[0] == 0:
        raise NotContractingError("identical starts: gap is identically zero, rate undefined")
    sq = math.sqrt(dt)
    for k in range(1, K + 1):
        dW = rng.standard_normal((n, model.d2)) * sq
        ya = frozen_increment(model, mu, ya, n, dt, dW)
        yb = frozen_increment(model, mu, yb, n, dt, dW)
        gap[k] = np.mean(np.sum((ya - yb) ** 2, axis=1))
    t = dt * np.arange(K + 1)
    keep = (t >= 0.1 * horizon) & (gap > 1e-300)
    if keep.sum() < 3:
        raise NotContractingError("gap vanished before the fitting window")
    A = np.column_stack([np.ones(keep.sum()), t[keep]])
    coef, *_ = np.linalg.lstsq(A, np.log(gap[keep]), rcond=None)
    resid = np.log(gap[keep]) - A @ coef
    dof = max(1, keep.sum() - 2)
    cov = np.linalg.inv(A.T @ A) * (resid @ resid) / dof
    rate = -float(coef[1])
    if not rate > 0:
        raise NotContractingError(f"model not contracting: fitted rate {rate:.3g}")
    guaranteed = None
    if probe is not None:
        c = probe.constants
        guaranteed = c["beta1"] - c["beta2"] - c["L_h2_gamma2"]
    return MixingEstimate(rate, float(np.sqrt(cov[1, 1])), guaranteed, t, gap)


def _per_particle_stderr(values):
    # values: (slices, N) -> mean and stderr treating particles as independent chains
    per_particle = values.mean(axis=0)
    return float(per_particle.mean()), float(per_particle.std(ddof=1) / np.sqrt(len(per_particle)))


def estimate_invariant(model: ModelSpec, mu: EmpiricalMeasure, n_particles: int = 1000,
                       n_samples: int = 20, dt: float | None = None, rate: float | None = None,
                       burn_in: float | None = None, thinning: float | None = None,
                       y0=None, seed: int = 0, check: bool = True,
                       antithetic: bool = False) -> InvariantEstimate:
    """Pool post-burn-in, thinned snapshots of one long frozen run.

    The cloud starts as a point mass at ``y0`` (default 0).  ``rate`` defaults to
    the two-start mixing rate; burn-in is ``5/rate`` and the thinning stride
    ``1/rate``.  With ``antithetic`` the second half of the cloud is driven by
    the negated noise of the first half.  Standard errors treat particles as
    independent chains (batch means with one batch per particle); a
    first-half/second-half disagreement beyond 5 standard errors raises
    :class:`NonStationaryError`.
    """
    dt = dt or default_frozen_step(model)
    y0 = np.zeros(model.m) if y0 is None else np.asarray(y0, dtype=float).reshape(model.m)
    if rate is None:
        rate = mixing_rate(model, mu, y0 - 1.0, y0 + 1.0, dt=dt, seed=seed).rate
    burn_in = 5.0 / rate if burn_in is None else burn_in
    thinning = 1.0 / rate if thinning is None else thinning
    stride = max(1, int(round(thinning / dt)))
    b_steps = int(math.ceil(burn_in / dt - 1e-9))
    n = n_particles
    rng = stream(seed, 0, "frozen")
    Y = np.tile(y0, (n, 1))
    sq = math.sqrt(dt)

    def noise():
        if antithetic:
            half = rng.standard_normal(((n + 1) // 2, model.d2))
            return np.concatenate([half, -half])[:n] * sq
        return rng.standard_normal((n, model.d2)) * sq

    for _ in range(b_steps):
        Y = frozen_increment(model, mu, Y, n, dt, noise())
    snaps = [Y.copy()]
    for _ in range(n_samples - 1):
        for _ in range(stride):
            Y = frozen_increment(model, mu, Y, n, dt, noise())
        snaps.append(Y.copy())
    snaps = np.array(snaps)  # (S, N, m)
    horizon = (b_steps + (n_samples - 1) * stride) * dt
    eta = EmpiricalMeasure(snaps.reshape(-1, model.m))
    moments, stderr = {}, {}
    for name, values in (("mean", snaps[..., 0]), ("second_moment", np.sum(snaps**2, axis=2))):
        moments[name], stderr[name] = _per_particle_stderr(values)
        if check and n_samples >= 4:
            half = n_samples // 2
            diff = values[:half].mean(axis=0) - values[half:].mean(axis=0)
            se = diff.std(ddof=1) / np.sqrt(n)
            floor = 1e-12 * (1.0 + abs(moments[name]))
            if abs(diff.mean()) > 5 * se + floor:
                raise NonStationaryError(
                    f"{name}: halves differ by {diff.mean():.3g} (> 5 x {se:.3g}); "
                    "increase burn-in or horizon")
    return InvariantEstimate(eta=eta, burn_in=b_steps * dt, horizon=horizon,
                             thinning=stride * dt, dt=dt, rate=rate,
                             moments=moments, stderr=stderr)


def _nested_hbar(model, X, mu, atoms, eta, chunk=2_000_000):
    """``mean_a h1(x_i, mu, atoms_a, eta)`` for every row of ``X``."""
    B, M = X.shape[0], atoms.shape[0]
    out = np.empty((B, model.n))
    rows = max(1, chunk // M)
    for s in range(0, B, rows):
        xb = X[s:s + rows]
        xr = np.repeat(xb, M, axis=0)
        yr = np.tile(atoms, (xb.shape[0], 1))
        vals = model.h1(xr, mu, yr, eta).reshape(xb.shape[0], M, model.n)
        out[s:s + rows] = vals.mean(axis=1)
    return out


def estimate_hbar(model: ModelSpec, x, mu: EmpiricalMeasure, inv: InvariantEstimate) -> np.ndarray:
    """``int h1(x, mu, y, eta) eta(dy)`` with ``eta`` the estimated invariant measure."""
    x = np.asarray(x, dtype=float)
    X = x.reshape(-1, model.n)
    out = _nested_hbar(model, X, mu, inv.eta.atoms, inv.eta)
    return out.reshape(x.shape) if x.ndim > 1 else out[0]


def centering_check(model: ModelSpec, x, mu: EmpiricalMeasure, inv: InvariantEstimate,
                    g: Callable | None = None) -> float:
    """Norm of ``int g(y) eta(dy)``.

    Default ``g(y) = h1(x, mu, y, eta) - hbar(x, mu)``, which vanishes by
    construction; pass any ``g: (M, m) -> (M,) or (M, k)`` to test user functionals.
    """
    atoms = inv.eta.atoms
    if g is None:
        X = np.tile(np.asarray(x, dtype=float).reshape(1, model.n), (atoms.shape[0], 1))
        vals = model.h1(X, mu, atoms, inv.eta)
        vals = vals - vals.mean(axis=0)
    else:
        vals = np.asarray(g(atoms), dtype=float).reshape(atoms.shape[0], -1)
    return float(np.linalg.norm(inv.eta.weights @ vals))


class AveragedDrift:
    """Cached evaluator ``hbar(x (N, n), mu) -> (N, n)``.

    For each slow law (keyed by its moment fingerprint) the invariant measure is
    estimated once with a fixed seed, so estimates at nearby laws share their
    noise.  The drift is split as

        hbar(x) = h1(x, mu, y_ref, eta) + D(x),  D(x) = mean_a [h1(x, mu, y_a, eta) - h1(x, mu, y_ref, eta)],

    with ``y_ref`` the mean of ``eta``.  The first term is evaluated exactly at
    every particle; ``D`` is tabulated on a grid and interpolated by a cubic
    spline for 1-D slow states (nested evaluation otherwise, or outside the
    grid).  When ``h1`` ignores ``y`` the correction is identically zero and the
    evaluator reproduces ``h1`` exactly.
    """

    def __init__(self, model: ModelSpec, fast_step: float | None = None, n_particles: int = 1000,
                 n_samples: int = 20, n_nodes: int = 512, max_atoms: int = 4096, seed: int = 0,
                 rate: float | None = None, use_cache: bool = True, max_entries: int = 128):
        self.model = model
        self.fast_step = fast_step or default_frozen_step(model)
        self.n_particles = n_particles
        self.n_samples = n_samples
        self.n_nodes = n_nodes
        self.max_atoms = max_atoms
        self.seed = seed
        self.rate = rate
        self.use_cache = use_cache
        self.max_entries = max_entries
        self._cache: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def _rate(self, mu):
        if self.rate is None:
            y0 = np.zeros(self.model.m)
            self.rate = mixing_rate(self.model, mu, y0 - 1.0, y0 + 1.0, dt=self.fast_step,
                                    seed=self.seed).rate
        return self.rate

    def invariant(self, mu: EmpiricalMeasure) -> InvariantEstimate:
        return self._entry(mu)["inv"]

    def _build(self, mu):
        inv = estimate_invariant(self.model, mu, n_particles=self.n_particles,
                                 n_samples=self.n_samples, dt=self.fast_step,
                                 rate=self._rate(mu), seed=self.seed, check=False)
        atoms = inv.eta.atoms
        if atoms.shape[0] > self.max_atoms:
            idx = stream(self.seed, 0, "subsample").choice(atoms.shape[0], self.max_atoms,
                                                           replace=False)
            atoms = atoms[np.sort(idx)]
        entry = {"inv": inv, "atoms": atoms, "y_ref": inv.eta.mean.reshape(1, -1), "spline": None}
        if self.model.n == 1:
            lo, hi = mu.atoms.min(), mu.atoms.max()
            pad = 0.25 * (hi - lo) + 0.5
            nodes = np.linspace(lo - pad, hi + pad, self.n_nodes).reshape(-1, 1)
            D = self._correction(nodes, mu, entry)
            entry["spline"] = CubicSpline(nodes[:, 0], D[:, 0])
            entry["range"] = (nodes[0, 0], nodes[-1, 0])
        return entry

    def _correction(self, X, mu, entry):
        eta = entry["inv"].eta
        base = self.model.h1(X, mu, np.repeat(entry["y_ref"], X.shape[0], axis=0), eta)
        return _nested_hbar(self.model, X, mu, entry["atoms"], eta) - base

    def _entry(self, mu):
        key = mu.fingerprint()
        if self.use_cache:
            with self._lock:
                hit = self._cache.get(key)
                if hit is not None:
                    self._cache.move_to_end(key)
            if hit is not None:
                return hit
        entry = self._build(mu)
        if self.use_cache:
            with self._lock:
                self._cache[key] = entry
                while len(self._cache) > self.max_entries:
                    self._cache.popitem(last=False)
        return entry

    def __call__(self, x, mu: EmpiricalMeasure) -> np.ndarray:
        X = np.asarray(x, dtype=float).reshape(-1, self.model.n)
        entry = self._entry(mu)
        eta = entry["inv"].eta
        out = self.model.h1(X, mu, np.repeat(entry["y_ref"], X.shape[0], axis=0), eta)
        if entry["spline"] is not None:
            lo, hi = entry["range"]
            inside = (X[:, 0] >= lo) & (X[:, 0] <= hi)
            corr = np.empty_like(out)
            corr[inside, 0] = entry["spline"](X[inside, 0])
            if not inside.all():
                corr[~inside] = self._correction(X[~inside], mu, entry)
        else:
            corr = self._correction(X, mu, entry)
        return out + corr

    def __len__(self):
        return len(self._cache)
