"""Corrector for the fast generator, its y-gradient and the fluctuation diffusion.

The corrector solves ``-L Psi = h1 - hbar`` for the generator ``L`` of the pair
(fast state started at ``y``, law of the fast cloud started at ``nu``) and is
computed pointwise from its time-integral representation

    Psi(x, mu, y, nu) = int_0^inf [E h1(x, mu, Y_s^y, law(Y_s^nu)) - hbar(x, mu)] ds,

truncated at ``t_cut``.  All finite differences use common random numbers:
every start in one batch sees the same fast noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NoisyEstimateError, NonFiniteError
from .frozen import InvariantEstimate, estimate_hbar
from .measure import EmpiricalMeasure
from .model import ModelSpec
from .streams import stream

# truncation horizon in units of 1/rate
T_CUT_FACTOR = 12.0


@dataclass
class PsiEstimate:
    value: np.ndarray
    stderr: np.ndarray
    t_cut: float
    replicas: int
    tail_bound: float
    value_2t: np.ndarray | None = None

    def __post_init__(self):
        if not self.t_cut > 0:
            raise ValueError("t_cut must be positive")
        if not np.isfinite(self.tail_bound):
            raise ValueError("tail bound must be finite")


@dataclass
class UpsilonEstimate:
    matrix: np.ndarray
    raw: np.ndarray
    n_atoms: int
    replicas: int


def _nu_cloud(nu, n_nu, rng):
    if n_nu is None or n_nu >= nu.n_atoms:
        return np.array(nu.atoms, dtype=float)
    return nu.resample(n_nu, rng)


def _psi_integrals(model, x, mu, starts, nu, hbar, dt, t_marks, replicas, seed,
                   n_nu=None, quadrature="trapezoid"):
    """Per-replica integrals of ``h1(x, mu, Y_s^{y_k}, law(Z_s)) - hbar`` up to each mark.

    ``starts`` is ``(K, m)``.  Returns an array ``(len(t_marks), K, R, n)``.
    The replica noise is shared by all starts; the measure cloud ``Z`` (started
    at the atoms of ``nu``) has its own stream.
    """
    starts = np.asarray(starts, dtype=float).reshape(-1, model.m)
    K, R = starts.shape[0], replicas
    rng_y = stream(seed, 0, "psi")
    rng_z = stream(seed, 1, "psi")
    Z = _nu_cloud(nu, n_nu, rng_z)
    nz = Z.shape[0]
    Y = np.repeat(starts, R, axis=0)
    X = np.tile(np.asarray(x, dtype=float).reshape(1, model.n), (K * R, 1))
    hbar = np.asarray(hbar, dtype=float).reshape(1, model.n)
    steps = [int(round(t / dt)) for t in t_marks]
    n_steps = max(steps)
    sq = math.sqrt(dt)
    out = np.empty((len(steps), K * R, model.n))

    def integrand(Y, Z):
        return model.h1(X, mu, Y, EmpiricalMeasure.from_cloud(Z)) - hbar

    f_prev = integrand(Y, Z)
    acc = np.zeros_like(f_prev)
    for j in range(1, n_steps + 1):
        nu_s = EmpiricalMeasure.from_cloud(Z)
        dW = np.tile(rng_y.standard_normal((R, model.d2)) * sq, (K, 1))
        dV = rng_z.standard_normal((nz, model.d2)) * sq
        Y = Y + model.h2(mu, Y, nu_s) * dt + np.einsum("bkd,bd->bk", model.gamma2(mu, Y, nu_s), dW)
        Z = Z + model.h2(mu, Z, nu_s) * dt + np.einsum("bkd,bd->bk", model.gamma2(mu, Z, nu_s), dV)
        if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(Z))):
            raise NonFiniteError("fast path diverged while integrating the corrector", term="h2")
        f_new = integrand(Y, Z)
        acc += 0.5 * (f_prev + f_new) * dt if quadrature == "trapezoid" else f_prev * dt
        f_prev = f_new
        for i, s in enumerate(steps):
            if s == j:
                out[i] = acc
    if 0 in steps:
        out[steps.index(0)] = 0.0
    return out.reshape(len(steps), K, R, model.n)


def _hbar_value(model, x, mu, inv, hbar):
    if hbar is not None:
        return np.asarray(hbar, dtype=float).reshape(model.n)
    return estimate_hbar(model, np.asarray(x, dtype=float).reshape(model.n), mu, inv)


def solve_psi(model: ModelSpec, x, mu: EmpiricalMeasure, y, nu: EmpiricalMeasure,
              inv: InvariantEstimate, t_cut: float | None = None, replicas: int = 1000,
              dt: float | None = None, n_nu: int | None = 1000, seed: int = 0,
              check_tail: bool = True, hbar=None) -> PsiEstimate:
    """Truncated time-integral estimate of the corrector at one point.

    ``t_cut`` defaults to ``12 / rate`` (rate from ``inv``).  With ``check_tail``
    the run continues to ``2 t_cut`` and a change beyond 3 standard errors
    raises :class:`NoisyEstimateError`.
    """
    rate = inv.rate
    if not rate > 0:
        raise ValueError("mixing rate must be positive")
    t_cut = t_cut or T_CUT_FACTOR / rate
    dt = dt or inv.dt
    hb = _hbar_value(model, x, mu, inv, hbar)
    marks = [t_cut, 2 * t_cut] if check_tail else [t_cut]
    I = _psi_integrals(model, x, mu, np.reshape(y, (1, model.m)), nu, hb, dt, marks,
                       replicas, seed, n_nu)[:, 0]  # (marks, R, n)
    value = I[0].mean(axis=0)
    stderr = I[0].std(axis=0, ddof=1) / math.sqrt(replicas)
    value_2t = None
    # first-moment contraction is at least half the squared-gap rate
    f0 = np.abs(model.h1(np.reshape(x, (1, -1)), mu, np.reshape(y, (1, -1)), nu)[0] - hb)
    tail = float(np.max(f0) * math.exp(-0.5 * rate * t_cut) * 2.0 / rate)
    if check_tail:
        value_2t = I[1].mean(axis=0)
        d = I[1] - I[0]
        se = d.std(axis=0, ddof=1) / math.sqrt(replicas)
        if np.any(np.abs(d.mean(axis=0)) > 3 * se + 1e-12 * (1 + np.abs(value))):
            raise NoisyEstimateError(
                f"corrector not Cauchy in t_cut: change {d.mean(axis=0)} vs 3 x {se}")
    return PsiEstimate(value=value, stderr=stderr, t_cut=t_cut, replicas=replicas,
                       tail_bound=tail, value_2t=value_2t)


def _dy_samples(model, x, mu, ys, nu, inv, h, replicas, dt, t_cut, n_nu, seed, hbar):
    """Per-replica central differences at every row of ``ys``: ``(K, R, n, m)``."""
    ys = np.asarray(ys, dtype=float).reshape(-1, model.m)
    K, m = ys.shape[0], model.m
    bumps = np.concatenate([np.eye(m) * h, -np.eye(m) * h])  # (2m, m)
    starts = (ys[:, None, :] + bumps[None, :, :]).reshape(-1, m)
    I = _psi_integrals(model, x, mu, starts, nu, hbar, dt, [t_cut], replicas, seed, n_nu)[0]
    I = I.reshape(K, 2 * m, replicas, model.n)
    D = (I[:, :m] - I[:, m:]) / (2 * h)  # (K, m, R, n)
    return np.transpose(D, (0, 2, 3, 1))


def dy_psi(model: ModelSpec, x, mu: EmpiricalMeasure, y, nu: EmpiricalMeasure,
           inv: InvariantEstimate, h: float = 1e-3, replicas: int = 1000,
           dt: float | None = None, t_cut: float | None = None, n_nu: int | None = 1000,
           seed: int = 0, check_snr: bool = True, hbar=None) -> np.ndarray:
    """``d_y Psi(x, mu, y, nu) @ gamma2(mu, y, nu)``, shape ``(n, d2)``.

    Central differences with common random numbers across the bumped starts.
    Raises :class:`NoisyEstimateError` when the difference is below twice its
    standard error.
    """
    dt = dt or inv.dt
    t_cut = t_cut or T_CUT_FACTOR / inv.rate
    hb = _hbar_value(model, x, mu, inv, hbar)
    D = _dy_samples(model, x, mu, y, nu, inv, h, replicas, dt, t_cut, n_nu, seed, hb)[0]
    grad = D.mean(axis=0)  # (n, m)
    se = D.std(axis=0, ddof=1) / math.sqrt(replicas)
    if check_snr:
        noisy = (se > 0) & (np.abs(grad) < 2 * se)
        if np.any(noisy):
            raise NoisyEstimateError(
                f"finite difference below 2 standard errors ({grad} vs {se}); "
                "increase replicas")
    g2 = model.gamma2(mu, np.reshape(y, (1, model.m)), nu)[0]
    return grad @ g2


def psd_sqrt(S: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Symmetric PSD square root; eigenvalues below ``-tol`` raise ``ValueError``."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if np.any(w < -tol):
        raise ValueError(f"covariance has negative eigenvalue {w.min():.3g}")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def estimate_upsilon(model: ModelSpec, x, mu: EmpiricalMeasure, inv: InvariantEstimate,
                     n_atoms: int = 64, h: float = 1e-3, replicas: int = 200,
                     dt: float | None = None, t_cut: float | None = None,
                     n_nu: int | None = 1000, seed: int = 0, hbar=None) -> UpsilonEstimate:
    """Average ``(d_y Psi gamma2)(d_y Psi gamma2)^T`` over ``n_atoms`` atoms of eta.

    The measure slot receives eta itself.  The squared per-atom mean gradient is
    corrected for its Monte Carlo variance (the naive square is biased upward by
    ``var / replicas``).
    """
    dt = dt or inv.dt
    t_cut = t_cut or T_CUT_FACTOR / inv.rate
    eta = inv.eta
    rng = stream(seed, 0, "subsample")
    idx = rng.choice(eta.n_atoms, size=min(n_atoms, eta.n_atoms), replace=False)
    ys = eta.atoms[np.sort(idx)]
    hb = _hbar_value(model, x, mu, inv, hbar)
    D = _dy_samples(model, x, mu, ys, eta, inv, h, replicas, dt, t_cut, n_nu, seed, hb)
    g2 = model.gamma2(mu, ys, eta)  # (K, m, d2)
    G = np.einsum("krnm,kmd->krnd", D, g2)  # per replica d_yPsi gamma2
    mean = G.mean(axis=1)  # (K, n, d2)
    outer = np.einsum("knd,kpd->knp", mean, mean)
    raw = outer.mean(axis=0)
    if replicas > 1:
        dev = G - mean[:, None]
        cov = np.einsum("krnd,krpd->knp", dev, dev).mean(axis=0) / (replicas - 1)
        corrected = raw - cov / replicas
        # keep the plain (PSD by construction) average when the correction overshoots
        if np.linalg.eigvalsh(0.5 * (corrected + corrected.T)).min() >= 0:
            raw = corrected
    raw = 0.5 * (raw + raw.T)
    if np.linalg.eigvalsh(raw).min() < -1e-10:
        raise ValueError("averaged outer product is not positive semidefinite")
    return UpsilonEstimate(matrix=psd_sqrt(raw), raw=raw, n_atoms=len(ys), replicas=replicas)


def generator_residual(model: ModelSpec, x, mu: EmpiricalMeasure, y, nu: EmpiricalMeasure,
                       inv: InvariantEstimate, delta: float, outer: int = 256,
                       replicas: int = 1000, inner_dt: float | None = None,
                       psi_dt: float | None = None, t_cut: float | None = None,
                       n_nu: int | None = 1000, seed: int = 0, hbar=None) -> np.ndarray:
    """``[E Psi(Y_delta, law(Z_delta)) - Psi(y, nu)] / delta + h1(x, mu, y, nu) - hbar``.

    ``Y_delta`` uses ``outer`` antithetic samples with inner step ``inner_dt``
    (default ``delta / 100``); every corrector evaluation shares one set of
    replica noise.  ``psi_dt`` defaults to ``min(inv.dt, inner_dt * 10)`` so the
    quadrature error scales with ``delta``.  ``t_cut`` defaults to twice the
    usual horizon: the truncated corrector leaves a residual of the size of the
    dropped tail, which must sit below the O(delta) signal.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    inner_dt = inner_dt or delta / 100
    psi_dt = psi_dt or min(inv.dt, 10 * inner_dt)
    t_cut = t_cut or 2 * T_CUT_FACTOR / inv.rate
    hb = _hbar_value(model, x, mu, inv, hbar)
    y = np.asarray(y, dtype=float).reshape(1, model.m)
    rng = stream(seed, 0, "psi_outer")
    half = (outer + 1) // 2
    Y = np.repeat(y, 2 * half, axis=0)
    Z = _nu_cloud(nu, n_nu, stream(seed, 2, "psi"))
    steps = max(1, int(round(delta / inner_dt)))
    h = delta / steps
    for _ in range(steps):
        nu_s = EmpiricalMeasure.from_cloud(Z)
        g = rng.standard_normal((half, model.d2)) * math.sqrt(h)
        dW = np.concatenate([g, -g])
        dV = rng.standard_normal((Z.shape[0], model.d2)) * math.sqrt(h)
        Y = Y + model.h2(mu, Y, nu_s) * h + np.einsum("bkd,bd->bk", model.gamma2(mu, Y, nu_s), dW)
        Z = Z + model.h2(mu, Z, nu_s) * h + np.einsum("bkd,bd->bk", model.gamma2(mu, Z, nu_s), dV)
    nu_delta = EmpiricalMeasure(Z)
    I_after = _psi_integrals(model, x, mu, Y, nu_delta, hb, psi_dt, [t_cut], replicas, seed)[0]
    I_before = _psi_integrals(model, x, mu, y, nu, hb, psi_dt, [t_cut], replicas, seed,
                              n_nu)[0]
    psi_after = I_after.mean(axis=(0, 1))
    psi_before = I_before.mean(axis=(0, 1))
    h1v = model.h1(np.reshape(x, (1, model.n)), mu, y, nu)[0]
    res = (psi_after - psi_before) / delta + (h1v - hb)
    if not np.all(np.isfinite(res)):
        raise NonFiniteError("generator residual is not finite")
    return res
