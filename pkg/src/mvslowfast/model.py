"""Coefficient interface for multiscale McKean-Vlasov systems.

A model is four vectorised evaluators

* ``h1(x, mu, y, nu) -> (B, n)`` slow drift,
* ``gamma1(x, mu) -> (B, n, d1)`` slow diffusion,
* ``h2(mu, y, nu) -> (B, m)`` fast drift,
* ``gamma2(mu, y, nu) -> (B, m, d2)`` fast diffusion,

where ``x`` is ``(B, n)``, ``y`` is ``(B, m)`` and ``mu``/``nu`` are
:class:`~mvslowfast.measure.EmpiricalMeasure` instances over R^n and R^m.
Evaluators must be pure so the engine can call them from several workers.

The module also ships the slow-fast example with sinusoidal slow drift and an
affine fast equation, two small test models, and sampled falsification probes
for the Lipschitz and dissipativity hypotheses.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linprog

from .errors import DegenerateProbeError
from .measure import EmpiricalMeasure, wasserstein2
from .streams import stream


@dataclass(frozen=True)
class ModelSpec:
    n: int
    m: int
    d1: int
    d2: int
    h1: Callable
    gamma1: Callable
    h2: Callable
    gamma2: Callable
    p: int = 1
    name: str = "custom"
    params: dict = field(default_factory=dict)
    # contraction/stiffness scale of the fast drift, used to pick micro steps
    fast_rate: float = 1.0

    def __post_init__(self):
        for attr in ("n", "m", "d1", "d2", "p"):
            if int(getattr(self, attr)) < 1:
                raise ValueError(f"{attr} must be a positive integer")
        if not self.fast_rate > 0:
            raise ValueError("fast_rate must be positive")

    def check_shapes(self, x, mu, y, nu) -> None:
        """Evaluate every coefficient once and verify shapes and finiteness."""
        x = np.atleast_2d(x)
        y = np.atleast_2d(y)
        b = x.shape[0]
        expected = {
            "h1": ((b, self.n), self.h1(x, mu, y, nu)),
            "gamma1": ((b, self.n, self.d1), self.gamma1(x, mu)),
            "h2": ((b, self.m), self.h2(mu, y, nu)),
            "gamma2": ((b, self.m, self.d2), self.gamma2(mu, y, nu)),
        }
        for name, (shape, value) in expected.items():
            value = np.asarray(value)
            if value.shape != shape:
                raise ValueError(f"{name} returned shape {value.shape}, expected {shape}")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} returned non-finite values")


# --------------------------------------------------------------------------
# built-in models


@dataclass(frozen=True)
class Example61Params:
    """Parameters of the sinusoidal slow / affine fast example.

    ``lam`` is the mean-reversion weight on the fast law (``lambda`` in config
    files).  :meth:`for_order` ties the fast coefficients to ``p``.
    """

    a: float = 1.0
    b: float = 1.0
    q: float = 1.0
    k: float = 1.0 / 24
    lam: float = 1.0 / 96
    m: float = 1.0 / 192
    theta: float = 1.0 / 192
    p: int = 3

    def __post_init__(self):
        for name in ("a", "b", "q", "k", "lam", "m", "theta"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"parameter {name} must be positive, got {value}")
        if int(self.p) != self.p or self.p < 1:
            raise ValueError("p must be an integer >= 1")
        if not 2 * self.k - self.m**2 > 0:
            raise ValueError("need 2k - m^2 > 0 for a stationary second moment")

    @classmethod
    def for_order(cls, p: int = 3, a: float = 1.0, b: float = 1.0,
                  q: float = 1.0) -> "Example61Params":
        return cls(a=a, b=b, q=q, k=1 / (8 * p), lam=1 / (32 * p),
                   m=1 / (64 * p), theta=1 / (64 * p), p=p)


def _affine_fast(k, lam, m, theta):
    def h2(mu, y, nu):
        return -k * y + lam * nu.mean

    def gamma2(mu, y, nu):
        offset = theta * mu.expect(np.arctan)
        return (m * y + offset)[:, :, None]

    return h2, gamma2


def _mean_sine_diffusion(x, mu):
    # int sin(x + z) mu(dz) = sin x E cos z + cos x E sin z
    ec = mu.expect(np.cos)
    es = mu.expect(np.sin)
    return (np.sin(x) * ec + np.cos(x) * es)[:, :, None]


def build_example_model(params: Example61Params | None = None) -> ModelSpec:
    """One-dimensional example with

    ``h1 = sin(a x) + int x mu + cos(b y) + int cos(q y) nu``,
    ``gamma1 = int sin(x + z) mu(dz)``,
    ``h2 = -k y + lam int y nu``, ``gamma2 = m y + theta int arctan(z) mu(dz)``.
    """
    if params is None:
        params = Example61Params.for_order()
    a, b, q = params.a, params.b, params.q

    def h1(x, mu, y, nu):
        slow = np.sin(a * x) + mu.mean
        fast = np.cos(b * y) + nu.expect(lambda z: np.cos(q * z))
        return slow + fast

    h2, gamma2 = _affine_fast(params.k, params.lam, params.m, params.theta)
    return ModelSpec(n=1, m=1, d1=1, d2=1, h1=h1, gamma1=_mean_sine_diffusion,
                     h2=h2, gamma2=gamma2, p=int(params.p), name="example61",
                     params=asdict(params), fast_rate=max(params.k, params.m**2))


def build_slow_only_model(params: Example61Params | None = None) -> ModelSpec:
    """Example fast equation, but a slow drift that ignores ``(y, nu)``.

    Averaging is exact for this model: the averaged drift equals ``h1``.
    """
    if params is None:
        params = Example61Params.for_order()
    a = params.a

    def h1(x, mu, y, nu):
        return np.sin(a * x) + mu.mean

    h2, gamma2 = _affine_fast(params.k, params.lam, params.m, params.theta)
    return ModelSpec(n=1, m=1, d1=1, d2=1, h1=h1, gamma1=_mean_sine_diffusion,
                     h2=h2, gamma2=gamma2, p=int(params.p), name="slow-only-test",
                     params=asdict(params), fast_rate=max(params.k, params.m**2))


def build_ou_model(k: float = 1.0, sigma: float = 1.0, alpha: float = 1.0,
                   slow_decay: float = 1.0, slow_sigma: float = 0.5, p: int = 1) -> ModelSpec:
    """Ornstein-Uhlenbeck fast process with a linear slow drift.

    ``h1 = -slow_decay x + alpha y``, ``gamma1 = slow_sigma``,
    ``h2 = -k y``, ``gamma2 = sigma``.  The Poisson solution is ``alpha y / k``.
    """
    if k <= 0 or sigma < 0:
        raise ValueError("need k > 0 and sigma >= 0")

    def h1(x, mu, y, nu):
        return -slow_decay * x + alpha * y

    def gamma1(x, mu):
        return np.full((x.shape[0], 1, 1), float(slow_sigma))

    def h2(mu, y, nu):
        return -k * y

    def gamma2(mu, y, nu):
        return np.full((y.shape[0], 1, 1), float(sigma))

    params = dict(k=k, sigma=sigma, alpha=alpha, slow_decay=slow_decay,
                  slow_sigma=slow_sigma, p=p)
    return ModelSpec(n=1, m=1, d1=1, d2=1, h1=h1, gamma1=gamma1, h2=h2, gamma2=gamma2,
                     p=int(p), name="ou-test", params=params, fast_rate=k)


def _example_params(params: dict) -> Example61Params:
    params = dict(params or {})
    if "lambda" in params:
        params["lam"] = params.pop("lambda")
    p = int(params.get("p", 3))
    base = asdict(Example61Params.for_order(p=p))
    unknown = set(params) - set(base)
    if unknown:
        raise ValueError(f"unknown example61 parameters: {sorted(unknown)}")
    base.update(params)
    return Example61Params(**base)


MODEL_REGISTRY: dict[str, Callable[[dict], ModelSpec]] = {
    "example61": lambda params: build_example_model(_example_params(params)),
    "slow-only-test": lambda params: build_slow_only_model(_example_params(params)),
    "ou-test": lambda params: build_ou_model(**(params or {})),
}


def make_model(name: str, params: dict | None = None) -> ModelSpec:
    try:
        factory = MODEL_REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known: {sorted(MODEL_REGISTRY)}") from None
    return factory(params or {})


# --------------------------------------------------------------------------
# hypothesis probes


@dataclass
class AssumptionReport:
    hypothesis: str
    n_pairs: int
    n_degenerate: int
    worst_ratio: float
    constants: dict
    passed: bool | None = None
    p: int | None = None

    def __post_init__(self):
        if not self.worst_ratio >= 0:
            raise ValueError("worst ratio must be nonnegative")


def gaussian_measure(rng, dim, n_atoms=64, scale=1.0):
    loc = rng.normal(0.0, scale, size=dim)
    spread = scale * rng.uniform(0.2, 1.5)
    return EmpiricalMeasure(loc + spread * rng.standard_normal((n_atoms, dim)))


def default_pair_sampler(model: ModelSpec, n_atoms: int = 64, common_mu: bool = False,
                         scale: float = 1.0):
    """Gaussian points and ``n_atoms``-atom Gaussian clouds.

    Pairs are mixed: a third vary only ``(y, x)``, a third only the measures, the
    rest everything.  With ``common_mu`` both elements share the slow measure.
    """

    def sample(rng):
        x1 = rng.normal(0.0, scale, model.n)
        y1 = rng.normal(0.0, scale, model.m)
        mu1 = gaussian_measure(rng, model.n, n_atoms, scale)
        nu1 = gaussian_measure(rng, model.m, n_atoms, scale)
        mode = rng.integers(3)
        x2 = rng.normal(0.0, scale, model.n) if mode != 1 else x1
        y2 = rng.normal(0.0, scale, model.m) if mode != 1 else y1
        mu2 = gaussian_measure(rng, model.n, n_atoms, scale) if mode != 0 else mu1
        nu2 = gaussian_measure(rng, model.m, n_atoms, scale) if mode != 0 else nu1
        if common_mu:
            mu2 = mu1
        return (x1, mu1, y1, nu1), (x2, mu2, y2, nu2)

    return sample


def _at(v):
    return np.atleast_2d(np.asarray(v, dtype=float))


def _sq(a):
    return float(np.sum(np.asarray(a) ** 2))


def probe_lipschitz(model: ModelSpec, sampler=None, n_pairs: int = 256,
                    seed: int = 0) -> AssumptionReport:
    """Largest sampled Lipschitz quotients for ``(h1, gamma1)`` and ``(h2, gamma2)``.

    Degenerate pairs (zero denominator) are counted and skipped.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    sampler = sampler or default_pair_sampler(model)
    rng = stream(seed, 0, "probe")
    worst1 = worst2 = -np.inf
    degenerate = 0
    for _ in range(n_pairs):
        (x1, mu1, y1, nu1), (x2, mu2, y2, nu2) = sampler(rng)
        w_mu = wasserstein2(mu1, mu2) ** 2
        w_nu = wasserstein2(nu1, nu2) ** 2
        dx, dy = _sq(np.subtract(x1, x2)), _sq(np.subtract(y1, y2))
        den1 = dx + w_mu + dy + w_nu
        den2 = w_mu + dy + w_nu
        if den1 == 0 and den2 == 0:
            degenerate += 1
            continue
        if den1 > 0:
            num = (_sq(model.h1(_at(x1), mu1, _at(y1), nu1) - model.h1(_at(x2), mu2, _at(y2), nu2))
                   + _sq(model.gamma1(_at(x1), mu1) - model.gamma1(_at(x2), mu2)))
            worst1 = max(worst1, num / den1)
        if den2 > 0:
            num = (_sq(model.h2(mu1, _at(y1), nu1) - model.h2(mu2, _at(y2), nu2))
                   + _sq(model.gamma2(mu1, _at(y1), nu1) - model.gamma2(mu2, _at(y2), nu2)))
            worst2 = max(worst2, num / den2)
    if degenerate == n_pairs:
        raise DegenerateProbeError("no informative pairs")
    l1 = float(worst1) if np.isfinite(worst1) else float("nan")
    l2 = float(worst2) if np.isfinite(worst2) else float("nan")
    return AssumptionReport(
        hypothesis="H1", n_pairs=n_pairs, n_degenerate=degenerate,
        worst_ratio=float(np.nanmax([l1, l2])),
        constants={"L_h1_gamma1": l1, "L_h2_gamma2": l2}, p=model.p)


def _fit_betas(v, a, w):
    """Maximise beta1 - beta2 subject to v_i <= -beta1 a_i + beta2 w_i, beta2 >= 0."""
    bound = 1e6
    res = linprog(c=[-1.0, 1.0], A_ub=np.column_stack([a, -w]), b_ub=-v,
                  bounds=[(-bound, bound), (0.0, bound)], method="highs")
    if res.status != 0:
        return float("nan"), float("nan")
    beta1, beta2 = res.x
    return float(beta1), float(beta2)


def dissipativity_value(model: ModelSpec, mu, y1, nu1, y2, nu2, p: int) -> float:
    """``2<y1-y2, dh2> + (2p-1)||dgamma2||^2`` for one sampled pair."""
    dh = model.h2(mu, _at(y1), nu1) - model.h2(mu, _at(y2), nu2)
    dg = model.gamma2(mu, _at(y1), nu1) - model.gamma2(mu, _at(y2), nu2)
    return float(2.0 * np.sum(np.subtract(y1, y2) * dh[0]) + (2 * p - 1) * _sq(dg))


def probe_dissipativity(model: ModelSpec, sampler=None, n_pairs: int = 256, seed: int = 0,
                        lipschitz: float | None = None, p_mode: str = "exact") -> AssumptionReport:
    """Fit the tightest ``(beta1, beta2)`` consistent with the sampled pairs.

    The pass flag checks ``beta1 - beta2 > 4 p L_h2_gamma2`` with ``L`` taken as
    the largest of ``lipschitz`` and the quotient observed on the same pairs.
    ``p_mode="any"`` accepts the inequality at any order ``1 <= p' <= p``.
    """
    if p_mode not in ("exact", "any"):
        raise ValueError("p_mode must be 'exact' or 'any'")
    sampler = sampler or default_pair_sampler(model, common_mu=True)
    rng = stream(seed, 0, "probe", 1)
    orders = [model.p] if p_mode == "exact" else list(range(1, model.p + 1))
    vals = {q: [] for q in orders}
    a_list, w_list = [], []
    l_obs = 0.0
    degenerate = 0
    for _ in range(n_pairs):
        (_, mu, y1, nu1), (_, mu2, y2, nu2) = sampler(rng)
        if mu2 is not mu:
            raise ValueError("dissipativity sampler must reuse the slow measure")
        a = _sq(np.subtract(y1, y2))
        w = wasserstein2(nu1, nu2) ** 2
        if a == 0 and w == 0:
            degenerate += 1
            continue
        for q in orders:
            vals[q].append(dissipativity_value(model, mu, y1, nu1, y2, nu2, q))
        a_list.append(a)
        w_list.append(w)
        num = (_sq(model.h2(mu, _at(y1), nu1) - model.h2(mu, _at(y2), nu2))
               + _sq(model.gamma2(mu, _at(y1), nu1) - model.gamma2(mu, _at(y2), nu2)))
        l_obs = max(l_obs, num / (a + w))
    if not a_list:
        raise DegenerateProbeError("no informative pairs")
    lip = max(l_obs, lipschitz or 0.0)
    a_arr, w_arr = np.array(a_list), np.array(w_list)
    fits = {q: _fit_betas(np.array(vals[q]), a_arr, w_arr) for q in orders}
    passed_at = [q for q, (b1, b2) in fits.items()
                 if b1 > 0 and b1 - b2 > 4 * q * lip]
    beta1, beta2 = fits[model.p] if model.p in fits else fits[orders[-1]]
    p_used = passed_at[-1] if passed_at else model.p
    if p_used in fits:
        beta1, beta2 = fits[p_used]
    worst = max(0.0, max((v + beta1 * a) / (a + w) for v, a, w in
                         zip(vals[p_used] if p_used in vals else vals[orders[-1]], a_list, w_list)))
    constants = {
        "beta1": beta1, "beta2": beta2, "L_h2_gamma2": lip,
        "alpha1": beta1 - 2 * p_used * lip, "alpha2": beta2 + (2 * p_used - 1) * lip,
        "margin": beta1 - beta2 - 4 * p_used * lip,
    }
    return AssumptionReport(hypothesis="H2", n_pairs=n_pairs, n_degenerate=degenerate,
                            worst_ratio=float(worst), constants=constants,
                            passed=bool(passed_at), p=p_used)
