import math

import numpy as np
import pytest

from mvslowfast.errors import NonStationaryError, NotContractingError
from mvslowfast.frozen import (AveragedDrift, centering_check, estimate_hbar, estimate_invariant,
                               mixing_rate, simulate_frozen)
from mvslowfast.measure import EmpiricalMeasure, wasserstein2
from mvslowfast.model import (Example61Params, ModelSpec, build_example_model, build_ou_model,
                              build_slow_only_model, probe_dissipativity)

P3 = Example61Params.for_order(p=3)


@pytest.fixture(scope="module")
def ex3():
    return build_example_model(P3)


@pytest.fixture(scope="module")
def inv_delta1(ex3):
    return estimate_invariant(ex3, EmpiricalMeasure.dirac(1.0), seed=1)


def test_frozen_collapse_at_delta0(ex3):
    fp = simulate_frozen(ex3, EmpiricalMeasure.dirac(0.0), horizon=240.0, n_particles=500)
    m2 = np.mean(fp.Yxi[..., 0] ** 2, axis=1)
    assert m2[0] > 0.5
    assert m2[-1] < 1e-3 * m2[0]


def test_frozen_ou_variance():
    model = build_ou_model(k=1.0, sigma=1.0)
    fp = simulate_frozen(model, EmpiricalMeasure.dirac(0.0), horizon=10.0, n_particles=4000, seed=3)
    assert fp.Yxi[-1].var() == pytest.approx(0.5, abs=0.04)


def test_frozen_zero_coefficients_constant():
    model = ModelSpec(1, 1, 1, 1, h1=lambda x, mu, y, nu: x, gamma1=lambda x, mu: np.zeros((len(x), 1, 1)),
                      h2=lambda mu, y, nu: np.zeros_like(y),
                      gamma2=lambda mu, y, nu: np.zeros((len(y), 1, 1)))
    fp = simulate_frozen(model, EmpiricalMeasure.dirac(0.0), horizon=1.0, dt=0.1, n_particles=5)
    assert np.all(fp.Yxi == fp.Yxi[0])
    assert np.all(fp.Yy0 == 0)


def test_invariant_moment_oracle(inv_delta1):
    c = P3.theta * math.pi / 4
    oracle = c**2 / (2 * P3.k - P3.m**2)
    assert oracle == pytest.approx(2.0086e-4, rel=1e-3)
    m2 = inv_delta1.moments["second_moment"]
    assert m2 == pytest.approx(oracle, rel=0.05)
    assert abs(inv_delta1.moments["mean"]) <= 3 * inv_delta1.stderr["mean"]
    assert inv_delta1.eta.n_atoms >= 100 and inv_delta1.burn_in < inv_delta1.horizon


def test_invariant_collapse_and_ou(ex3):
    inv0 = estimate_invariant(ex3, EmpiricalMeasure.dirac(0.0))
    assert inv0.moments["second_moment"] < 1e-6
    ou = estimate_invariant(build_ou_model(k=1.0), EmpiricalMeasure.dirac(0.0), seed=2)
    assert ou.moments["second_moment"] == pytest.approx(0.5, rel=0.05)


def test_invariant_is_stationary_under_resimulation():
    model = build_ou_model(k=1.0)
    mu = EmpiricalMeasure.dirac(0.0)
    inv = estimate_invariant(model, mu, n_particles=2000, seed=4)
    atoms = inv.eta.atoms

    def from_eta(rng, n):
        return atoms[rng.choice(atoms.shape[0], n, replace=False)]

    fp = simulate_frozen(model, mu, init=(from_eta, np.zeros(1)), horizon=3.0, n_particles=4000, seed=9)
    after = fp.Yxi[-1, :, 0]
    for stat, key in ((after.mean(), "mean"), (np.mean(after**2), "second_moment")):
        se = math.hypot(inv.stderr[key], np.std(after ** (1 if key == "mean" else 2)) / math.sqrt(4000))
        assert abs(stat - inv.moments[key]) < 3 * se


def test_non_stationary_detected():
    model = build_ou_model(k=1.0)
    with pytest.raises(NonStationaryError):
        estimate_invariant(model, EmpiricalMeasure.dirac(0.0), y0=np.array([50.0]), burn_in=0.0,
                           thinning=0.2, n_samples=20)


def test_hbar_collapse_value(ex3):
    mu = EmpiricalMeasure.dirac(0.0)
    inv = estimate_invariant(ex3, mu)
    for x in (-1.0, 0.3, 2.0):
        assert estimate_hbar(ex3, np.array([x]), mu, inv)[0] == pytest.approx(math.sin(x) + 2, abs=1e-6)


def test_hbar_exact_for_decoupled_model():
    model = build_slow_only_model(P3)
    mu = EmpiricalMeasure([0.2, -0.4, 1.0])
    inv = estimate_invariant(model, mu, n_particles=200)
    x = np.array([[0.5], [-1.0]])
    assert np.array_equal(estimate_hbar(model, x, mu, inv), model.h1(x, mu, None, None))
    assert np.array_equal(estimate_hbar(model, x, mu, inv), estimate_hbar(model, x, mu, inv))


def test_hbar_lipschitz_sampled(ex3):
    ad = AveragedDrift(ex3, n_particles=300, n_samples=10)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(8):
        mu1 = EmpiricalMeasure(rng.normal(size=50))
        mu2 = EmpiricalMeasure(rng.normal(0.5, 1.2, size=50))
        x1, x2 = rng.normal(size=(1, 1)), rng.normal(size=(1, 1))
        num = float(np.sum((ad(x1, mu1) - ad(x2, mu2)) ** 2))
        den = float(np.sum((x1 - x2) ** 2)) + wasserstein2(mu1, mu2) ** 2
        worst = max(worst, num / den)
    # slow part alone contributes at most (a + 1)^2 = 4; fast averages add little
    assert worst < 8.0


def test_mixing_ou_rate():
    k = 1.0
    est = mixing_rate(build_ou_model(k=k), EmpiricalMeasure.dirac(0.0), [-1.0], [1.0])
    assert est.rate == pytest.approx(2 * k, rel=0.1)


def test_mixing_identical_starts():
    with pytest.raises(NotContractingError):
        mixing_rate(build_ou_model(), EmpiricalMeasure.dirac(0.0), [1.0], [1.0])


def test_mixing_dominates_guarantee(ex3):
    probe = probe_dissipativity(ex3, n_pairs=256)
    est = mixing_rate(ex3, EmpiricalMeasure.dirac(1.0), [-1.0], [1.0], probe=probe)
    assert est.rate > 0
    assert est.dominates_guarantee


def test_centering_checks(ex3, inv_delta1):
    mu = EmpiricalMeasure.dirac(1.0)
    assert centering_check(ex3, [0.4], mu, inv_delta1) < 1e-12
    assert centering_check(ex3, [0.4], mu, inv_delta1, g=lambda y: np.zeros(len(y))) == 0.0
    mean = inv_delta1.eta.mean
    assert centering_check(ex3, [0.4], mu, inv_delta1, g=lambda y: y - mean) < 1e-12


def test_averaged_drift_matches_nested():
    model = build_example_model(Example61Params.for_order(p=2))
    mu = EmpiricalMeasure(np.random.default_rng(1).normal(size=200))
    ad = AveragedDrift(model, n_particles=300, n_samples=10, max_entries=2)
    x = np.linspace(-2, 2, 9).reshape(-1, 1)
    nested = estimate_hbar(model, x, mu, ad.invariant(mu))
    assert ad(x, mu) == pytest.approx(nested, abs=1e-8)
    far = np.array([[40.0]])
    assert ad(far, mu) == pytest.approx(estimate_hbar(model, far, mu, ad.invariant(mu)), abs=1e-12)
    for shift in (1.0, 2.0, 3.0):
        ad.invariant(mu.shifted(np.full((200, 1), shift)))
    assert len(ad) == 2
