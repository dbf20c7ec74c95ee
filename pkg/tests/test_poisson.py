import math

import numpy as np
import pytest

from mvslowfast.errors import NoisyEstimateError
from mvslowfast.frozen import estimate_invariant, mixing_rate
from mvslowfast.measure import EmpiricalMeasure
from mvslowfast.model import (Example61Params, ModelSpec, build_example_model, build_ou_model,
                              build_slow_only_model)
from mvslowfast.poisson import (dy_psi, estimate_upsilon, generator_residual, psd_sqrt,
                                solve_psi)

K, SIGMA, ALPHA = 1.0, 1.0, 1.0


@pytest.fixture(scope="module")
def ou():
    model = build_ou_model(k=K, sigma=SIGMA, alpha=ALPHA)
    mu = EmpiricalMeasure.dirac(0.0)
    inv = estimate_invariant(model, mu, n_particles=2000, seed=1, antithetic=True)
    return model, mu, inv


def test_psi_zero_for_decoupled_model():
    model = build_slow_only_model(Example61Params.for_order(p=3))
    mu = EmpiricalMeasure([0.3, 1.0])
    inv = estimate_invariant(model, mu, n_particles=200)
    psi = solve_psi(model, [0.2], mu, [0.7], inv.eta, inv, replicas=50, n_nu=100)
    assert np.max(np.abs(psi.value)) <= 1e-10
    d = dy_psi(model, [0.2], mu, [0.7], inv.eta, inv, replicas=50, n_nu=100)
    assert np.all(d == 0)
    ups = estimate_upsilon(model, [0.2], mu, inv, n_atoms=8, replicas=20, n_nu=100)
    assert np.all(ups.matrix == 0)


def test_psi_ou_linear_part(ou):
    model, mu, inv = ou
    p0 = solve_psi(model, [0.0], mu, [0.0], inv.eta, inv, replicas=400, n_nu=400, seed=3)
    p1 = solve_psi(model, [0.0], mu, [1.0], inv.eta, inv, replicas=400, n_nu=400, seed=3)
    # common noise: the difference is the deterministic flow integral y/k up to quadrature
    assert (p1.value - p0.value)[0] == pytest.approx(ALPHA / K, rel=0.02)
    assert p0.tail_bound < 1e-2 and p0.value_2t is not None


def test_dy_psi_ou_closed_form_and_h_independence(ou):
    model, mu, inv = ou
    vals = [dy_psi(model, [0.0], mu, [0.5], inv.eta, inv, h=h, replicas=200, n_nu=200)[0, 0]
            for h in (1e-4, 1e-3, 1e-2)]
    assert vals[0] == pytest.approx(ALPHA * SIGMA / K, rel=0.02)
    assert np.ptp(vals) < 1e-6


def test_dy_psi_noise_guard():
    # a rapidly oscillating payoff decorrelates the bumped paths, so 20 replicas cannot resolve it
    base = build_ou_model(k=1.0, sigma=1.0)
    model = ModelSpec(1, 1, 1, 1, h1=lambda x, mu, y, nu: np.sin(20 * y), gamma1=base.gamma1,
                      h2=base.h2, gamma2=base.gamma2)
    mu = EmpiricalMeasure.dirac(0.0)
    inv = estimate_invariant(base, mu, n_particles=500)
    with pytest.raises(NoisyEstimateError):
        dy_psi(model, [0.0], mu, [math.pi / 40], inv.eta, inv, replicas=20, n_nu=100)
    out = dy_psi(model, [0.0], mu, [math.pi / 40], inv.eta, inv, replicas=20, n_nu=100,
                 check_snr=False)
    assert out.shape == (1, 1)


def test_upsilon_ou_quadrature(ou):
    model, mu, inv = ou
    ups = estimate_upsilon(model, [0.0], mu, inv, n_atoms=16, replicas=100, n_nu=200)
    # oracle: integrate (alpha sigma / k)^2 against the stationary Gaussian on a dense grid
    var = SIGMA**2 / (2 * K)
    grid = np.linspace(-8, 8, 4001) * math.sqrt(var)
    dens = np.exp(-grid**2 / (2 * var)) / math.sqrt(2 * math.pi * var)
    oracle = math.sqrt(np.trapezoid(np.full_like(grid, (ALPHA * SIGMA / K) ** 2) * dens, grid))
    assert ups.matrix[0, 0] == pytest.approx(oracle, rel=0.03)
    assert ups.matrix @ ups.matrix == pytest.approx(ups.raw, abs=1e-8)
    assert ups.matrix[0, 0] >= 0


def test_psd_sqrt():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    R = psd_sqrt(A)
    assert R @ R == pytest.approx(A, abs=1e-12)
    assert R == pytest.approx(R.T)
    with pytest.raises(ValueError):
        psd_sqrt(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_generator_residual_trivial():
    model = build_slow_only_model(Example61Params.for_order(p=3))
    mu = EmpiricalMeasure([0.3, 1.0])
    inv = estimate_invariant(model, mu, n_particles=200)
    r = generator_residual(model, [0.1], mu, [0.4], inv.eta, inv, 0.1, outer=16, replicas=16, n_nu=50)
    assert np.max(np.abs(r)) <= 1e-12


def test_generator_residual_shrinks_with_delta(ou):
    model, mu, inv = ou
    kw = dict(outer=256, replicas=50, n_nu=200, seed=0)
    big = abs(generator_residual(model, [0.0], mu, [0.5], inv.eta, inv, 0.1, **kw)[0])
    small = abs(generator_residual(model, [0.0], mu, [0.5], inv.eta, inv, 0.01, **kw)[0])
    assert small < 0.3 * big


def test_example_psi_growth_bound():
    model = build_example_model(Example61Params.for_order(p=3))
    mu = EmpiricalMeasure.dirac(1.0)
    inv = estimate_invariant(model, mu, n_particles=500, seed=2)
    rho = mixing_rate(model, mu, [-1.0], [1.0]).rate
    nu = inv.eta
    for y in (-2.0, -0.5, 0.0, 1.0, 3.0):
        psi = solve_psi(model, [0.0], mu, [y], nu, inv, replicas=100, n_nu=200, seed=1)
        scale = math.sqrt(1 + mu.second_moment + y**2 + nu.second_moment)
        # |h1 - hbar| <= 4 and first moments contract at rate >= rho / 2
        assert abs(psi.value[0]) <= (8 / rho) * scale
