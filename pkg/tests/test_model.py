import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvslowfast.errors import DegenerateProbeError
from mvslowfast.measure import EmpiricalMeasure
from mvslowfast.model import (Example61Params, ModelSpec, build_example_model, build_ou_model,
                              default_pair_sampler, dissipativity_value, make_model,
                              probe_dissipativity, probe_lipschitz)


def delta(v):
    return EmpiricalMeasure.dirac(v)


def test_default_params():
    p = Example61Params.for_order(p=3)
    assert (p.k, p.lam, p.m, p.theta) == (1 / 24, 1 / 96, 1 / 192, 1 / 192)
    assert 2 * p.k - p.m**2 > 0


@pytest.mark.parametrize("field", ["a", "b", "q", "k", "lam", "m", "theta"])
def test_params_reject_nonpositive(field):
    kw = dict(a=1, b=1, q=1, k=0.1, lam=0.1, m=0.1, theta=0.1, p=1)
    kw[field] = 0.0
    with pytest.raises(ValueError):
        Example61Params(**kw)


def test_example_point_values():
    model = build_example_model(Example61Params.for_order(p=3))
    x = np.zeros((1, 1))
    assert model.h1(x, delta(0.0), x, delta(0.0))[0, 0] == pytest.approx(2.0)
    assert model.gamma1(x, delta(0.0))[0, 0, 0] == pytest.approx(0.0)
    assert model.h2(delta(0.0), np.ones((1, 1)), delta(0.0))[0, 0] == pytest.approx(-1 / 24)


def test_example_formulas_on_clouds():
    model = make_model("example61", {"p": 2, "a": 2.0, "b": 0.5, "q": 3.0})
    rng = np.random.default_rng(1)
    mu = EmpiricalMeasure(rng.normal(size=7))
    nu = EmpiricalMeasure(rng.normal(size=5))
    x = rng.normal(size=(4, 1))
    y = rng.normal(size=(4, 1))
    want = (np.sin(2 * x) + mu.atoms.mean() + np.cos(0.5 * y)
            + np.mean(np.cos(3 * nu.atoms)))
    assert model.h1(x, mu, y, nu) == pytest.approx(want)
    want_g1 = np.mean(np.sin(x + mu.atoms[:, 0][None, :]), axis=1)
    assert model.gamma1(x, mu)[:, 0, 0] == pytest.approx(want_g1)
    k, lam, m, th = 1 / 16, 1 / 64, 1 / 128, 1 / 128
    assert model.h2(mu, y, nu) == pytest.approx(-k * y + lam * nu.atoms.mean())
    assert model.gamma2(mu, y, nu)[:, :, 0] == pytest.approx(m * y + th * np.mean(np.arctan(mu.atoms)))


def test_registry():
    assert make_model("ou-test", {"k": 2.0}).fast_rate == 2.0
    assert make_model("example61", {"lambda": 0.01}).params["lam"] == 0.01
    with pytest.raises(KeyError):
        make_model("nope")
    with pytest.raises(ValueError):
        make_model("example61", {"zeta": 1})


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**31))
def test_shapes_fuzzed(batch, atoms, seed):
    rng = np.random.default_rng(seed)
    for model in (build_example_model(), build_ou_model()):
        mu = EmpiricalMeasure(rng.normal(scale=3, size=(atoms, 1)))
        nu = EmpiricalMeasure(rng.normal(scale=3, size=(atoms, 1)))
        model.check_shapes(rng.normal(size=(batch, 1)), mu, rng.normal(size=(batch, 1)), nu)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2**31))
def test_fast_coefficients_affine(t, seed):
    # evaluators at convex combinations of (y, mean nu, mean arctan mu) combine linearly;
    # measures are mixed atom-wise, which mixes both linear statistics
    model = build_example_model(Example61Params.for_order(p=3))
    rng = np.random.default_rng(seed)
    y1, y2 = rng.normal(size=(3, 1)), rng.normal(size=(3, 1))
    a1, a2 = rng.normal(size=6), rng.normal(size=6)
    c1, c2 = np.tan(rng.uniform(-1.2, 1.2, 6)), np.tan(rng.uniform(-1.2, 1.2, 6))
    nu1, nu2, nut = (EmpiricalMeasure(a1), EmpiricalMeasure(a2),
                     EmpiricalMeasure(np.r_[a1, a2], np.r_[np.full(6, (1 - t) / 6), np.full(6, t / 6)]))
    mu1, mu2, mut = (EmpiricalMeasure(c1), EmpiricalMeasure(c2),
                     EmpiricalMeasure(np.r_[c1, c2], np.r_[np.full(6, (1 - t) / 6), np.full(6, t / 6)]))
    yt = (1 - t) * y1 + t * y2
    for f in (model.h2, model.gamma2):
        mix = (1 - t) * f(mu1, y1, nu1) + t * f(mu2, y2, nu2)
        assert f(mut, yt, nut) == pytest.approx(mix, abs=1e-12)


def test_lipschitz_degenerate_pairs():
    model = build_example_model()

    def same(rng):
        pt = (np.zeros(1), delta(0.0), np.zeros(1), delta(0.0))
        return pt, pt

    with pytest.raises(DegenerateProbeError):
        probe_lipschitz(model, same, n_pairs=4)

    calls = {"i": 0}

    def mixed(rng):
        calls["i"] += 1
        pt = (np.zeros(1), delta(0.0), np.zeros(1), delta(0.0))
        if calls["i"] % 2:
            return pt, pt
        return pt, (np.ones(1), delta(0.0), np.zeros(1), delta(0.0))

    rep = probe_lipschitz(model, mixed, n_pairs=6)
    assert rep.n_degenerate == 3


def test_lipschitz_linear_model_quotient_one():
    def h1(x, mu, y, nu):
        return x.copy()

    model = ModelSpec(1, 1, 1, 1, h1, lambda x, mu: np.zeros((x.shape[0], 1, 1)),
                      lambda mu, y, nu: -y, lambda mu, y, nu: np.zeros((y.shape[0], 1, 1)))

    def x_only(rng):
        x1, x2 = rng.normal(size=1), rng.normal(size=1)
        return (x1, delta(0.0), np.zeros(1), delta(0.0)), (x2, delta(0.0), np.zeros(1), delta(0.0))

    rep = probe_lipschitz(model, x_only, n_pairs=50)
    assert rep.constants["L_h1_gamma1"] == pytest.approx(1.0)


def test_lipschitz_fast_bound_y_only():
    prm = Example61Params.for_order(p=3)
    model = build_example_model(prm)
    mu, nu = delta(0.4), delta(-0.2)

    def y_only(rng):
        y1, y2 = rng.normal(size=1), rng.normal(size=1)
        return (np.zeros(1), mu, y1, nu), (np.zeros(1), mu, y2, nu)

    rep = probe_lipschitz(model, y_only, n_pairs=100)
    # y-only variation: quotient is exactly k^2 + m^2
    assert rep.constants["L_h2_gamma2"] == pytest.approx(prm.k**2 + prm.m**2)
    bound = max(2 * prm.k**2 + 2 * prm.m**2, 2 * prm.lam**2, 2 * prm.theta**2)
    assert rep.constants["L_h2_gamma2"] <= bound
    full = probe_lipschitz(model, n_pairs=200)
    assert full.constants["L_h2_gamma2"] <= bound + 1e-12


def test_dissipativity_identical_fast_inputs_zero():
    model = build_example_model()
    mu, nu = delta(1.0), EmpiricalMeasure([0.0, 2.0])
    assert dissipativity_value(model, mu, np.ones(1), nu, np.ones(1), nu, 3) == 0.0


def test_dissipativity_common_nu_bound():
    prm = Example61Params.for_order(p=3)
    model = build_example_model(prm)
    rate = 2 * prm.k - 5 * prm.m**2 - prm.lam
    rng = np.random.default_rng(0)
    for _ in range(50):
        mu = EmpiricalMeasure(rng.normal(size=8))
        nu = EmpiricalMeasure(rng.normal(size=8))
        y1, y2 = rng.normal(size=1), rng.normal(size=1)
        v = dissipativity_value(model, mu, y1, nu, y2, nu, 3)
        assert v <= -rate * (y1 - y2)[0] ** 2 + 1e-14


def test_dissipativity_for_order_passes():
    prm = Example61Params.for_order(p=3)
    model = build_example_model(prm)
    rep = probe_dissipativity(model, n_pairs=256, seed=0)
    assert rep.passed
    assert rep.constants["beta1"] >= 2 * prm.k - 5 * prm.m**2 - prm.lam - 1e-9
    assert rep.constants["margin"] == pytest.approx(
        rep.constants["beta1"] - rep.constants["beta2"] - 12 * rep.constants["L_h2_gamma2"])
    c = rep.constants
    assert c["alpha1"] == pytest.approx(c["beta1"] - 6 * c["L_h2_gamma2"])
    assert c["alpha2"] == pytest.approx(c["beta2"] + 5 * c["L_h2_gamma2"])


def test_dissipativity_pure_ou():
    rep = probe_dissipativity(build_ou_model(k=0.7, sigma=1.0), n_pairs=128)
    assert rep.constants["beta1"] == pytest.approx(1.4, abs=1e-8)
    assert rep.constants["beta2"] == pytest.approx(0.0, abs=1e-8)
    # L = k^2, so 2k - 0 > 4 k^2 holds for k < 1/2 only
    assert rep.passed is False
    small = probe_dissipativity(build_ou_model(k=0.2), n_pairs=128)
    assert small.passed


def test_dissipativity_requires_common_mu():
    model = build_example_model()
    with pytest.raises(ValueError):
        probe_dissipativity(model, default_pair_sampler(model, common_mu=False), n_pairs=64)


def test_dissipativity_p_mode():
    model = build_example_model(Example61Params.for_order(p=3))
    rep = probe_dissipativity(model, n_pairs=64, p_mode="any")
    assert rep.p in (1, 2, 3)
    with pytest.raises(ValueError):
        probe_dissipativity(model, n_pairs=4, p_mode="some")
