import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvslowfast.errors import NonFiniteError
from mvslowfast.measure import (EmpiricalMeasure, directional_derivative, integrate,
                                lions_derivative, wasserstein2)


def brute_w2(a, b):
    # exact optimum over all permutations for equal-size uniform clouds
    best = math.inf
    for perm in itertools.permutations(range(a.shape[0])):
        best = min(best, np.mean(np.sum((a - b[list(perm)]) ** 2, axis=1)))
    return math.sqrt(best)


def test_weights_validated():
    with pytest.raises(ValueError):
        EmpiricalMeasure([0.0, 1.0], [0.5, 0.6])
    with pytest.raises(ValueError):
        EmpiricalMeasure([0.0, 1.0], [1.5, -0.5])
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.empty((0, 1)))
    with pytest.raises(NonFiniteError):
        EmpiricalMeasure([0.0, np.inf])
    mu = EmpiricalMeasure([[1.0], [3.0]])
    assert mu.atoms.flags.writeable is False


def test_w2_point_cases():
    mu = EmpiricalMeasure([0.3, -1.0, 2.0])
    assert wasserstein2(mu, mu) == 0.0
    assert wasserstein2(EmpiricalMeasure.dirac(0.0), EmpiricalMeasure.dirac(2.0)) == pytest.approx(2.0)


def test_w2_two_atoms_matches_brute_force():
    a = np.array([[0.0], [2.0]])
    b = np.array([[1.0], [3.0]])
    assert brute_w2(a, b) == pytest.approx(1.0)
    assert wasserstein2(EmpiricalMeasure(a), EmpiricalMeasure(b)) == pytest.approx(1.0)


def test_w2_weighted_quantile_coupling():
    # half the mass of delta_0 moves to 1, half to 3: cost (1 + 9) / 2
    mu = EmpiricalMeasure([0.0])
    nu = EmpiricalMeasure([1.0, 3.0])
    assert wasserstein2(mu, nu) == pytest.approx(math.sqrt(5.0))
    nu_w = EmpiricalMeasure([1.0, 3.0], [0.25, 0.75])
    assert wasserstein2(mu, nu_w) == pytest.approx(math.sqrt(0.25 + 0.75 * 9))


def test_w2_multidim_assignment_matches_permutations():
    rng = np.random.default_rng(3)
    for _ in range(5):
        a = rng.normal(size=(5, 2))
        b = rng.normal(size=(5, 2))
        assert wasserstein2(EmpiricalMeasure(a), EmpiricalMeasure(b)) == pytest.approx(brute_w2(a, b))


def test_w2_errors():
    with pytest.raises(ValueError):
        wasserstein2(EmpiricalMeasure(np.zeros((2, 1))), EmpiricalMeasure(np.zeros((2, 2))))
    with pytest.raises(NotImplementedError):
        wasserstein2(EmpiricalMeasure(np.zeros((20, 2))), EmpiricalMeasure(np.ones((20, 2))))


clouds = st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=12)


@settings(max_examples=200, deadline=None)
@given(clouds, clouds, clouds)
def test_w2_metric_axioms(a, b, c):
    ma, mb, mc = (EmpiricalMeasure(v) for v in (a, b, c))
    ab, ba = wasserstein2(ma, mb), wasserstein2(mb, ma)
    assert ab >= 0
    assert ab == ba
    assert wasserstein2(ma, ma) == 0.0
    assert ab <= wasserstein2(ma, mc) + wasserstein2(mc, mb) + 1e-10


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-20, 20), st.floats(-20, 20)), min_size=1, max_size=30))
def test_w2_below_paired_rms(pairs):
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    rms = math.sqrt(np.mean((x - y) ** 2))
    assert wasserstein2(EmpiricalMeasure(x), EmpiricalMeasure(y)) <= rms + 1e-10


def test_integrate_examples():
    assert integrate(EmpiricalMeasure.dirac(3.0), lambda z: z[:, 0]) == pytest.approx(3.0)
    assert integrate(EmpiricalMeasure([-1.0, 1.0]), lambda z: z[:, 0] ** 2) == pytest.approx(1.0)
    want = (math.atan(0) + math.atan(1) + math.atan(2)) / 3
    assert integrate(EmpiricalMeasure([0.0, 1.0, 2.0]), lambda z: np.arctan(z[:, 0])) == pytest.approx(want)


def test_integrate_reports_bad_atom():
    mu = EmpiricalMeasure([1.0, 0.0, 2.0])
    with pytest.raises(NonFiniteError) as info:
        integrate(mu, lambda z: 1.0 / z[:, 0])
    assert info.value.index == 1
    assert info.value.atom[0] == 0.0


def dense_lions(f, mu, i, h=1e-5):
    # oracle: gradient of the N-variable function over all atoms, read at atom i
    grads = []
    for k in range(mu.n_atoms):
        p, m = np.array(mu.atoms), np.array(mu.atoms)
        p[k, 0] += h
        m[k, 0] -= h
        grads.append((f(EmpiricalMeasure(p)) - f(EmpiricalMeasure(m))) / (2 * h))
    return mu.n_atoms * grads[i]


def test_lions_linear_functional_is_one():
    f = lambda mu: float(mu.mean[0])
    mu = EmpiricalMeasure([0.5, -2.0, 7.0])
    for i in range(3):
        assert lions_derivative(f, mu, i)[0] == pytest.approx(1.0, abs=1e-8)


def test_lions_square_of_mean():
    f = lambda mu: float(mu.mean[0]) ** 2
    mu = EmpiricalMeasure([1.0, 3.0])
    est = lions_derivative(f, mu, 0)[0]
    assert est == pytest.approx(4.0, abs=1e-6)
    assert est == pytest.approx(dense_lions(f, mu, 0), abs=1e-5)


def test_lions_second_moment():
    f = lambda mu: mu.second_moment
    mu = EmpiricalMeasure([-2.0, 5.0])
    est = lions_derivative(f, mu, 1)[0]
    assert est == pytest.approx(10.0, abs=1e-6)
    assert est == pytest.approx(dense_lions(f, mu, 1), abs=1e-5)


@pytest.mark.parametrize("h", [1e-6, 1e-5, 1e-4, 1e-3])
def test_lions_linear_kernel_h_independent(h):
    # f = int sin, kernel derivative cos(atom)
    f = lambda mu: float(mu.expect(lambda z: np.sin(z[:, 0])))
    mu = EmpiricalMeasure([0.2, 1.1, -0.7])
    assert lions_derivative(f, mu, 2, h)[0] == pytest.approx(math.cos(-0.7), abs=1e-6)


def test_lions_linear_exact_for_quadratic_kernel():
    f = lambda mu: mu.second_moment
    mu = EmpiricalMeasure([0.4, -1.3, 2.2])
    vals = [lions_derivative(f, mu, 0, h)[0] for h in (1e-6, 1e-5, 1e-4, 1e-3)]
    assert np.ptp(vals) < 1e-8


def test_lions_rejects_bad_bump():
    with pytest.raises(ValueError):
        lions_derivative(lambda mu: 0.0, EmpiricalMeasure([1.0]), 0, h=0.0)


def test_directional_matches_average_of_lions():
    f = lambda mu: np.array([mu.second_moment, float(mu.expect(lambda z: np.cos(z[:, 0])))])
    mu = EmpiricalMeasure([0.3, -0.5, 1.7, 2.0])
    U = np.array([[1.0], [-2.0], [0.5], [0.25]])
    want = np.zeros(2)
    for j in range(4):
        gj = np.array([2 * mu.atoms[j, 0], -math.sin(mu.atoms[j, 0])])
        want += mu.weights[j] * gj * U[j, 0]
    assert directional_derivative(f, mu, U) == pytest.approx(want, abs=1e-7)
    assert np.all(directional_derivative(f, mu, np.zeros_like(U)) == 0)


def test_fingerprint_and_from_cloud():
    atoms = np.random.default_rng(0).normal(size=(50, 1))
    a = EmpiricalMeasure(atoms)
    b = EmpiricalMeasure.from_cloud(atoms)
    assert a.fingerprint() == b.fingerprint()
    assert b.second_moment == pytest.approx(a.second_moment)
