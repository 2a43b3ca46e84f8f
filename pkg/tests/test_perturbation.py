import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nishimori_lab import perturbation as pt


def binary_realization(lam_k, sites, xis, N=2, lambda0=0.75, Z=None):
    """Hand-built single-channel realization."""
    lam = pt.LambdaVector("binary", 1, np.asarray(lambda0), np.array([lam_k]), np.zeros(0))
    sites = np.asarray(sites, dtype=np.int64)
    return pt.PerturbationRealization(
        np.zeros(N) if Z is None else Z,
        np.array([sites.size]),
        sites,
        np.zeros(sites.size, dtype=np.int64),
        np.asarray(xis, dtype=float),
        lam,
        pt.make_schedules(N),
    )


def test_draw_lambda_dyadic_intervals():
    lam = pt.draw_lambda(3, "binary", 4)
    for k, v in enumerate(lam.lambda_k, start=1):
        assert 2.0 ** (-k - 1) <= v <= 2.0**-k
    assert 0.5 <= float(lam.lambda0) <= 1.0


def test_draw_lambda_seeded():
    a, b = pt.draw_lambda(3, "binary", 12), pt.draw_lambda(3, "binary", 12)
    assert a.to_dict() == b.to_dict()
    assert a.to_dict() != pt.draw_lambda(3, "binary", 13).to_dict()


def test_lambda0_range_k1():
    for seed in range(20):
        assert 0.5 <= float(pt.draw_lambda(1, "binary", seed).lambda0) <= 1.0


def test_soft_lambda_intervals():
    lam = pt.draw_lambda(3, "soft", 1)
    for k, v in enumerate(lam.gauss_lambdas, start=1):
        assert 2.0 ** (-k - 1) <= v <= 2.0**-k
    assert lam.lambda_I.size == len(pt.multi_index_list())
    assert np.all((lam.lambda_I >= 0.5) & (lam.lambda_I <= 1.0))


def test_draw_lambda_rejects_bad_input():
    with pytest.raises(pt.PerturbationError):
        pt.draw_lambda(0, "binary", 0)
    with pytest.raises(pt.PerturbationError):
        pt.draw_lambda(2, "fuzzy", 0)


def test_stratified_draws_cover_each_stratum():
    n = 8
    draws = pt.stratified_lambdas(2, "binary", n, 3)
    u0 = np.array([(float(d.lambda0) - 0.5) / 0.5 for d in draws])
    assert sorted(np.floor(u0 * n).astype(int)) == list(range(n))


def test_schedules_defaults_and_limits():
    s = pt.make_schedules(16)
    assert s.eps_N == pytest.approx(16**-0.5)
    assert s.s_N == pytest.approx(16**0.75)
    big = pt.make_schedules(10**8)
    assert big.eps_N <= 1 and big.s_N / 10**8 < 1e-1 and big.s_N / 10**4 > 1
    with pytest.raises(pt.PerturbationError):
        pt.make_schedules(4, eps_exponent=1.2)
    with pytest.raises(pt.PerturbationError):
        pt.make_schedules(4, s_exponent=0.4)


def test_poisson_mean_matches_s_N():
    N = 4
    sched = pt.make_schedules(N, s_scale=9 / N**0.75)
    assert sched.s_N == pytest.approx(9.0)
    lam = pt.draw_lambda(2, "binary", 0)
    counts = np.concatenate(
        [pt.sample_perturbation(np.ones(N), lam, sched, seed).pi for seed in range(500)]
    )
    se = math.sqrt(9.0 / counts.size)
    assert abs(counts.mean() - 9.0) <= 3 * se


def test_exponential_noises_positive_and_sites_in_range():
    r = pt.sample_perturbation(np.array([1.0, -1.0, 1.0]), pt.draw_lambda(3, "binary", 1), pt.make_schedules(3), 5)
    assert np.all(r.xi > 0)
    assert np.all((r.obs_site >= 0) & (r.obs_site < 3))
    assert r.obs_site.size == r.pi.sum()


def test_exponential_observation_half_rate():
    # rate 1 + (1/2)(-1) = 1/2, so Y = 2 xi with mean 2
    r = binary_realization(0.5, [0] * 20_000, np.random.default_rng(0).exponential(size=20_000), N=1)
    y = pt.exponential_observations(r, np.array([-1.0]))
    np.testing.assert_allclose(y, 2 * r.xi)
    assert abs(y.mean() - 2.0) < 3 * 2 / math.sqrt(y.size)


def test_sample_perturbation_seeded():
    lam, sched = pt.draw_lambda(2, "binary", 0), pt.make_schedules(3)
    a = pt.sample_perturbation(np.ones(3), lam, sched, 8)
    b = pt.sample_perturbation(np.ones(3), lam, sched, 8)
    assert np.array_equal(a.xi, b.xi) and np.array_equal(a.Z, b.Z) and np.array_equal(a.obs_site, b.obs_site)


def test_gaussian_hamiltonian_examples():
    one = np.ones(2)
    # eps_N * lambda0 = 1: 2 + 0 - 1
    assert pt.gaussian_hamiltonian(one, one, np.zeros(2), 1.0, 1.0) == pytest.approx(1.0)
    assert pt.gaussian_hamiltonian(np.array([1.0, -1.0]), one, np.ones(2), 0.0, 0.5) == 0.0
    assert pt.gaussian_hamiltonian(np.zeros(3), np.ones(3), np.ones((3, 2)), np.array([0.3, 0.2]), 0.5) == 0.0
    with pytest.raises(pt.PerturbationError):
        pt.gaussian_hamiltonian(one, one, np.zeros(2), 1.0, -0.1)


def test_exponential_hamiltonian_empty_sum():
    r = binary_realization(0.5, [], [])
    assert pt.exponential_hamiltonian(np.ones(2), np.ones(2), r) == 0.0


def test_exponential_hamiltonian_single_term():
    r = binary_realization(0.5, [0], [1.0])
    expected = math.log(1.5) - 0.5 * 1.0 / 1.5
    assert pt.exponential_hamiltonian(np.ones(2), np.ones(2), r) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.072132, abs=5e-7)


def test_exponential_hamiltonian_unit_observations():
    signal = np.array([1.0, -1.0, 1.0])
    lam, sites = 0.25, np.array([0, 1, 2, 1])
    r = binary_realization(lam, sites, 1.0 + lam * signal[sites], N=3)
    assert np.allclose(pt.exponential_observations(r, signal), 1.0)
    expected = sum(math.log(1 + lam * signal[i]) - lam * signal[i] for i in sites)
    assert pt.exponential_hamiltonian(signal, signal, r) == pytest.approx(expected, abs=1e-14)


def test_polynomial_basis_examples():
    P = pt.polynomial_basis(pt.PolynomialIndex(1, (0.5,), 0))
    np.testing.assert_allclose(P(np.linspace(-1, 1, 5)), 0.25)
    I = pt.PolynomialIndex(3, (0.125, 0.5, 0.25), 4)
    assert pt.polynomial_basis(I)(0.0) == pytest.approx(I.scale * 0.125)


def test_polynomial_sup_bounds_and_ranks():
    idx = pt.multi_index_list()
    xs = np.linspace(-1, 1, 401)
    for I in idx:
        vals = pt.polynomial_basis(I)(xs)
        assert np.max(np.abs(vals)) <= I.sup_bound + 1e-15
        assert I.sup_bound <= 0.5
    assert [I.iota for I in idx] == list(range(len(idx)))
    with pytest.raises(pt.PerturbationError):
        pt.PolynomialIndex(1, (0.3,), 0)


def test_channel_transform_soft_uses_table():
    idx = pt.multi_index_list()
    x = np.array([-1.0, -0.3, 0.4, 1.0])
    for c in (0, 5, len(idx) - 1):
        np.testing.assert_allclose(pt.channel_transform("soft", x, c), pt.polynomial_basis(idx[c])(x), atol=1e-16)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.floats(0.5, 1.0), st.integers(0, 2**31))
def test_gaussian_hamiltonian_is_log_likelihood(N, lambda0, seed):
    rng = np.random.default_rng(seed)
    signal = rng.choice([-1.0, 1.0], N)
    sigma = rng.choice([-1.0, 1.0], N)
    Z = rng.standard_normal(N)
    eps = 0.3
    a = math.sqrt(lambda0 * eps)
    y = a * signal + Z
    lhs = pt.gaussian_hamiltonian(signal, signal, Z, lambda0, eps) - pt.gaussian_hamiltonian(sigma, signal, Z, lambda0, eps)
    rhs = -0.5 * np.sum((y - a * sigma) ** 2) + 0.5 * np.sum((y - a * signal) ** 2)
    assert -lhs == pytest.approx(rhs, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.floats(0.0625, 0.5), st.integers(0, 2**31))
def test_exponential_hamiltonian_is_log_density_ratio(N, lam, seed):
    rng = np.random.default_rng(seed)
    signal = rng.choice([-1.0, 1.0], N)
    sigma = rng.choice([-1.0, 1.0], N)
    sites = rng.integers(0, N, 4)
    r = binary_realization(lam, sites, rng.exponential(size=4), N=N)
    y = pt.exponential_observations(r, signal)

    def log_density(s):
        rate = 1 + lam * s[sites]
        return np.sum(np.log(rate) - rate * y)

    lhs = pt.exponential_hamiltonian(sigma, signal, r) - pt.exponential_hamiltonian(signal, signal, r)
    assert lhs == pytest.approx(log_density(sigma) - log_density(signal), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31))
def test_exponential_hamiltonian_bound(N, seed):
    lam = pt.draw_lambda(3, "binary", seed)
    signal = np.random.default_rng(seed).choice([-1.0, 1.0], N)
    r = pt.sample_perturbation(signal, lam, pt.make_schedules(N), seed)
    bound = pt.exponential_hamiltonian_bound(r)
    sigmas = np.array(np.meshgrid(*[[-1.0, 1.0]] * N)).reshape(N, -1).T
    assert np.all(np.abs(pt.exponential_hamiltonian(sigmas, signal, r)) <= bound + 1e-12)


def test_pair_form_matches_term_sum():
    signal = np.array([1.0, -1.0])
    r = binary_realization(0.3, [1, 1, 1], [0.5, 1.2, 2.0])
    for s in ([1.0, 1.0], [1.0, -1.0]):
        s = np.array(s)
        per_term = pt.exponential_hamiltonian(s, signal, r)
        y = pt.exponential_observations(r, signal)
        pair = pt.pair_hamiltonian_obs(s[1], "binary", 0, 0.3, 3, y.sum())
        assert per_term == pytest.approx(pair, abs=1e-14)
