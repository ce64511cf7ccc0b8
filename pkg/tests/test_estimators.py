from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from mlsg import schedules as sch
from mlsg.estimators import (
    LevelStats,
    fit_rate_constant,
    level_slope,
    mlmc_gradient,
    optimal_sample_sizes,
    pair_cost,
    rmlmc_gradient,
    rmlmc_term,
    sample_level,
    screen_levels,
)
from mlsg.fem import FeField, l2_norm
from mlsg.field import Streams
from mlsg.pde import ProblemData, grad_f

DATA = ProblemData()
R = sch.default_params(sch.RMLSG)
XI = np.array([-0.2, 0.8, 0.1, -0.6])


def control(level=0):
    return FeField.interpolate(lambda x, y: 50 * x * (1 - x) * y, level)


def test_single_level_collapse():
    s = Streams(1)
    u = control()
    out = mlmc_gradient(u, 0, [1], DATA, s, j=3)
    ref = grad_f(0, s.xi(3, 0, 0), u, DATA)
    np.testing.assert_array_equal(out.grad.coeffs, ref.coeffs)
    assert out.model_cost == 2


@pytest.mark.parametrize("L", [1, 2, 3])
def test_telescoping_with_shared_xi(L):
    u = control(1)
    out = mlmc_gradient(u, L, [1] * (L + 1), DATA, Streams(0), xi_override=XI)
    ref = grad_f(L, XI, u, DATA)
    assert out.grad.level == L
    assert np.max(np.abs(out.grad.coeffs - ref.coeffs)) <= 1e-12 * max(1, np.abs(ref.coeffs).max())


def test_model_cost_example():
    out = mlmc_gradient(FeField.zeros(0), 2, [4, 2, 1], DATA, Streams(0))
    assert out.model_cost == 68
    assert out.samples_used == [4, 2, 1]
    assert pair_cost(0, 2) == 2 and pair_cost(2, 2) == 40


@pytest.mark.parametrize("N", [[], [1, 1], [0]])
def test_mlmc_rejects_bad_sample_vectors(N):
    with pytest.raises(ValueError):
        mlmc_gradient(FeField.zeros(0), 0, N, DATA, Streams(0))


def test_randomized_level_zero():
    s = Streams(2)
    u = control()
    out = rmlmc_gradient(u, 0, [1.0], DATA, s, j=4)
    assert out.sampled_level == 0
    np.testing.assert_array_equal(out.grad.coeffs, grad_f(0, s.xi(4, 0, 0), u, DATA).coeffs)


@pytest.mark.parametrize("L", [1, 2, 3])
def test_randomized_enumeration_identity(L):
    u = control()
    pmf = sch.level_pmf(R, L)
    total = sum(pmf[l] * rmlmc_term(u, l, pmf, XI, DATA).coeffs for l in range(L + 1))
    ref = grad_f(L, XI, u, DATA).coeffs
    assert np.max(np.abs(total - ref)) <= 1e-12 * max(1, np.abs(ref).max())


def test_level_sampler():
    pmf = sch.level_pmf(R, 1)
    assert sample_level(pmf, 0.0) == 0
    assert sample_level(pmf, 0.88) == 0
    assert sample_level(pmf, 8 / 9 + 1e-9) == 1
    assert sample_level(pmf, 0.999999) == 1
    counts = np.bincount([sample_level(sch.level_pmf(R, 2), u)
                          for u in np.random.default_rng(0).random(20000)], minlength=3)
    np.testing.assert_allclose(counts / 20000, [64 / 73, 8 / 73, 1 / 73], atol=0.01)


def test_randomized_draw_follows_uniform():
    pmf = sch.level_pmf(R, 1)
    seen = set()
    for seed in range(40):
        s = Streams(seed)
        out = rmlmc_gradient(FeField.zeros(0), 1, pmf, DATA, s, j=1)
        expected = 0 if s.level_uniform(1) < 8 / 9 else 1
        assert out.sampled_level == expected
        assert out.model_cost == pair_cost(expected, 2.0)
        assert out.grad.level == 1
        seen.add(expected)
    assert seen == {0, 1}


@pytest.mark.parametrize("pmf", [[0.5, 0.4], [1.0, 0.0], [-0.1, 1.1]])
def test_randomized_rejects_bad_pmf(pmf):
    with pytest.raises(ValueError):
        rmlmc_gradient(FeField.zeros(0), 1, pmf, DATA, Streams(0))


def reversed_mapper(func, items):
    items = list(items)
    out = [func(x) for x in reversed(items)]
    return out[::-1]


def test_parallelism_invariance():
    u = control()
    args = (u, 2, [5, 3, 2], DATA, Streams(9))
    serial = mlmc_gradient(*args, j=7).grad.coeffs
    backwards = mlmc_gradient(*args, j=7, mapper=reversed_mapper).grad.coeffs
    with ThreadPoolExecutor(4) as pool:
        threaded = mlmc_gradient(*args, j=7, mapper=pool.map).grad.coeffs
    assert np.array_equal(serial, backwards)
    assert np.array_equal(serial, threaded)


def test_variance_decreases_with_samples():
    u = FeField.zeros(0)

    def spread(N):
        draws = np.array([mlmc_gradient(u, 1, N, DATA, Streams(100 + r)).grad.coeffs
                          for r in range(30)])
        dev = draws - draws.mean(axis=0)
        return np.mean([l2_norm(FeField(1, d)) ** 2 for d in dev])

    small, large = spread([2, 1]), spread([8, 1])
    # four times the samples should cut the dominant level-0 variance by about 4
    assert large < 0.5 * small


def test_screening_zero_differences():
    data = ProblemData(z_d=lambda x, y: 0 * x)
    u = -data.source(0)
    stats = screen_levels(u, 3, 4, data, Streams(0))
    assert np.all(stats.moments[1:] == 0)
    assert stats.moments[0] == pytest.approx(data.beta**2 * l2_norm(u) ** 2)
    with pytest.raises(ValueError):
        fit_rate_constant(stats)


def test_screening_deterministic_and_decaying():
    a = screen_levels(FeField.zeros(0), 3, 12, DATA, Streams(4), keep_samples=True)
    b = screen_levels(FeField.zeros(0), 3, 12, DATA, Streams(4))
    assert np.array_equal(a.moments, b.moments)
    assert a.samples.shape == (12, 4)
    np.testing.assert_allclose(a.h, [2**-3, 2**-4, 2**-5, 2**-6])
    ratios = a.moments[2:] / a.moments[1:-1]
    assert np.all(ratios < 1)
    assert -5 <= level_slope(a) <= -3


def test_screening_needs_two_samples():
    with pytest.raises(ValueError):
        screen_levels(FeField.zeros(0), 2, 1, DATA, Streams(0))


def synthetic(moments):
    h = 0.125 * 2.0 ** -np.arange(len(moments))
    return LevelStats(np.asarray(moments, dtype=float), h, 100)


def test_fit_rate_constant_examples():
    h = 0.125 * 2.0 ** -np.arange(5)
    assert fit_rate_constant(synthetic(3 * h**4)) == pytest.approx(3, rel=1e-12)
    noisy = 3 * h**4 * np.array([1, 1.1, 0.9, 1.1, 0.9])
    c = fit_rate_constant(synthetic(noisy))
    # geometric mean of (1.1, 0.9, 1.1, 0.9) is sqrt(0.99)
    assert c == pytest.approx(3 * np.sqrt(0.99), rel=1e-12)
    assert 2.7 <= c <= 3.3
    single = synthetic([1.0, 2e-5])
    assert fit_rate_constant(single) == pytest.approx(2e-5 / h[1] ** 4, rel=1e-12)
    assert level_slope(synthetic(h**4)) == pytest.approx(-4, abs=1e-12)


def test_optimal_sample_sizes():
    assert list(optimal_sample_sizes(1.0, [1.0], [1.0])) == [1]
    assert list(optimal_sample_sizes(0.1, [1, 1 / 16], [1, 4])) == [150, 19]
    V, C = np.array([0.7, 0.03, 0.002]), np.array([1.0, 4.0, 16.0])
    base = 0.01**-2 * np.sqrt(V / C) * np.sum(np.sqrt(V * C))
    doubled = optimal_sample_sizes(0.01, 2 * V, C)
    np.testing.assert_array_equal(doubled, np.ceil(2 * base - 1e-9).astype(int))
    for bad in [(0.0, [1], [1]), (0.1, [1], [0]), (0.1, [-1], [1])]:
        with pytest.raises(ValueError):
            optimal_sample_sizes(*bad)
