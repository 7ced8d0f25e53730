import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ofdm_isac.estimate import (
    EstimationError,
    GridConfig,
    associate,
    brute_force_assignment,
    circular_cost,
    match_to_truth,
    music_estimate,
    omp_estimate,
    rmse,
)
from ofdm_isac.harness import simulate_trial
from ofdm_isac.waveform import allocate_resources, delay_response, steering_vector, synthesize_transmit

DF = 250e3


def _monostatic(x0, mask, targets):
    """Noiseless monostatic echoes ``sum g <a*(th), x> d_n(2 tau) a(th)``."""
    y = np.zeros(x0.shape, complex)
    n = np.arange(x0.shape[0])
    for g, th, tau in targets:
        a = steering_vector(th, x0.shape[-1])
        y += g * (x0 @ a)[..., None] * delay_response(n, 2 * tau, DF)[:, None, None] * a
    return np.where(mask[..., None], y, 0)


@pytest.fixture
def grid_x0():
    rng = np.random.default_rng(0)
    alloc = allocate_resources(64, 30, 32, 32, 8, rng)
    tx = synthesize_transmit(alloc, [0.05, 0.05], 6, rng)
    return alloc, tx.x[0]


# --------------------------------------------------------------------------
# MUSIC


def test_music_noiseless_single_source():
    rng = np.random.default_rng(1)
    s = rng.standard_normal(200) + 1j * rng.standard_normal(200)
    y = (s[:, None] * steering_vector(0.3, 6))[:, None, :]  # (200, 1, 6)
    spec = music_estimate(y, np.ones((200, 1), bool), 1)
    assert spec.peaks[0] == pytest.approx(0.3, abs=1e-4)


def test_music_zero_sources(grid_x0):
    alloc, x0 = grid_x0
    y = np.random.default_rng(2).standard_normal(x0.shape) + 0j
    spec = music_estimate(y, alloc.mask(0), 0)
    assert spec.peaks.size == 0 and spec.spectrum.size == 721


def test_music_peaks_are_local_maxima():
    rng = np.random.default_rng(3)
    sig = rng.standard_normal((500, 2)) + 1j * rng.standard_normal((500, 2))
    A = steering_vector(np.array([-0.4, 0.5]), 6)
    noise = 0.01 * (rng.standard_normal((500, 6)) + 1j * rng.standard_normal((500, 6)))
    y = (sig @ A.T + noise)[:, None, :]
    spec = music_estimate(y, np.ones((500, 1), bool), 2)
    assert np.all(np.diff(spec.peak_values) <= 0)
    np.testing.assert_allclose(np.sort(spec.peaks), [-0.4, 0.5], atol=2e-3)
    for p, v in zip(spec.peaks, spec.peak_values):
        assert v >= spec.evaluate(p - 1e-4)[0] and v >= spec.evaluate(p + 1e-4)[0]


def test_music_scale_invariance(config):
    _, alloc, _, rx = simulate_trial(config, 32, 32, 8, np.random.default_rng(4))
    a = music_estimate(rx.y, alloc.mask(0), 2)
    b = music_estimate(7.3 * rx.y, alloc.mask(0), 2)
    np.testing.assert_array_equal(a.peaks, b.peaks)


def test_music_errors():
    y = np.zeros((3, 1, 6), complex)
    with pytest.raises(EstimationError):
        music_estimate(y, np.ones((3, 1), bool), 1)  # fewer snapshots than antennas
    with pytest.raises(ValueError):
        music_estimate(np.zeros((10, 1, 6), complex), np.ones((10, 1), bool), 6)


def test_music_strongest_peak_is_interferer(config):
    hits = 0
    trials = 100
    for t in range(trials):
        params, alloc, _, rx = simulate_trial(config, 32, 32, 8, np.random.default_rng(100 + t))
        spec = music_estimate(rx.y, alloc.mask(0), 2)
        hits += abs(spec.peaks[0] - params.aoa[0]) < 0.02
    assert hits / trials >= 0.95


# --------------------------------------------------------------------------
# OMP


def test_omp_noiseless_single_target(grid_x0):
    alloc, x0 = grid_x0
    mask = alloc.clean_mask
    tau, th = 4.9586e-8, 1.2278
    y = _monostatic(x0, mask, [(2e-6 * np.exp(0.7j), th, tau)])
    res = omp_estimate(y, x0, mask, 1, DF)
    assert res.delays[0] == pytest.approx(tau, abs=1e-10)
    assert res.angles[0] == pytest.approx(th, abs=1e-4)


def test_omp_exact_sparse_representation(grid_x0):
    alloc, x0 = grid_x0
    mask = alloc.clean_mask
    c = np.arcsin(1 / 3)  # a(0) and a(c) are orthogonal for six antennas
    grid = GridConfig(n_angle=39, angle_min=-2 * c, angle_max=2 * c, zoom_rounds=0)
    taus = grid.delay_grid()
    targets = [(1.0, 0.0, taus[50]), (0.8j, grid.angle_grid()[29], taus[120])]
    assert grid.angle_grid()[29] == pytest.approx(c)
    y = _monostatic(x0, mask, targets)
    res = omp_estimate(y, x0, mask, 2, DF, grid)
    assert res.residual_norms[-1] < 1e-8 * res.residual_norms[0]


def test_omp_residual_nonincreasing(config):
    for seed in range(5):
        _, alloc, tx, rx = simulate_trial(config, 32, 32, 8, np.random.default_rng(seed))
        res = omp_estimate(rx.y, tx.x[0], alloc.mask(0), 4, DF, refine_cycles=1)
        r = np.array(res.residual_norms)
        assert np.all(np.diff(r[:5]) <= 1e-12 * r[0])


def test_omp_zero_observation(grid_x0):
    alloc, x0 = grid_x0
    with pytest.raises(EstimationError):
        omp_estimate(np.zeros_like(x0), x0, alloc.mask(0), 1, DF)


def test_omp_empty_mask(grid_x0):
    alloc, x0 = grid_x0
    with pytest.raises(EstimationError):
        omp_estimate(x0, x0, np.zeros(alloc.mask(0).shape, bool), 1, DF)


def test_duplicate_atoms_use_regularized_solve():
    from ofdm_isac.estimate import _project

    rng = np.random.default_rng(0)
    h = rng.standard_normal(50) + 1j * rng.standard_normal(50)
    y = 2.0 * h
    with pytest.warns(RuntimeWarning, match="rank-deficient"):
        gains, r = _project(np.stack([h, h], axis=1), y)
    assert np.linalg.norm(r) < 1e-6 * np.linalg.norm(y)
    assert gains.sum() == pytest.approx(2.0, abs=1e-6)


def test_omp_delays_in_range(config):
    _, alloc, tx, rx = simulate_trial(config, 32, 32, 8, np.random.default_rng(7))
    grid = GridConfig.for_spacing(DF)
    res = omp_estimate(rx.y, tx.x[0], alloc.clean_mask, 2, DF, grid)
    assert np.all(res.delays >= 0) and np.all(res.delays <= grid.delay_max * 1.01)
    assert np.all(np.abs(res.angles) <= np.pi)


def test_grid_defaults():
    g = GridConfig.for_spacing(DF)
    assert g.delay_max == pytest.approx(1e-6)
    assert g.delay_grid().size == 512 and g.angle_grid().size == 721
    assert g.angle_grid()[0] > -np.pi / 2 and g.angle_grid()[-1] < np.pi / 2


# --------------------------------------------------------------------------
# association


def test_identity_association():
    a = associate([1e-8, 2e-8], [0.1, 0.9], [0.1, 0.9], [5.0, 1.0])
    assert np.array_equal(a.assignment, np.eye(2, dtype=int))
    assert np.trace(a.assignment.T @ circular_cost(np.array([0.1, 0.9])[:, None],
                                                  np.array([0.1, 0.9])[None, :])) == 0


def test_wraparound_cost():
    assert circular_cost(np.pi - 0.05, -np.pi + 0.05) == pytest.approx(0.01, rel=1e-9)


def test_single_target_takes_music_angle():
    a = associate([1e-8], [0.31], [0.30], [2.0])
    assert np.array_equal(a.assignment, [[1]])
    assert a.interferer == 0
    assert a.updated_angles[0] == pytest.approx(0.30)


def test_only_interferer_angle_replaced():
    a = associate([1e-8, 2e-8, 3e-8], [0.5, -0.2, 1.0], [1.01, 0.52, -0.21], [1.0, 9.0, 3.0])
    # strongest MUSIC peak (0.52) is matched to OMP pair 0
    assert a.interferer == 1
    np.testing.assert_allclose(a.updated_angles, [0.52, -0.2, 1.0])


def test_association_length_mismatch():
    with pytest.raises(ValueError):
        associate([1e-8], [0.1, 0.2], [0.1, 0.2], [1.0, 2.0])


angles = st.floats(-np.pi, np.pi, allow_nan=False)


@given(angles, angles)
def test_circular_cost_symmetric(a, b):
    assert circular_cost(a, b) == pytest.approx(circular_cost(b, a), abs=1e-15)
    assert circular_cost(a, b) <= np.pi**2 + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.data())
def test_assignment_matches_brute_force(s, data):
    th = np.array(data.draw(st.lists(angles, min_size=s, max_size=s)))
    mu = np.array(data.draw(st.lists(angles, min_size=s, max_size=s)))
    a = associate(np.zeros(s), th, mu, np.arange(s, dtype=float))
    cost = circular_cost(th[:, None], mu[None, :])
    X = a.assignment
    assert np.array_equal(X.sum(axis=0), np.ones(s)) and np.array_equal(X.sum(axis=1), np.ones(s))
    best, _ = brute_force_assignment(cost)
    assert np.sum(X * cost) == pytest.approx(best, abs=1e-12)


def test_assignment_beats_random_permutations():
    rng = np.random.default_rng(0)
    for _ in range(10):
        s = 6
        th, mu = rng.uniform(-np.pi, np.pi, (2, s))
        a = associate(np.zeros(s), th, mu, rng.random(s))
        cost = circular_cost(th[:, None], mu[None, :])
        total = np.sum(a.assignment * cost)
        for _ in range(100):
            perm = rng.permutation(s)
            assert total <= cost[np.arange(s), perm].sum() + 1e-12


def test_brute_force_small():
    cost = np.array([[4.0, 1.0], [2.0, 8.0]])
    best, perm = brute_force_assignment(cost)
    assert best == 3.0 and list(perm) == [1, 0]
    assert len(list(itertools.permutations(range(3)))) == 6


# --------------------------------------------------------------------------
# RMSE


def test_rmse_perfect():
    r = rmse([([1e-8, 2e-8], [0.1, 0.5])] * 3, [1e-8, 2e-8], [0.1, 0.5])
    assert np.all(r.delay == 0) and np.all(r.angle == 0)


def test_rmse_constant_bias():
    r = rmse([([1e-8 + 2e-9, 2e-8 + 2e-9], [0.1, 0.5])] * 4, [1e-8, 2e-8], [0.1, 0.5])
    np.testing.assert_allclose(r.delay, [2e-9, 2e-9], rtol=1e-9)


def test_rmse_single_trial():
    r = rmse([([4e-8 + 3e-9], [0.2])], [4e-8], [0.2])
    assert r.delay[0] == pytest.approx(3e-9, rel=1e-9)


def test_rmse_matches_by_angle_and_wraps():
    # estimates listed in swapped order; second angle wraps across pi
    est = ([2e-8, 1e-8], [-np.pi + 0.01, 0.1])
    r = rmse([est], [1e-8, 2e-8], [0.1, np.pi - 0.01])
    np.testing.assert_allclose(r.delay, 0, atol=1e-20)
    np.testing.assert_allclose(r.angle, [0, 0.02], atol=1e-12)


def test_rmse_failures():
    r = rmse([None, ([1e-8], [0.1])], [1e-8], [0.1])
    assert r.failures == 1 and r.successes == 1
    with pytest.raises(EstimationError):
        rmse([None, None], [1e-8], [0.1])


def test_match_to_truth_permutation():
    idx = match_to_truth([0.5, -0.3, 1.1], [1.0, 0.4, -0.2])
    assert list(idx) == [2, 0, 1]
