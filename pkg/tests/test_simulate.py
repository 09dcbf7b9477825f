import math

import numpy as np
import pytest

from conftest import scalar_model
from mjls_hidden import analysis, plants, simulate, synthesis
from mjls_hidden.chain import transition_matrix
from mjls_hidden.model import (FeedbackGains, InitialData, ObservationProcess, always_observe,
                               gilbert_elliott, iid_failures, mod_floor, never_observe,
                               periodic_with_failures)
from mjls_hidden.simulate import FixedStart, RngSpec


def check_path_invariants(paths, obs, T):
    f = np.asarray(obs.f)
    P, H = paths.r.shape
    for p in range(P):
        r, s, tau, sigma, delta = (a[p] for a in (paths.r, paths.s, paths.tau, paths.sigma, paths.delta))
        if f[s[0]]:
            assert sigma[0] == r[0] and delta[0] == 0 and tau[0] == 0
        for k in range(H):
            if f[s[k]]:
                assert tau[k] == k and sigma[k] == r[k] and delta[k] == 0
            else:
                assert k == 0 or tau[k] == tau[k - 1]
            if tau[k] >= 0:
                assert sigma[k] == r[tau[k]]
            assert delta[k] == mod_floor(k - tau[k], T)
        assert np.all(paths.rho[p] == delta + 1)


@pytest.mark.parametrize("obs,T", [
    (gilbert_elliott(0.3, 0.3), 3),
    (iid_failures(0.6), 2),
    (periodic_with_failures(3, 0.4), 5),
])
def test_path_invariants_on_random_paths(obs, T):
    model = plants.example2()
    init = InitialData([0.4, 0.6], np.full(obs.M, 1 / obs.M), np.full((2, T), 1 / (2 * T)))
    paths = simulate.sample_paths(model, obs, T, init, 40, n_paths=1000, rng=3)
    check_path_invariants(paths, obs, T)


def test_fixed_start_respects_initial_observation():
    model = plants.example2()
    obs = iid_failures(0.5)
    paths = simulate.sample_paths(model, obs, 3, FixedStart(1, 0, sigma0=0, delta0=2), 5, 4, rng=1)
    assert np.all(paths.sigma[:, 0] == 1) and np.all(paths.delta[:, 0] == 0)
    paths = simulate.sample_paths(model, obs, 3, FixedStart(1, 1, sigma0=0, delta0=2), 5, 4, rng=1)
    assert np.all(paths.sigma[:, 0] == 0) and np.all(paths.delta[:, 0] == 2)
    check_path_invariants(paths, obs, 3)


def test_always_observing_channel():
    paths = simulate.sample_paths(plants.example2(), always_observe(2), 3,
                                  InitialData.uniform(2, 2, 3), 100, 20, rng=0)
    np.testing.assert_array_equal(paths.sigma, paths.r)
    assert np.all(paths.rho == 1)


def test_never_observing_channel_cycles_phase():
    paths = simulate.sample_paths(plants.example2(), never_observe(1), 3, FixedStart(0, 0, 1, 0),
                                  30, 5, rng=0)
    expected = np.tile([1, 2, 3], 10)
    for p in range(5):
        np.testing.assert_array_equal(paths.rho[p], expected)
        assert np.all(paths.sigma[p] == 1)


def test_gilbert_elliott_observing_fraction():
    obs = gilbert_elliott(0.3, 0.3)
    n = 100_000
    paths = simulate.sample_paths(plants.example2(), obs, 1, InitialData.uniform(2, 2, 1), n, 1, rng=11)
    frac = paths.observed.mean()
    lam = 1 - 0.3 - 0.3  # lag-one autocorrelation of the channel indicator
    se = math.sqrt(0.25 / n * (1 + lam) / (1 - lam))
    assert abs(frac - 0.5) <= 3 * se


def gaps(paths):
    out = []
    for p in range(paths.n_paths):
        out.append(np.diff(paths.observation_times(p)))
    return np.concatenate(out)


def test_periodic_gaps_all_one():
    obs = periodic_with_failures(1, 1.0)
    paths = simulate.sample_paths(plants.example2(), obs, 1, FixedStart(0, 0), 10_000, 1, rng=2)
    g = gaps(paths)
    assert g.size == 9_999
    assert np.all(g == 1)


def test_periodic_gap_law():
    obs = periodic_with_failures(2, 0.5)
    paths = simulate.sample_paths(plants.example2(), obs, 1, FixedStart(0, 0), 4_200, 100, rng=5)
    g = gaps(paths)
    assert g.size >= 100_000
    assert np.all(g % 2 == 0)
    for k in range(1, 6):
        p = 0.5 ** k
        emp = np.mean(g == 2 * k)
        assert abs(emp - p) <= 3 * math.sqrt(p * (1 - p) / g.size)


def test_same_rng_spec_is_bit_identical():
    model = plants.example2()
    obs = iid_failures(0.5)
    gains = FeedbackGains(np.full((2, 2, 1, 2), 0.1))
    a = simulate.simulate_closed_loop(model, obs, 2, gains, [1, 2], InitialData.uniform(2, 2, 2),
                                      simulate.WhiteNoise(0.5), 50, 10, RngSpec(7, 3))
    b = simulate.simulate_closed_loop(model, obs, 2, gains, [1, 2], InitialData.uniform(2, 2, 2),
                                      simulate.WhiteNoise(0.5), 50, 10, RngSpec(7, 3))
    for key in ("x", "u", "z", "w"):
        assert np.array_equal(getattr(a, key), getattr(b, key))
    c = simulate.simulate_closed_loop(model, obs, 2, gains, [1, 2], InitialData.uniform(2, 2, 2),
                                      simulate.WhiteNoise(0.5), 50, 10, RngSpec(8, 3))
    assert not np.array_equal(a.x, c.x)


def test_paths_do_not_depend_on_batch_size():
    model = plants.example2()
    obs = iid_failures(0.5)
    small = simulate.sample_paths(model, obs, 2, InitialData.uniform(2, 2, 2), 30, 3, RngSpec(4))
    large = simulate.sample_paths(model, obs, 2, InitialData.uniform(2, 2, 2), 30, 10, RngSpec(4))
    np.testing.assert_array_equal(small.r, large.r[:3])
    shifted = simulate.sample_paths(model, obs, 2, InitialData.uniform(2, 2, 2), 30, 2, RngSpec(4, 1))
    np.testing.assert_array_equal(shifted.r, large.r[1:3])


def test_trajectory_recomputes_exactly(rng):
    model = plants.example2()
    obs = gilbert_elliott(0.2, 0.5)
    gains = FeedbackGains(rng.standard_normal((2, 3, 1, 2)))
    tr = simulate.simulate_closed_loop(model, obs, 3, gains, [1.0, -1.0], InitialData.uniform(2, 2, 3),
                                       simulate.WhiteNoise(1.0), 25, 4, rng=9)
    P = tr.paths
    for p in range(4):
        x = np.array([1.0, -1.0])
        for k in range(25):
            r, K = P.r[p, k], gains[P.sigma[p, k], P.delta[p, k]]
            u = K @ x
            z = model.C[r] @ x + model.D[r] @ u
            x_next = model.A[r] @ x + model.B[r] @ u + model.E[r] @ tr.w[p, k]
            np.testing.assert_allclose(tr.u[p, k], u, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(tr.z[p, k], z, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(tr.x[p, k + 1], x_next, rtol=1e-12, atol=1e-12)
            x = tr.x[p, k + 1]
    again = simulate.run_paths(model, gains, P, [1.0, -1.0], tr.w)
    assert np.array_equal(again.x, tr.x)


def test_no_control_authority_gives_open_loop(rng):
    model = plants.example2().with_matrices(B=[np.zeros((2, 1))] * 2)
    obs = iid_failures(0.5)
    init = InitialData.uniform(2, 2, 1)
    closed = simulate.simulate_closed_loop(model, obs, 1, FeedbackGains(rng.standard_normal((2, 1, 1, 2))),
                                           [1, 2], init, simulate.Cosine(), 40, 5, rng=1)
    open_ = simulate.simulate_closed_loop(model, obs, 1, FeedbackGains.zeros(model, 1),
                                          [1, 2], init, simulate.Cosine(), 40, 5, rng=1)
    np.testing.assert_array_equal(closed.x, open_.x)


def test_stabilized_second_moment_decays():
    model = plants.example2()
    obs = iid_failures(0.5)
    res = synthesis.synthesize_stabilizing(model, obs, 1)
    tr = simulate.simulate_closed_loop(model, obs, 1, res.gains, [1, 2], FixedStart(0, 0),
                                       None, 60, 300, rng=0)
    m = tr.mean_sq_x()
    k = np.arange(10, 40)
    slope = np.polyfit(k, np.log(m[k]), 1)[0]
    assert slope < 0
    assert m[40] < 1e-3 * m[0]


def test_transition_frequencies_single_state():
    freq, counts = simulate.empirical_transition_frequencies(scalar_model(0.5), always_observe(1),
                                                             1, 10_000, rng=0)
    np.testing.assert_array_equal(freq, [[1.0]])


def test_transition_frequencies_six_state():
    model = plants.example2()
    obs = iid_failures(0.5)
    chain = transition_matrix(model, obs, 1)
    freq, counts = simulate.empirical_transition_frequencies(model, obs, 1, 100_000, rng=1)
    se = simulate.binomial_standard_errors(chain.pbar, counts)
    visited = counts.sum(axis=1) > 0
    assert visited.all()
    diff = np.abs(freq - chain.pbar)[visited]
    bound = 3 * se[visited]
    assert np.all((diff <= bound) | (chain.pbar[visited] == 0))


def test_transition_frequencies_permutation_channel():
    model = plants.example2()
    obs = ObservationProcess([[0, 1, 0], [0, 0, 1], [1, 0, 0]], (1, 0, 0))
    chain = transition_matrix(model, obs, 2)
    freq, counts = simulate.empirical_transition_frequencies(model, obs, 2, 20_000, rng=2)
    visited = counts.sum(axis=1) > 0
    assert np.array_equal(counts[visited] > 0, chain.pbar[visited] > 0)
    assert np.all(np.isnan(freq[~visited]))


def test_impulse_estimate_zero_disturbance():
    model = plants.example2().with_matrices(E=[np.zeros((2, 1))] * 2)
    est = simulate.h2_impulse_estimate(model, iid_failures(0.5), 1, FeedbackGains.zeros(model, 1),
                                       InitialData.uniform(2, 2, 1), n_paths=100, rng=0)
    assert est == 0.0


def test_impulse_estimate_scalar():
    model = scalar_model(0.5)
    est = simulate.h2_impulse_estimate(model, always_observe(1), 1, FeedbackGains(np.zeros((1, 1, 1, 1))),
                                       InitialData([1.0], [1.0], [[1.0]]), n_paths=10_000, rng=0)
    assert abs(est - 4 / 3) / (4 / 3) <= 0.05


def test_impulse_estimate_requires_mss():
    with pytest.raises(analysis.NotMeanSquareStable):
        simulate.h2_impulse_estimate(scalar_model(1.2), always_observe(1), 1,
                                     FeedbackGains(np.zeros((1, 1, 1, 1))),
                                     InitialData([1.0], [1.0], [[1.0]]), n_paths=10)


def test_impulse_estimate_example1_design():
    model = plants.example1()
    obs = gilbert_elliott(0.5, 0.5)
    res = synthesis.synthesize_h2(model, obs, 1, [0.5, 0.5], [0.5, 0.5])
    assert res.ok
    init = InitialData([0.5, 0.5], [0.5, 0.5], res.nu)
    est = simulate.h2_impulse_estimate(model, obs, 1, res.gains, init, n_paths=10_000, rng=0)
    exact = res.verification["h2_norm_squared"]
    assert abs(est - exact) / exact <= 0.05


def test_empirical_gain_zero_input_is_an_error():
    with pytest.raises(ValueError):
        simulate.empirical_gain(scalar_model(0.0), always_observe(1), 1,
                                FeedbackGains(np.zeros((1, 1, 1, 1))), simulate.ZeroDisturbance(),
                                FixedStart(0, 0), 5, 10)


def test_empirical_gain_pure_delay():
    model = scalar_model(0.0)
    gains = FeedbackGains(np.zeros((1, 1, 1, 1)))
    ratio = simulate.empirical_gain(model, always_observe(1), 1, gains, simulate.Impulse(0),
                                    FixedStart(0, 0), 3, 10)
    assert ratio == 1.0
    ratio = simulate.empirical_gain(model, always_observe(1), 1, gains, simulate.Cosine(),
                                    FixedStart(0, 0), 3, 200)
    assert ratio <= 1.0


def test_parse_disturbance():
    assert isinstance(simulate.parse_disturbance("zero"), simulate.ZeroDisturbance)
    assert simulate.parse_disturbance("impulse:2") == simulate.Impulse(1)
    assert simulate.parse_disturbance("cos:2,0.5") == simulate.Cosine(2.0, 0.5)
    assert isinstance(simulate.parse_disturbance("noise:0.1"), simulate.WhiteNoise)
    with pytest.raises(ValueError):
        simulate.parse_disturbance("square:1")


def test_trajectory_csv_rows():
    model = plants.example2()
    tr = simulate.simulate_closed_loop(model, iid_failures(0.5), 1, FeedbackGains.zeros(model, 1),
                                       [1, 2], FixedStart(0, 0), None, 5, 2, rng=0)
    header, rows = simulate.trajectory_csv_rows({"T1": tr})
    assert header == ["k", "mean_x2_T1", "mean_z2_T1"]
    assert len(rows) == 5
    assert float(rows[0][1]) == 5.0


def test_impulse_horizon():
    assert simulate.impulse_horizon(0.0) == 20
    H = simulate.impulse_horizon(0.9)
    assert 0.9 ** H / 0.1 <= 1e-3
    assert simulate.impulse_horizon(0.999999) == simulate.MAX_IMPULSE_HORIZON
