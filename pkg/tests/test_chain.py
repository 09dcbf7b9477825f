import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_channel, random_model, scalar_model
from mjls_hidden import plants
from mjls_hidden.chain import (ExtendedState, build_state_space, chain_csv_rows,
                               extended_initial_distribution, incoming_weighted_sum,
                               next_phase, outgoing_weighted_sum, state_count,
                               transition_matrix)
from mjls_hidden.model import (InitialData, always_observe, gilbert_elliott, iid_failures,
                               never_observe)


def ge_model():
    m = plants.example2()
    return m, gilbert_elliott(0.3, 0.3)


def test_six_state_example():
    states = build_state_space(2, iid_failures(0.5), 1)
    assert states == [(0, 0, 0, 0), (0, 1, 0, 0), (0, 1, 1, 0),
                      (1, 0, 1, 0), (1, 1, 0, 0), (1, 1, 1, 0)]


def test_state_space_matches_brute_force():
    obs = iid_failures(0.5)
    for T in (1, 2, 5):
        brute = [s for s in itertools.product(range(2), range(2), range(2), range(T))
                 if not obs.f[s[1]] or (s[0] == s[2] and s[3] == 0)]
        assert build_state_space(2, obs, T) == brute
    assert state_count(2, obs, 5) == 22
    assert len(build_state_space(2, obs, 5)) == 22


def test_all_observing_channel_forces_gamma_equal_alpha():
    states = build_state_space(3, always_observe(2), 4)
    assert len(states) == 6
    assert all(s.gamma == s.alpha and s.delta == 0 for s in states)


@pytest.mark.parametrize("delta,T,expected", [(0, 3, 1), (2, 3, 0), (0, 1, 0)])
def test_next_phase(delta, T, expected):
    assert next_phase(delta, T) == expected


def test_next_phase_rejects_out_of_range():
    with pytest.raises(ValueError):
        next_phase(3, 3)


def test_hand_evaluated_transitions():
    model, obs = ge_model()
    chain = transition_matrix(model, obs, 2)
    i = chain.index[(0, 0, 0, 0)]
    assert chain.pbar[i, chain.index[(1, 0, 1, 0)]] == pytest.approx(0.63, abs=1e-15)
    assert chain.pbar[i, chain.index[(1, 1, 0, 1)]] == pytest.approx(0.27, abs=1e-15)
    assert chain.pbar[i, chain.index[(1, 1, 1, 0)]] == 0.0


def test_one_based_labels():
    assert ExtendedState(0, 1, 0, 1).one_based() == (1, 2, 1, 2)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), N=st.integers(1, 3), M=st.integers(1, 3),
       T=st.integers(1, 4))
def test_rows_stochastic_and_cardinality(seed, N, M, T):
    rng = np.random.default_rng(seed)
    model = random_model(rng, N=N)
    obs = random_channel(rng, M, zero_prob=0.3)
    chain = transition_matrix(model, obs, T)
    M1 = sum(obs.f)
    assert len(chain) == N * M1 + N * (M - M1) * N * T
    assert np.all(chain.pbar >= 0)
    np.testing.assert_allclose(chain.pbar.sum(axis=1), 1.0, atol=1e-10)


def test_incoming_sum_examples(rng):
    model, obs = plants.example2(), iid_failures(0.5)
    chain = transition_matrix(model, obs, 1)
    S = len(chain)
    eye = np.broadcast_to(np.eye(2), (S, 2, 2))
    colsum = chain.pbar.sum(axis=0)
    for i in range(S):
        np.testing.assert_allclose(incoming_weighted_sum(chain, eye, i), colsum[i] * np.eye(2))
    R = rng.standard_normal((S, 2, 2))
    R = R + R.transpose(0, 2, 1)
    for i in range(S):
        oracle = np.zeros((2, 2))
        for j in range(S):
            oracle += chain.pbar[j, i] * R[j]
        np.testing.assert_allclose(incoming_weighted_sum(chain, R, i), oracle, atol=1e-14)


def test_incoming_sum_single_state():
    chain = transition_matrix(scalar_model(0.5), always_observe(1), 1)
    R = np.array([[[3.0]]])
    np.testing.assert_array_equal(incoming_weighted_sum(chain, R, 0), R[0])


def test_outgoing_sum_examples(rng):
    model, obs = plants.example2(), gilbert_elliott(0.3, 0.6)
    chain = transition_matrix(model, obs, 2)
    S = len(chain)
    ones = np.broadcast_to(np.eye(2), (S, S, 2, 2))
    zeros = np.zeros((S, S, 2, 2))
    Z = rng.standard_normal((S, S, 2, 2))
    for i in range(S):
        np.testing.assert_allclose(outgoing_weighted_sum(chain, ones, i), np.eye(2), atol=1e-15)
        np.testing.assert_array_equal(outgoing_weighted_sum(chain, zeros, i), np.zeros((2, 2)))
        oracle = sum(chain.pbar[i, j] * Z[i, j] for j in range(S))
        np.testing.assert_allclose(outgoing_weighted_sum(chain, Z, i), oracle, atol=1e-14)
        as_dict = {(i, int(j)): Z[i, j] for j in chain.successors(i)}
        np.testing.assert_allclose(outgoing_weighted_sum(chain, as_dict, i), oracle, atol=1e-14)


def test_initial_distribution_uniform_six_state():
    chain = transition_matrix(plants.example2(), iid_failures(0.5), 1)
    mu = extended_initial_distribution(chain, InitialData.uniform(2, 2, 1))
    np.testing.assert_allclose(mu, [1 / 4, 1 / 8, 1 / 8, 1 / 4, 1 / 8, 1 / 8], atol=1e-15)
    assert mu.sum() == pytest.approx(1.0, abs=1e-12)


def test_initial_distribution_all_observing():
    model = plants.example2()
    obs = always_observe(3)
    chain = transition_matrix(model, obs, 2)
    init = InitialData([0.3, 0.7], [0.2, 0.3, 0.5], np.full((2, 2), 0.25))
    mu = extended_initial_distribution(chain, init)
    for (a, b, g, d), v in zip(chain.states, mu):
        assert v == pytest.approx(init.mu_r[a] * init.mu_s[b], abs=1e-15)


def test_initial_distribution_point_mass_nu():
    model, obs = plants.example2(), gilbert_elliott(0.3, 0.4)
    chain = transition_matrix(model, obs, 3)
    nu = np.zeros((2, 3))
    nu[1, 2] = 1.0
    mu = extended_initial_distribution(chain, InitialData([0.5, 0.5], [0.4, 0.6], nu))
    for (a, b, g, d), v in zip(chain.states, mu):
        if v > 0:
            assert obs.f[b] == 1 or (g, d) == (1, 2)
    assert mu.sum() == pytest.approx(1.0, abs=1e-12)


def test_unreachable_phases_are_kept():
    model = plants.example2()
    chain = transition_matrix(model, never_observe(1), 3)
    assert len(chain) == 2 * 2 * 3
    np.testing.assert_allclose(chain.pbar.sum(axis=1), 1.0)


def test_chain_csv_layout():
    chain = transition_matrix(plants.example2(), iid_failures(0.5), 1)
    header, rows = chain_csv_rows(chain)
    assert header[:5] == ["alpha", "beta", "gamma", "delta", "(1,1,1,1)"]
    assert len(header) == 4 + len(chain)
    assert rows[0][:4] == [1, 1, 1, 1]
    np.testing.assert_array_equal([[float(v) for v in r[4:]] for r in rows], chain.pbar)
