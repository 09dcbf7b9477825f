"""Extended Markov chain on (mode, channel state, last observed mode, phase).

Once the controller's memory ``(sigma, rho)`` is appended to ``(r, s)`` the
closed loop becomes an ordinary Markov jump linear system driven by the
quadruple chain built here.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .model import InitialData, MjlsModel, ObservationProcess


class ExtendedState(NamedTuple):
    alpha: int  # mode r
    beta: int  # channel state s
    gamma: int  # last observed mode sigma
    delta: int  # gain phase rho - 1

    def one_based(self) -> tuple[int, int, int, int]:
        return tuple(v + 1 for v in self)


def is_member(state: tuple, f) -> bool:
    alpha, beta, gamma, delta = state
    return not f[beta] or (alpha == gamma and delta == 0)


def build_state_space(N: int, obs: ObservationProcess, T: int) -> list[ExtendedState]:
    """All admissible quadruples in lexicographic order."""
    if N < 1 or T < 1:
        raise ValueError("N and T must be positive")
    states = []
    for alpha, beta in itertools.product(range(N), range(obs.M)):
        if obs.f[beta]:
            states.append(ExtendedState(alpha, beta, alpha, 0))
        else:
            for gamma, delta in itertools.product(range(N), range(T)):
                states.append(ExtendedState(alpha, beta, gamma, delta))
    return states


def state_count(N: int, obs: ObservationProcess, T: int) -> int:
    M1 = len(obs.observing)
    M0 = obs.M - M1
    return N * M1 + N * M0 * N * T


def next_phase(delta: int, T: int) -> int:
    """Phase after one silent step (0-based, wraps after ``T - 1``)."""
    if not 0 <= delta < T:
        raise ValueError(f"phase {delta} outside [0, {T})")
    return (delta + 1) % T


@dataclass(frozen=True, eq=False)
class ExtendedChain:
    model: MjlsModel
    obs: ObservationProcess
    T: int
    states: tuple
    index: dict
    pbar: np.ndarray

    def __len__(self) -> int:
        return len(self.states)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([s.alpha for s in self.states])

    def successors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.pbar[i])

    def gain_slots(self) -> list[tuple[int, int]]:
        return [(g, d) for g in range(self.model.N) for d in range(self.T)]


def transition_matrix(model: MjlsModel, obs: ObservationProcess, T: int) -> ExtendedChain:
    """Build the extended chain and its transition matrix."""
    model.check()
    states = build_state_space(model.N, obs, T)
    index = {s: i for i, s in enumerate(states)}
    P, Q = model.P, obs.Q
    pbar = np.zeros((len(states), len(states)))
    for i, (alpha, beta, gamma, delta) in enumerate(states):
        for a2, b2 in itertools.product(range(model.N), range(obs.M)):
            w = P[alpha, a2] * Q[beta, b2]
            if w == 0.0:
                continue
            if obs.f[b2]:
                target = ExtendedState(a2, b2, a2, 0)
            else:
                target = ExtendedState(a2, b2, gamma, next_phase(delta, T))
            pbar[i, index[target]] += w
    pbar.setflags(write=False)
    return ExtendedChain(model, obs, T, tuple(states), index, pbar)


def incoming_weighted_sum(chain: ExtendedChain, R, i: int) -> np.ndarray:
    """``sum_j pbar[j, i] R[j]`` over predecessors ``j`` of state ``i``."""
    w = chain.pbar[:, i]
    return np.einsum("j,jab->ab", w, np.asarray(R))


def outgoing_weighted_sum(chain: ExtendedChain, Z, i: int) -> np.ndarray:
    """``sum_j pbar[i, j] Z[i, j]``.

    ``Z`` is either an ``(S, S, n, n)`` array or a dict keyed by ``(i, j)``;
    a dict only needs entries for pairs with positive probability.
    """
    total = 0.0
    for j in chain.successors(i):
        total = total + chain.pbar[i, j] * np.asarray(Z[i, j] if isinstance(Z, dict) else Z[i][j])
    return total


def extended_initial_distribution(chain: ExtendedChain, init: InitialData) -> np.ndarray:
    """Distribution of the initial quadruple induced by ``init``."""
    f = chain.obs.f
    if init.nu is None:
        raise ValueError("initial data needs nu to define the extended distribution")
    if init.nu.shape != (chain.model.N, chain.T):
        raise ValueError(f"nu has shape {init.nu.shape}, expected {(chain.model.N, chain.T)}")
    mu = np.empty(len(chain))
    for i, (alpha, beta, gamma, delta) in enumerate(chain.states):
        mu[i] = init.mu_r[alpha] * init.mu_s[beta]
        if not f[beta]:
            mu[i] *= init.nu[gamma, delta]
    return mu


def chain_csv_rows(chain: ExtendedChain) -> tuple[list[str], list[list]]:
    """Header and rows for a CSV dump (1-based state labels)."""
    labels = ["({},{},{},{})".format(*s.one_based()) for s in chain.states]
    header = ["alpha", "beta", "gamma", "delta"] + labels
    rows = [list(s.one_based()) + [repr(float(v)) for v in chain.pbar[i]]
            for i, s in enumerate(chain.states)]
    return header, rows
