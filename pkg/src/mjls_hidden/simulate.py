"""Monte Carlo simulation of the plant under hidden-Markov mode observation.

Randomness comes from numpy's counter-based ``Philox`` generator.  Path
``j`` of a batch draws from the stream ``SeedSequence(seed, spawn_key=(j,))``
so every path is reproducible on its own, independently of how many other
paths are drawn alongside it or in which order.

Within one path the draws happen in a fixed order: the initial
``(r0, s0, sigma0, rho0)`` uniforms, then ``horizon`` uniforms for ``r``,
then ``horizon`` uniforms for ``s``, then any disturbance noise.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np

from . import analysis
from .chain import ExtendedState, transition_matrix
from .model import FeedbackGains, InitialData, MjlsModel, ObservationProcess

MAX_IMPULSE_HORIZON = 20000
SCALAR_PATH_LIMIT = 8


@dataclass(frozen=True)
class RngSpec:
    """Seed plus the index of the first stream used by a batch."""

    seed: int = 0
    stream: int = 0

    def generator(self, offset: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream + offset,))
        return np.random.Generator(np.random.Philox(ss))

    def generators(self, count: int) -> list[np.random.Generator]:
        return [self.generator(j) for j in range(count)]


def as_rng(rng) -> RngSpec:
    if isinstance(rng, RngSpec):
        return rng
    if rng is None:
        return RngSpec()
    return RngSpec(int(rng))


@dataclass(frozen=True)
class FixedStart:
    """Deterministic initial values (0-based ``sigma0`` and ``delta0 = rho0 - 1``).

    ``sigma0`` defaults to ``r0``.  When the initial channel state observes,
    ``sigma0 = r0`` and ``delta0 = 0`` are enforced regardless of the values
    given.
    """

    r0: int
    s0: int
    sigma0: int | None = None
    delta0: int = 0


@dataclass
class PathBundle:
    """Sampled ``r``, ``s`` and the derived controller memory, one row per path.

    All arrays have shape ``(n_paths, horizon)`` and are 0-based except
    ``rho`` (1-based, as in the controller definition).  ``tau`` holds the
    most recent observation time; before the first observation it holds a
    negative representative ``tau0`` consistent with ``rho0``.
    """

    r: np.ndarray
    s: np.ndarray
    observed: np.ndarray
    tau: np.ndarray
    sigma: np.ndarray
    delta: np.ndarray
    T: int

    @property
    def n_paths(self) -> int:
        return self.r.shape[0]

    @property
    def horizon(self) -> int:
        return self.r.shape[1]

    @property
    def rho(self) -> np.ndarray:
        return self.delta + 1

    def observation_times(self, path: int) -> np.ndarray:
        return np.flatnonzero(self.observed[path])

    def quadruples(self, path: int) -> list[ExtendedState]:
        return [ExtendedState(int(a), int(b), int(g), int(d)) for a, b, g, d in
                zip(self.r[path], self.s[path], self.sigma[path], self.delta[path])]


@dataclass
class Trajectory:
    """Closed-loop signals; ``x`` has ``horizon + 1`` samples, the rest ``horizon``."""

    x: np.ndarray  # (P, H+1, n)
    u: np.ndarray  # (P, H, m)
    z: np.ndarray  # (P, H, ell)
    w: np.ndarray  # (P, H, q)
    paths: PathBundle

    def mean_sq_x(self) -> np.ndarray:
        return np.mean(np.sum(self.x ** 2, axis=2), axis=0)

    def mean_sq_z(self) -> np.ndarray:
        return np.mean(np.sum(self.z ** 2, axis=2), axis=0)


def _cumulative(P: np.ndarray) -> np.ndarray:
    cum = np.cumsum(P, axis=1)
    cum[:, -1] = 1.0
    return cum


def _draw(cum_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # index of the first cumulative entry strictly above u
    return np.sum(cum_rows <= u[:, None], axis=1)


def _initial_values(model, obs, T, init, u0: np.ndarray):
    """Initial ``(r0, s0, sigma0, delta0)`` from four uniforms per path."""
    P = u0.shape[0]
    if isinstance(init, FixedStart):
        r0 = np.full(P, init.r0)
        s0 = np.full(P, init.s0)
        sigma0 = np.full(P, init.r0 if init.sigma0 is None else init.sigma0)
        delta0 = np.full(P, init.delta0)
    else:
        if init.nu is None:
            raise ValueError("sampling the initial controller memory requires nu")
        r0 = _draw(np.broadcast_to(np.cumsum(init.mu_r), (P, model.N)), u0[:, 0])
        s0 = _draw(np.broadcast_to(np.cumsum(init.mu_s), (P, obs.M)), u0[:, 1])
        flat = _draw(np.broadcast_to(np.cumsum(init.nu.ravel()), (P, init.nu.size)), u0[:, 2])
        r0 = np.minimum(r0, model.N - 1)
        s0 = np.minimum(s0, obs.M - 1)
        flat = np.minimum(flat, init.nu.size - 1)
        sigma0, delta0 = np.divmod(flat, T)
    if np.any((delta0 < 0) | (delta0 >= T)):
        raise ValueError(f"initial phase outside [0, {T})")
    f = np.asarray(obs.f)
    seen = f[s0] == 1
    sigma0 = np.where(seen, r0, sigma0)
    delta0 = np.where(seen, 0, delta0)
    return r0, s0, sigma0, delta0


def _markov_paths(cum: np.ndarray, x0: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Chain paths from initial states ``x0`` and step uniforms ``U`` (one row per path).

    The next state is the number of cumulative row entries ``<= u``.  Few
    long paths go through a scalar loop, many paths through a loop over
    time vectorized across paths; both give identical results.
    """
    P, H = U.shape[0], U.shape[1] + 1
    x = np.empty((P, H), dtype=np.int64)
    x[:, 0] = x0
    if P <= SCALAR_PATH_LIMIT:
        rows = cum.tolist()
        for p in range(P):
            state = int(x0[p])
            out = [state]
            for u in U[p].tolist():
                state = bisect.bisect_right(rows[state], u)
                out.append(state)
            x[p] = out
        return x
    for k in range(1, H):
        x[:, k] = _draw(cum[x[:, k - 1]], U[:, k - 1])
    return x


def _paths_from_uniforms(model, obs, T, init, U: np.ndarray) -> PathBundle:
    """Build a PathBundle from per-path uniforms laid out as ``[4 | H | H]``."""
    P = U.shape[0]
    H = (U.shape[1] - 4) // 2
    u0, ur, us = U[:, :4], U[:, 4:4 + H], U[:, 4 + H:4 + 2 * H]
    cumP, cumQ = _cumulative(np.asarray(model.P)), _cumulative(np.asarray(obs.Q))
    f = np.asarray(obs.f)
    r0, s0, sigma0, delta0 = _initial_values(model, obs, T, init, u0)
    r = _markov_paths(cumP, r0, ur[:, :H - 1])
    s = _markov_paths(cumQ, s0, us[:, :H - 1])
    observed = f[s] == 1
    # tau0 = 0 when s0 observes; otherwise a negative integer with floor(-tau0)_T = delta0
    tau0 = np.where(observed[:, 0], 0, np.where(delta0 == 0, -T, -delta0))
    k = np.arange(H)
    marks = np.where(observed, k, np.iinfo(np.int64).min)
    marks[:, 0] = tau0
    tau = np.maximum.accumulate(marks, axis=1)
    seen = tau >= 0
    sigma = np.where(seen, np.take_along_axis(r, np.clip(tau, 0, None), axis=1), sigma0[:, None])
    delta = np.mod(k - tau, T)
    return PathBundle(r, s, observed, tau, sigma, delta, T)


def sample_paths(model: MjlsModel, obs: ObservationProcess, T: int, init, horizon: int,
                 n_paths: int = 1, rng=None) -> PathBundle:
    """Sample ``n_paths`` independent realizations of ``(r, s, tau, sigma, rho)``.

    Parameters
    ----------
    init : InitialData or FixedStart
        Distributions to draw ``(r0, s0, sigma0, rho0)`` from, or fixed values.
    horizon : int
        Number of time steps ``k = 0, ..., horizon - 1``.
    rng : RngSpec, int or None
        Seed (and first stream id) of the batch.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    U, _ = _uniforms(as_rng(rng), n_paths, horizon, 0)
    return _paths_from_uniforms(model, obs, T, init, U)


def _uniforms(spec: RngSpec, n_paths: int, horizon: int, extra: int):
    """Per-path uniforms plus the generators, positioned after those draws."""
    gens = spec.generators(n_paths)
    U = np.empty((n_paths, 4 + 2 * horizon))
    for j, g in enumerate(gens):
        U[j] = g.random(4 + 2 * horizon)
    return U, gens


# disturbance generators -------------------------------------------------

class Disturbance:
    """Produces ``w`` of shape ``(n_paths, horizon, q)``."""

    def __call__(self, n_paths: int, horizon: int, q: int, gens) -> np.ndarray:
        raise NotImplementedError


class ZeroDisturbance(Disturbance):
    def __call__(self, n_paths, horizon, q, gens):
        return np.zeros((n_paths, horizon, q))


@dataclass
class Impulse(Disturbance):
    """``w(0) = e_i`` (0-based channel ``i``), zero afterwards."""

    channel: int = 0
    scale: float = 1.0

    def __call__(self, n_paths, horizon, q, gens):
        w = np.zeros((n_paths, horizon, q))
        w[:, 0, self.channel] = self.scale
        return w


@dataclass
class Cosine(Disturbance):
    """``w(k) = amplitude * cos(frequency * k)`` on every channel."""

    amplitude: float = 2.0
    frequency: float = 0.5

    def __call__(self, n_paths, horizon, q, gens):
        k = np.arange(horizon, dtype=float)
        col = self.amplitude * np.cos(self.frequency * k)
        return np.broadcast_to(col[None, :, None], (n_paths, horizon, q)).copy()


@dataclass
class WhiteNoise(Disturbance):
    """Zero-mean Gaussian noise with covariance ``cov`` (``q x q``)."""

    cov: np.ndarray | float = 1.0

    def __call__(self, n_paths, horizon, q, gens):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape == (1, 1):
            cov = cov[0, 0] * np.eye(q)
        L = np.linalg.cholesky(cov)
        w = np.empty((n_paths, horizon, q))
        for j, g in enumerate(gens):
            w[j] = g.standard_normal((horizon, q)) @ L.T
        return w


def parse_disturbance(text: str) -> Disturbance:
    """``zero``, ``impulse:i`` (1-based), ``cos:amp,freq`` or ``noise:var``."""
    kind, _, arg = text.partition(":")
    if kind == "zero":
        return ZeroDisturbance()
    if kind == "impulse":
        return Impulse(int(arg or 1) - 1)
    if kind == "cos":
        amp, freq = (float(v) for v in (arg or "2,0.5").split(","))
        return Cosine(amp, freq)
    if kind == "noise":
        return WhiteNoise(float(arg or 1.0))
    raise ValueError(f"unknown disturbance {text!r}; use zero, impulse:i, cos:amp,freq or noise:var")


# closed loop --------------------------------------------------------------

def run_paths(model: MjlsModel, gains: FeedbackGains, paths: PathBundle, x0, w: np.ndarray) -> Trajectory:
    """Propagate the closed loop along given paths and disturbances."""
    A, B, C, D, E = (np.array(getattr(model, key)) for key in "ABCDE")
    K = gains.K
    P, H = paths.r.shape
    x = np.empty((P, H + 1, model.n))
    u = np.empty((P, H, model.m))
    z = np.empty((P, H, model.ell))
    x[:, 0] = np.broadcast_to(np.asarray(x0, dtype=float), (P, model.n))
    for k in range(H):
        r = paths.r[:, k]
        Kk = K[paths.sigma[:, k], paths.delta[:, k]]
        xk = x[:, k]
        u[:, k] = np.einsum("pij,pj->pi", Kk, xk)
        z[:, k] = np.einsum("pij,pj->pi", C[r], xk) + np.einsum("pij,pj->pi", D[r], u[:, k])
        x[:, k + 1] = (np.einsum("pij,pj->pi", A[r], xk) + np.einsum("pij,pj->pi", B[r], u[:, k])
                       + np.einsum("pij,pj->pi", E[r], w[:, k]))
    return Trajectory(x, u, z, w, paths)


def simulate_closed_loop(model: MjlsModel, obs: ObservationProcess, T: int, gains: FeedbackGains,
                         x0, init, w: Disturbance | None = None, horizon: int = 200,
                         n_paths: int = 1, rng=None) -> Trajectory:
    """Simulate ``n_paths`` closed-loop trajectories ``u(k) = K[sigma(k), rho(k)] x(k)``."""
    if gains.K.shape != (model.N, T, model.m, model.n):
        raise ValueError(f"gain bank has shape {gains.K.shape}, "
                         f"expected {(model.N, T, model.m, model.n)}")
    U, gens = _uniforms(as_rng(rng), n_paths, horizon, 0)
    paths = _paths_from_uniforms(model, obs, T, init, U)
    wv = (w or ZeroDisturbance())(n_paths, horizon, model.q, gens)
    return run_paths(model, gains, paths, x0, wv)


# estimators ---------------------------------------------------------------

def empirical_transition_frequencies(model: MjlsModel, obs: ObservationProcess, T: int,
                                     n_steps: int, rng=None, init=None):
    """Row-normalized counts of quadruple transitions along one long path.

    Returns ``(freq, counts)``.  Rows of states that were never left are
    ``nan`` in ``freq`` (missing, not zero).
    """
    chain = transition_matrix(model, obs, T)
    if init is None:
        init = InitialData.uniform(model.N, obs.M, T)
    paths = sample_paths(model, obs, T, init, n_steps + 1, 1, rng)
    idx = np.array([chain.index[q] for q in paths.quadruples(0)])
    S = len(chain)
    counts = np.zeros((S, S))
    np.add.at(counts, (idx[:-1], idx[1:]), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        freq = np.where(totals > 0, counts / totals, np.nan)
    return freq, counts


def binomial_standard_errors(pbar: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Per-entry standard error ``sqrt(p (1 - p) / n_row)`` (``nan`` on unvisited rows)."""
    n = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n > 0, np.sqrt(pbar * (1.0 - pbar) / n), np.nan)


def impulse_horizon(radius: float, rel_tail: float = 1e-3, minimum: int = 20) -> int:
    """Horizon at which the geometric tail ``radius**H / (1 - radius)`` drops below ``rel_tail``."""
    if radius <= 0.0:
        return minimum
    H = math.ceil(math.log(rel_tail * (1.0 - radius)) / math.log(radius))
    return int(min(max(H, minimum), MAX_IMPULSE_HORIZON))


def h2_impulse_estimate(model: MjlsModel, obs: ObservationProcess, T: int, gains: FeedbackGains,
                        init: InitialData, n_paths: int = 10000, horizon: int | None = None,
                        rng=None) -> float:
    """Monte Carlo estimate of the squared H2 norm.

    Each path draws ``(r0, s0, sigma0, rho0)`` from ``init`` and feeds the
    impulse ``w = e_i`` at ``k = 0`` for every channel ``i`` through the same
    mode path; ``sum_k |z(k)|^2`` is summed over channels and averaged over
    paths.  The default horizon follows from the mean square spectral radius.
    """
    cl = analysis.closed_loop(model, obs, T, gains)
    radius = analysis.mss_spectral_radius(cl)
    if radius >= 1.0:
        raise analysis.NotMeanSquareStable(f"closed loop is not mean square stable (radius {radius:.6g})")
    H = horizon or impulse_horizon(radius)
    U, gens = _uniforms(as_rng(rng), n_paths, H + 1, 0)
    paths = _paths_from_uniforms(model, obs, T, init, U)
    total = np.zeros(n_paths)
    for i in range(model.q):
        w = Impulse(i)(n_paths, H + 1, model.q, gens)
        traj = run_paths(model, gains, paths, np.zeros(model.n), w)
        total += np.sum(traj.z ** 2, axis=(1, 2))
    return float(np.mean(total))


def empirical_gain(model: MjlsModel, obs: ObservationProcess, T: int, gains: FeedbackGains,
                   w: Disturbance, init, n_paths: int = 300, horizon: int = 200, rng=None) -> float:
    """``sqrt(mean sum|z|^2 / mean sum|w|^2)`` from zero initial state.

    A lower-bound estimate of the H-infinity norm over the simulated inputs.
    """
    traj = simulate_closed_loop(model, obs, T, gains, np.zeros(model.n), init, w, horizon,
                                n_paths, rng)
    energy_w = np.mean(np.sum(traj.w ** 2, axis=(1, 2)))
    if energy_w == 0.0:
        raise ValueError("empirical gain is undefined for a zero disturbance")
    energy_z = np.mean(np.sum(traj.z ** 2, axis=(1, 2)))
    return float(math.sqrt(energy_z / energy_w))


def trajectory_csv_rows(series: dict[str, Trajectory]):
    """Header and rows ``k, mean|x|^2[name], mean|z|^2[name]`` for each named series."""
    names = list(series)
    header = ["k"]
    cols = []
    for name in names:
        header += [f"mean_x2_{name}", f"mean_z2_{name}"]
        tr = series[name]
        cols += [tr.mean_sq_x()[:-1], tr.mean_sq_z()]
    H = min(len(c) for c in cols)
    rows = [[k] + [repr(float(c[k])) for c in cols] for k in range(H)]
    return header, rows
