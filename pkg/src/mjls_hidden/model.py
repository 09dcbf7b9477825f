"""Plant, observation channel, gain bank and initial-data types.

All mode, channel and phase indices are 0-based in code.  Human-facing
messages and CSV outputs convert to the 1-based convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STOCHASTIC_TOL = 1e-12


def _frozen(a, ndim=None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _matrix_list(mats) -> tuple[np.ndarray, ...]:
    out = []
    for M in mats:
        M = np.atleast_2d(np.array(M, dtype=float))
        M.setflags(write=False)
        out.append(M)
    return tuple(out)


def stochastic_violations(M: np.ndarray, what: str, tol: float = STOCHASTIC_TOL) -> list[str]:
    """Describe every row of ``M`` that is not a probability vector."""
    problems = []
    M = np.atleast_2d(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        return [f"{what} must be square, got shape {M.shape}"]
    for i, row in enumerate(M):
        if np.any(row < 0):
            problems.append(f"{what} row {i + 1} has a negative entry")
        s = row.sum()
        if abs(s - 1.0) > tol:
            problems.append(f"{what} row {i + 1} sums to {s:.15g}")
    return problems


def renormalize_rows(M: np.ndarray, what: str, tol: float = STOCHASTIC_TOL) -> np.ndarray:
    """Rescale rows that are stochastic up to ``tol``; reject anything else."""
    problems = stochastic_violations(M, what, tol)
    if problems:
        raise ValueError("; ".join(problems))
    M = np.array(M, dtype=float)
    return M / M.sum(axis=1, keepdims=True)


def distribution_violations(p, what: str, tol: float = STOCHASTIC_TOL) -> list[str]:
    p = np.asarray(p, dtype=float)
    problems = []
    if np.any(p < 0):
        problems.append(f"{what} has a negative entry")
    if abs(p.sum() - 1.0) > tol:
        problems.append(f"{what} sums to {p.sum():.15g}")
    return problems


@dataclass(frozen=True)
class MjlsModel:
    """Discrete-time Markov jump linear system.

    ``x(k+1) = A[r] x + B[r] u + E[r] w``, ``z = C[r] x + D[r] u`` with the
    mode ``r`` a Markov chain on ``N`` states with transition matrix ``P``.

    Construction only converts inputs to read-only arrays.  Use
    :func:`validate_model` for a diagnostic report or :meth:`check` to
    raise on the first problem.
    """

    A: tuple
    B: tuple
    C: tuple
    D: tuple
    E: tuple
    P: np.ndarray
    name: str = ""

    def __post_init__(self):
        for key in "ABCDE":
            object.__setattr__(self, key, _matrix_list(getattr(self, key)))
        object.__setattr__(self, "P", _frozen(np.atleast_2d(self.P)))

    @property
    def N(self) -> int:
        return self.P.shape[0]

    @property
    def n(self) -> int:
        return self.A[0].shape[0]

    @property
    def m(self) -> int:
        return self.B[0].shape[1]

    @property
    def ell(self) -> int:
        return self.C[0].shape[0]

    @property
    def q(self) -> int:
        return self.E[0].shape[1]

    def check(self) -> None:
        report = validate_model(self)
        if report:
            raise ValueError("invalid model: " + "; ".join(report))

    def scale(self) -> float:
        """Largest Frobenius norm over all plant matrices."""
        return max(np.linalg.norm(M) for key in "ABCDE" for M in getattr(self, key))

    def with_matrices(self, **changes) -> "MjlsModel":
        fields = dict(A=self.A, B=self.B, C=self.C, D=self.D, E=self.E, P=self.P, name=self.name)
        fields.update(changes)
        return MjlsModel(**fields)


def validate_model(model: MjlsModel) -> list[str]:
    """Return a list of human-readable invariant violations (empty if valid)."""
    report = []
    P = model.P
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        return [f"P must be square, got shape {P.shape}"]
    N = P.shape[0]
    report += stochastic_violations(P, "P")
    if not model.A:
        return report + ["A is empty"]
    n = model.A[0].shape[0]
    m = model.B[0].shape[1] if model.B else 0
    ell = model.C[0].shape[0] if model.C else 0
    q = model.E[0].shape[1] if model.E else 0
    expected = {"A": (n, n), "B": (n, m), "C": (ell, n), "D": (ell, m), "E": (n, q)}
    for key, shape in expected.items():
        mats = getattr(model, key)
        if len(mats) != N:
            report.append(f"{key} has {len(mats)} matrices but N = {N}")
        for i, M in enumerate(mats):
            if M.shape != shape:
                report.append(f"{key}[{i + 1}] has shape {M.shape}, expected {shape}")
            if not np.all(np.isfinite(M)):
                report.append(f"{key}[{i + 1}] has non-finite entries")
    return report


@dataclass(frozen=True)
class ObservationProcess:
    """Hidden-Markov observation channel ``(M, Q, f)``.

    The controller sees the mode at time ``k`` exactly when ``f[s(k)] == 1``
    for the channel chain ``s`` with transition matrix ``Q``.
    """

    Q: np.ndarray
    f: tuple
    name: str = ""

    def __post_init__(self):
        Q = _frozen(np.atleast_2d(self.Q))
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "f", tuple(int(v) for v in self.f))
        problems = stochastic_violations(Q, "Q")
        if len(self.f) != Q.shape[0]:
            problems.append(f"f has {len(self.f)} entries but M = {Q.shape[0]}")
        if any(v not in (0, 1) for v in self.f):
            problems.append("f must take values in {0, 1}")
        if problems:
            raise ValueError("invalid observation process: " + "; ".join(problems))

    @property
    def M(self) -> int:
        return self.Q.shape[0]

    @property
    def observing(self) -> tuple[int, ...]:
        return tuple(b for b, v in enumerate(self.f) if v == 1)

    @property
    def silent(self) -> tuple[int, ...]:
        return tuple(b for b, v in enumerate(self.f) if v == 0)


def _check_prob(**kw):
    for k, v in kw.items():
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"{k} must lie in [0, 1], got {v}")


def gilbert_elliott(p: float, q: float) -> ObservationProcess:
    """Good/bad channel; ``p`` is P(G->B), ``q`` is P(B->G). Only G transmits."""
    _check_prob(p=p, q=q)
    Q = [[1.0 - p, p], [q, 1.0 - q]]
    return ObservationProcess(Q, (1, 0), name=f"ge:{p!r},{q!r}")


def iid_failures(p_f: float) -> ObservationProcess:
    """Each observation attempt fails independently with probability ``p_f``."""
    _check_prob(p_f=p_f)
    Q = [[1.0 - p_f, p_f], [1.0 - p_f, p_f]]
    return ObservationProcess(Q, (1, 0), name=f"iid:{p_f!r}")


def periodic_with_failures(period: int, p: float) -> ObservationProcess:
    """Attempt an observation every ``period`` steps, succeeding w.p. ``p``.

    The channel has ``period + 1`` states.  States 0 (just observed) and 1
    (just failed) both start a silent stretch through states 2..period; the
    last state is the attempt, returning to 0 w.p. ``p`` and to 1 otherwise.
    With ``period == 1`` the attempt happens from states 0 and 1 directly.
    """
    if int(period) != period or period < 1:
        raise ValueError(f"period must be a positive integer, got {period}")
    _check_prob(p=p)
    period = int(period)
    M = period + 1
    Q = np.zeros((M, M))
    attempt = np.zeros(M)
    attempt[0], attempt[1] = p, 1.0 - p
    if period == 1:
        Q[0] = Q[1] = attempt
    else:
        Q[0, 2] = Q[1, 2] = 1.0
        for i in range(2, period):
            Q[i, i + 1] = 1.0
        Q[period] = attempt
    f = (1,) + (0,) * period
    return ObservationProcess(Q, f, name=f"periodic:{period},{p!r}")


def always_observe(M: int = 1) -> ObservationProcess:
    Q = np.full((M, M), 1.0 / M)
    return ObservationProcess(Q, (1,) * M, name="always")


def never_observe(M: int = 1) -> ObservationProcess:
    Q = np.full((M, M), 1.0 / M)
    return ObservationProcess(Q, (0,) * M, name="never")


@dataclass(frozen=True)
class FeedbackGains:
    """Gain bank ``K[gamma, delta]`` with shape ``(N, T, m, n)``."""

    K: np.ndarray

    def __post_init__(self):
        K = np.array(self.K, dtype=float)
        if K.ndim != 4:
            raise ValueError(f"gain bank must have shape (N, T, m, n), got {K.shape}")
        K.setflags(write=False)
        object.__setattr__(self, "K", K)

    @property
    def N(self) -> int:
        return self.K.shape[0]

    @property
    def T(self) -> int:
        return self.K.shape[1]

    def __getitem__(self, idx) -> np.ndarray:
        gamma, delta = idx
        return self.K[gamma, delta]

    @classmethod
    def zeros(cls, model: MjlsModel, T: int) -> "FeedbackGains":
        return cls(np.zeros((model.N, T, model.m, model.n)))

    @classmethod
    def constant(cls, K, N: int, T: int) -> "FeedbackGains":
        K = np.atleast_2d(np.asarray(K, dtype=float))
        return cls(np.broadcast_to(K, (N, T) + K.shape))

    def lifted(self, factor: int) -> "FeedbackGains":
        """Repeat the phase pattern ``factor`` times (period ``factor * T``)."""
        return FeedbackGains(np.concatenate([self.K] * factor, axis=1))


@dataclass(frozen=True)
class InitialData:
    """Distributions of ``r0`` (``mu_r``), ``s0`` (``mu_s``) and ``(sigma0, rho0)`` (``nu``)."""

    mu_r: np.ndarray
    mu_s: np.ndarray
    nu: np.ndarray = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "mu_r", _frozen(self.mu_r, 1))
        object.__setattr__(self, "mu_s", _frozen(self.mu_s, 1))
        if self.nu is not None:
            object.__setattr__(self, "nu", _frozen(np.atleast_2d(self.nu), 2))
        problems = distribution_violations(self.mu_r, "mu_r")
        problems += distribution_violations(self.mu_s, "mu_s")
        if self.nu is not None:
            problems += distribution_violations(self.nu, "nu")
        if problems:
            raise ValueError("invalid initial data: " + "; ".join(problems))

    @classmethod
    def uniform(cls, N: int, M: int, T: int) -> "InitialData":
        return cls(np.full(N, 1.0 / N), np.full(M, 1.0 / M), np.full((N, T), 1.0 / (N * T)))


def stationary_distribution(Q: np.ndarray) -> np.ndarray:
    """A stationary distribution of the row-stochastic matrix ``Q``.

    Solved as the least-squares solution of ``pi (Q - I) = 0, sum(pi) = 1``;
    for reducible chains this picks one member of the stationary family.
    """
    Q = np.asarray(Q, dtype=float)
    M = Q.shape[0]
    lhs = np.vstack([(Q - np.eye(M)).T, np.ones((1, M))])
    rhs = np.zeros(M + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def mod_floor(k: int, T: int) -> int:
    """The unique integer in ``{0, ..., T-1}`` congruent to ``k`` modulo ``T``."""
    return k % T
