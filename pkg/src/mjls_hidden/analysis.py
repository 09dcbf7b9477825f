"""Closed-loop analysis: mean square stability, H2 norm and H-infinity bounds.

Each LMI-based certificate has an LMI-free counterpart used to cross-check
it: the second-moment operator for stability and the coupled Gramian
equation for the H2 norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from . import sdp
from .chain import ExtendedChain, transition_matrix
from .model import FeedbackGains, MjlsModel, ObservationProcess

VERIFY_TOL = 1e-9
LINEAR_SOLVE_LIMIT = 5000


class NotMeanSquareStable(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ClosedLoopSystem:
    """Jump system ``x+ = A[t] x + E[t] w``, ``z = C[t] x`` driven by ``pbar``."""

    pbar: np.ndarray
    AK: np.ndarray  # (S, n, n)
    CK: np.ndarray  # (S, ell, n)
    EK: np.ndarray  # (S, n, q)
    chain: ExtendedChain | None = None
    gains: FeedbackGains | None = None

    @property
    def size(self) -> int:
        return self.pbar.shape[0]

    @property
    def n(self) -> int:
        return self.AK.shape[1]

    def scale(self) -> float:
        return max(np.linalg.norm(M) for fam in (self.AK, self.CK, self.EK) for M in fam)

    def successors(self, i):
        return np.flatnonzero(self.pbar[i])

    @classmethod
    def from_matrices(cls, pbar, A, C, E) -> "ClosedLoopSystem":
        pbar = np.atleast_2d(np.asarray(pbar, dtype=float))
        S = pbar.shape[0]

        def fam(X):
            X = np.asarray(X, dtype=float)
            if X.ndim == 0:
                X = X.reshape(1, 1)
            if X.ndim == 2:
                X = np.broadcast_to(X, (S,) + X.shape)
            return np.array(X)

        return cls(pbar, fam(A), fam(C), fam(E))

    def reordered(self, perm) -> "ClosedLoopSystem":
        """Same system with states relabelled by ``perm`` (new i = old perm[i])."""
        perm = np.asarray(perm)
        return ClosedLoopSystem(self.pbar[np.ix_(perm, perm)], self.AK[perm], self.CK[perm],
                                self.EK[perm])


def closed_loop(model: MjlsModel, obs: ObservationProcess, T: int, gains: FeedbackGains,
                chain: ExtendedChain | None = None) -> ClosedLoopSystem:
    if gains.K.shape != (model.N, T, model.m, model.n):
        raise ValueError(f"gain bank has shape {gains.K.shape}, "
                         f"expected {(model.N, T, model.m, model.n)}")
    chain = chain or transition_matrix(model, obs, T)
    AK, CK, EK = [], [], []
    for alpha, _, gamma, delta in chain.states:
        K = gains[gamma, delta]
        AK.append(model.A[alpha] + model.B[alpha] @ K)
        CK.append(model.C[alpha] + model.D[alpha] @ K)
        EK.append(model.E[alpha])
    return ClosedLoopSystem(chain.pbar, np.array(AK), np.array(CK), np.array(EK), chain, gains)


# second-moment operator -------------------------------------------------------

def second_moment_operator(cl: ClosedLoopSystem) -> np.ndarray:
    """Matrix whose (j, i) block is ``pbar[i, j] * kron(A_i, A_i)``."""
    S, n = cl.size, cl.n
    L = np.zeros((S * n * n, S * n * n))
    for i in range(S):
        kr = np.kron(cl.AK[i], cl.AK[i])
        for j in cl.successors(i):
            L[j * n * n:(j + 1) * n * n, i * n * n:(i + 1) * n * n] = cl.pbar[i, j] * kr
    return L


def mss_spectral_radius(cl: ClosedLoopSystem) -> float:
    """Spectral radius of the second-moment operator (< 1 iff mean square stable)."""
    L = second_moment_operator(cl)
    if L.size == 0:
        return 0.0
    return float(np.max(np.abs(la.eigvals(L))))


# certificates -----------------------------------------------------------------

@dataclass
class Certificate:
    kind: str  # MSS | H2 | Hinf
    status: str  # feasible | infeasible | failure | indeterminate
    value: float = math.nan
    matrices: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    min_eigenvalues: dict = field(default_factory=dict)
    backend_status: str = ""
    message: str = ""

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"

    def report(self) -> dict:
        return {
            "kind": self.kind,
            "status": self.status,
            "value": self.value,
            "backend_status": self.backend_status,
            "max_lmi_violation": max((-r for r in self.residuals.values()), default=None),
            "min_reverified_eigenvalue": min(self.min_eigenvalues.values(), default=None),
            "message": self.message,
        }


def reverify(blocks: dict, tol: float = VERIFY_TOL) -> tuple[bool, dict]:
    """Smallest eigenvalue of each claimed-positive-definite block.

    A block passes when ``lambda_min > -tol * max(1, ||block||)``.
    """
    mins, ok = {}, True
    for label, M in blocks.items():
        M = 0.5 * (M + M.T)
        lam = float(np.linalg.eigvalsh(M)[0])
        mins[label] = lam
        if lam <= -tol * max(1.0, np.linalg.norm(M)):
            ok = False
    return ok, mins


def _finish(cert: Certificate, sol: sdp.Solution, blocks_fn) -> Certificate:
    cert.backend_status = sol.backend_status
    if not sol.ok:
        cert.status = sol.status
        cert.message = sol.message
        return cert
    cert.residuals = sol.residuals
    ok, mins = reverify(blocks_fn(sol))
    cert.min_eigenvalues = mins
    cert.status = "feasible" if ok else "indeterminate"
    if not ok:
        cert.message = "certificate failed floating-point re-verification"
    return cert


def _incoming(cl, exprs, j):
    """``sum_i pbar[i, j] exprs[i]`` for Affine or ndarray families."""
    total = 0.0
    for i in np.flatnonzero(cl.pbar[:, j]):
        total = total + cl.pbar[i, j] * exprs[i]
    return total


def is_mss_lmi(cl: ClosedLoopSystem, backend=None) -> Certificate:
    """Search for ``Q_i > 0`` with ``Q_j - sum_i pbar[i,j] A_i Q_i A_i' > 0``.

    The condition is homogeneous in ``Q``, so the margins are normalized to
    the identity and ``sum tr Q`` is minimized to keep the solution bounded.
    """
    S, n = cl.size, cl.n
    prog = sdp.Program()
    Q = [prog.symmetric(f"Q[{i}]", n) for i in range(S)]
    AQA = [cl.AK[i] @ Q[i] @ cl.AK[i].T for i in range(S)]
    for j in range(S):
        prog.add_lmi(Q[j], f"Q[{j}]>0", margin=1.0)
        prog.add_lmi(Q[j] - _incoming(cl, AQA, j), f"lyap[{j}]", margin=1.0)
    prog.minimize(sum((q.trace() for q in Q), sdp.Affine([[0.0]])))
    sol = sdp.solve(prog.build(), backend)
    cert = Certificate("MSS", "failure")

    def blocks(sol):
        Qv = np.array([sol[f"Q[{i}]"] for i in range(S)])
        out = {}
        for j in range(S):
            D = _incoming(cl, [cl.AK[i] @ Qv[i] @ cl.AK[i].T for i in range(S)], j)
            out[f"Q[{j}]>0"] = Qv[j]
            out[f"lyap[{j}]"] = Qv[j] - D
        return out

    cert = _finish(cert, sol, blocks)
    if sol.ok:
        cert.matrices = {"Q": np.array([sol[f"Q[{i}]"] for i in range(S)])}
    return cert


# H2 ------------------------------------------------------------------------------

def h2_gramian(cl: ClosedLoopSystem, mu_bar, method: str = "auto",
               tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Solve ``Q_j = sum_i pbar[i,j] (A_i Q_i A_i' + mu_i E_i E_i')``."""
    radius = mss_spectral_radius(cl)
    if radius >= 1.0:
        raise NotMeanSquareStable(f"spectral radius {radius:.6g} >= 1")
    S, n = cl.size, cl.n
    mu_bar = np.asarray(mu_bar, dtype=float)
    forcing = np.array([_incoming(cl, [mu_bar[i] * cl.EK[i] @ cl.EK[i].T for i in range(S)], j)
                        + np.zeros((n, n)) for j in range(S)])
    if method == "auto":
        method = "solve" if S * n * n <= LINEAR_SOLVE_LIMIT else "iterate"
    if method == "solve":
        L = second_moment_operator(cl)
        # second_moment_operator acts on row-major vec of each block, matching ravel()
        v = np.linalg.solve(np.eye(L.shape[0]) - L, forcing.reshape(-1))
        Q = v.reshape(S, n, n)
        return 0.5 * (Q + Q.transpose(0, 2, 1))
    Q = np.zeros((S, n, n))
    for _ in range(max_iter):
        AQA = np.einsum("sab,sbc,sdc->sad", cl.AK, Q, cl.AK)
        new = np.einsum("ij,iab->jab", cl.pbar, AQA) + forcing
        if np.max(np.abs(new - Q)) < tol:
            return new
        Q = new
    raise RuntimeError(f"Gramian iteration did not converge in {max_iter} steps")


def h2_norm_squared(cl: ClosedLoopSystem, mu_bar, **kw) -> float:
    Q = h2_gramian(cl, mu_bar, **kw)
    return float(sum(np.trace(cl.CK[i] @ Q[i] @ cl.CK[i].T) for i in range(cl.size)))


def h2_norm(cl: ClosedLoopSystem, mu_bar, **kw) -> float:
    return math.sqrt(max(h2_norm_squared(cl, mu_bar, **kw), 0.0))


def h2_upper_bound_lmi(cl: ClosedLoopSystem, mu_bar, backend=None, margin: float | None = None) -> Certificate:
    """Smallest ``sum tr(C Q C')`` over ``Q`` with ``Q_j > pbar-weighted (A Q A' + mu E E')``."""
    S, n = cl.size, cl.n
    mu_bar = np.asarray(mu_bar, dtype=float)
    eps = sdp.strict_margin(*cl.AK, *cl.CK, *cl.EK) if margin is None else margin
    prog = sdp.Program()
    Q = [prog.symmetric(f"Q[{i}]", n) for i in range(S)]
    inner = [cl.AK[i] @ Q[i] @ cl.AK[i].T + mu_bar[i] * (cl.EK[i] @ cl.EK[i].T) for i in range(S)]
    for j in range(S):
        prog.add_lmi(Q[j], f"Q[{j}]>0", margin=eps)
        prog.add_lmi(Q[j] - _incoming(cl, inner, j), f"gram[{j}]", margin=eps)
    prog.minimize(sum(((cl.CK[i] @ Q[i] @ cl.CK[i].T).trace() for i in range(S)),
                      sdp.Affine([[0.0]])))
    sol = sdp.solve(prog.build(), backend)

    def blocks(sol):
        Qv = [sol[f"Q[{i}]"] for i in range(S)]
        inner_v = [cl.AK[i] @ Qv[i] @ cl.AK[i].T + mu_bar[i] * cl.EK[i] @ cl.EK[i].T for i in range(S)]
        out = {}
        for j in range(S):
            out[f"Q[{j}]>0"] = Qv[j]
            out[f"gram[{j}]"] = Qv[j] - _incoming(cl, inner_v, j)
        return out

    cert = _finish(Certificate("H2", "failure"), sol, blocks)
    if sol.ok:
        Qv = np.array([sol[f"Q[{i}]"] for i in range(S)])
        cert.matrices = {"Q": Qv}
        cert.value = float(sum(np.trace(cl.CK[i] @ Qv[i] @ cl.CK[i].T) for i in range(S)))
    return cert


# H-infinity ---------------------------------------------------------------------

def hinf_pairs(cl, prune: bool = True) -> list[tuple[int, int]]:
    """State pairs that receive a coupling variable.

    With ``prune`` only pairs with positive transition probability are kept
    (plus ``X_i > 0`` for every state), which has the same feasible set of
    ``(G, H, X, gamma)``: a zero-probability pair never enters the weighted
    sum and ``Z = H' X^-1 H + I`` satisfies its coupling LMI.
    """
    S = cl.size if hasattr(cl, "size") else len(cl)
    if not prune:
        return [(i, j) for i in range(S) for j in range(S)]
    return [(i, int(j)) for i in range(S) for j in np.flatnonzero(cl.pbar[i])]


def _hinf_program(cl: ClosedLoopSystem, gamma: float | None, prune: bool, margin: float | None):
    S, n = cl.size, cl.n
    q, ell = cl.EK.shape[2], cl.CK.shape[1]
    eps = sdp.strict_margin(*cl.AK, *cl.CK, *cl.EK) if margin is None else margin
    prog = sdp.Program()
    G = [prog.variable(f"G[{i}]", (n, n)) for i in range(S)]
    H = [prog.variable(f"H[{i}]", (n, n)) for i in range(S)]
    X = [prog.symmetric(f"X[{i}]", n) for i in range(S)]
    pairs = hinf_pairs(cl, prune)
    Z = {(i, j): prog.symmetric(f"Z[{i},{j}]", n) for i, j in pairs}
    g = prog.scalar("gamma") if gamma is None else sdp.Affine([[gamma]])
    for i in range(S):
        FZ = 0.0
        for j in cl.successors(i):
            FZ = FZ + cl.pbar[i, j] * Z[i, int(j)]
        grid = [
            [G[i] + G[i].T - X[i]],
            [None, g * np.eye(q)],
            [cl.AK[i] @ G[i], cl.EK[i], H[i] + H[i].T - FZ],
            [cl.CK[i] @ G[i], None, None, np.eye(ell)],
        ]
        prog.add_lmi(sdp.block(grid), f"hinf[{i}]", margin=eps)
    for (i, j), Zij in Z.items():
        prog.add_lmi(sdp.block([[Zij], [H[i], X[j]]]), f"couple[{i},{j}]", margin=eps)
    if prune:
        for i in range(S):
            prog.add_lmi(X[i], f"X[{i}]>0", margin=eps)
    if gamma is None:
        prog.minimize(g)
    return prog, pairs


def _hinf_blocks(cl, sol, pairs, gamma, prune):
    S, q, ell = cl.size, cl.EK.shape[2], cl.CK.shape[1]
    out = {}
    gv = gamma if gamma is not None else float(sol["gamma"][0, 0])
    for i in range(S):
        Gi, Hi, Xi = sol[f"G[{i}]"], sol[f"H[{i}]"], sol[f"X[{i}]"]
        FZ = sum(cl.pbar[i, j] * sol[f"Z[{i},{int(j)}]"] for j in cl.successors(i))
        n = Gi.shape[0]
        M = np.zeros((2 * n + q + ell,) * 2)
        AG, CG = cl.AK[i] @ Gi, cl.CK[i] @ Gi
        M[:n, :n] = Gi + Gi.T - Xi
        M[n:n + q, n:n + q] = gv * np.eye(q)
        M[n + q:2 * n + q, :n] = AG
        M[n + q:2 * n + q, n:n + q] = cl.EK[i]
        M[n + q:2 * n + q, n + q:2 * n + q] = Hi + Hi.T - FZ
        M[2 * n + q:, :n] = CG
        M[2 * n + q:, 2 * n + q:] = np.eye(ell)
        M = np.tril(M) + np.tril(M, -1).T
        out[f"hinf[{i}]"] = M
    for i, j in pairs:
        Zij, Hi, Xj = sol[f"Z[{i},{j}]"], sol[f"H[{i}]"], sol[f"X[{j}]"]
        out[f"couple[{i},{j}]"] = np.block([[Zij, Hi.T], [Hi, Xj]])
    if prune:
        for i in range(S):
            out[f"X[{i}]>0"] = sol[f"X[{i}]"]
    return out


def hinf_upper_bound(cl: ClosedLoopSystem, gamma: float, backend=None, prune: bool = True,
                     margin: float | None = None) -> Certificate:
    """Feasibility of the H-infinity LMIs at a fixed ``gamma``.

    Feasible means the loop is mean square stable with squared H-infinity
    norm below ``gamma``.  Infeasibility proves nothing: the condition is
    only sufficient.
    """
    prog, pairs = _hinf_program(cl, gamma, prune, margin)
    sol = sdp.solve(prog.build(), backend)
    cert = _finish(Certificate("Hinf", "failure", value=gamma), sol,
                   lambda s: _hinf_blocks(cl, s, pairs, gamma, prune))
    return cert


def hinf_minimize(cl: ClosedLoopSystem, backend=None, prune: bool = True,
                  margin: float | None = None) -> tuple[float, Certificate]:
    """Least ``gamma`` (bound on the squared norm) certified by the LMIs."""
    prog, pairs = _hinf_program(cl, None, prune, margin)
    sol = sdp.solve(prog.build(), backend)
    cert = _finish(Certificate("Hinf", "failure"), sol,
                   lambda s: _hinf_blocks(cl, s, pairs, None, prune))
    if sol.ok:
        cert.value = float(sol["gamma"][0, 0])
        cert.matrices = {k: v for k, v in sol.values.items()}
    return cert.value, cert
