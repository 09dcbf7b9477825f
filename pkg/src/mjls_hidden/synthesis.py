"""LMI synthesis of periodic gain banks under hidden-Markov mode observation.

One ``G``/``F`` pair exists per gain slot ``(gamma, delta)`` and is shared by
every extended state carrying that slot; the Lyapunov-type variables live on
extended states (and on state pairs for the H-infinity coupling).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import analysis, sdp
from .chain import ExtendedChain, extended_initial_distribution, transition_matrix
from .model import FeedbackGains, InitialData, MjlsModel, ObservationProcess, stationary_distribution

COND_LIMIT = 1e12
HINF_RECHECK_SLACK = 1e-5


class SingularGainError(ValueError):
    pass


@dataclass
class SynthesisResult:
    status: str  # success | infeasible | failure | indeterminate
    problem: str
    gains: FeedbackGains | None = None
    gamma: float = math.nan
    nu: np.ndarray | None = None
    solution: sdp.Solution | None = None
    verification: dict = field(default_factory=dict)
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "success"

    def report(self) -> dict:
        out = {"problem": self.problem, "status": self.status, "gamma": self.gamma,
               "message": self.message}
        if self.solution is not None:
            out["backend_status"] = self.solution.backend_status
            out["max_lmi_violation"] = self.solution.max_violation if self.solution.residuals else None
        out.update({k: v for k, v in self.verification.items()})
        return out


def recover_gains(F, G) -> FeedbackGains:
    """``K[g, d]`` solving ``K G[g, d] = F[g, d]`` for every slot."""
    F, G = np.asarray(F, dtype=float), np.asarray(G, dtype=float)
    N, T = F.shape[:2]
    K = np.empty(F.shape[:2] + (F.shape[2], G.shape[3]))
    for g in range(N):
        for d in range(T):
            cond = np.linalg.cond(G[g, d])
            if not np.isfinite(cond) or cond > COND_LIMIT:
                raise SingularGainError(
                    f"G for slot (gamma={g + 1}, delta={d + 1}) is singular (condition {cond:.3g})")
            K[g, d] = np.linalg.solve(G[g, d].T, F[g, d].T).T
    return FeedbackGains(K)


def _margin(model: MjlsModel) -> float:
    return sdp.strict_margin(*model.A, *model.B, *model.C, *model.D, *model.E)


def _slot_variables(prog: sdp.Program, model: MjlsModel, T: int):
    G = {(g, d): prog.variable(f"G[{g},{d}]", (model.n, model.n))
         for g in range(model.N) for d in range(T)}
    F = {(g, d): prog.variable(f"F[{g},{d}]", (model.m, model.n))
         for g in range(model.N) for d in range(T)}
    return G, F


def _incoming(chain: ExtendedChain, family, j):
    total = 0.0
    for i in np.flatnonzero(chain.pbar[:, j]):
        total = total + chain.pbar[i, j] * family[i]
    return total


def _recover(sol: sdp.Solution, model: MjlsModel, T: int) -> FeedbackGains:
    F = np.array([[sol[f"F[{g},{d}]"] for d in range(T)] for g in range(model.N)])
    G = np.array([[sol[f"G[{g},{d}]"] for d in range(T)] for g in range(model.N)])
    return recover_gains(F, G)


def _finish(result: SynthesisResult, sol: sdp.Solution, model, obs, T, chain) -> SynthesisResult:
    result.solution = sol
    if not sol.ok:
        result.status = sol.status
        result.message = sol.message or f"backend status {sol.backend_status}"
        return result
    if sol.max_violation > 10 * 1e-8 * max(1.0, abs(sol.objective)):
        result.message = f"LMI residual {sol.max_violation:.3g} above tolerance"
    try:
        result.gains = _recover(sol, model, T)
    except SingularGainError as exc:
        result.status = "indeterminate"
        result.message = str(exc)
        return result
    cl = analysis.closed_loop(model, obs, T, result.gains, chain)
    radius = analysis.mss_spectral_radius(cl)
    result.verification["spectral_radius"] = radius
    result.status = "success" if radius < 1.0 else "indeterminate"
    if radius >= 1.0:
        result.message = f"recovered gains fail the stability re-check (radius {radius:.6g})"
    return result


def synthesize_stabilizing(model: MjlsModel, obs: ObservationProcess, T: int,
                           backend=None, chain: ExtendedChain | None = None) -> SynthesisResult:
    """Mean-square stabilizing gain bank.

    The LMIs are homogeneous in ``(R, G, F)`` so the strict inequalities are
    normalized to ``>= I``; ``sum tr R`` is minimized only to keep the
    solution bounded.
    """
    chain = chain or transition_matrix(model, obs, T)
    prog = stabilizing_program(model, chain)
    sol = sdp.solve(prog.build(), backend)
    return _finish(SynthesisResult("failure", "stabilize"), sol, model, obs, T, chain)


def stabilizing_program(model: MjlsModel, chain: ExtendedChain, margin: float = 1.0) -> sdp.Program:
    n, T = model.n, chain.T
    prog = sdp.Program()
    R = [prog.symmetric(f"R[{i}]", n) for i in range(len(chain))]
    G, F = _slot_variables(prog, model, T)
    for i, (alpha, _, gamma, delta) in enumerate(chain.states):
        Gs, Fs = G[gamma, delta], F[gamma, delta]
        AG = model.A[alpha] @ Gs + model.B[alpha] @ Fs
        lmi = sdp.block([[R[i]], [AG.T, Gs + Gs.T - _incoming(chain, R, i)]])
        prog.add_lmi(lmi, f"stab[{i}]", margin=margin)
    prog.minimize(sum((r.trace() for r in R), sdp.Affine([[0.0]])))
    return prog


def stabilizing_residuals(model: MjlsModel, chain: ExtendedChain, R, G, F) -> np.ndarray:
    """Smallest eigenvalue of each stabilization LMI at given numeric values."""
    out = []
    for i, (alpha, _, gamma, delta) in enumerate(chain.states):
        Gs, Fs = G[gamma][delta], F[gamma][delta]
        AG = model.A[alpha] @ Gs + model.B[alpha] @ Fs
        D = _incoming(chain, R, i)
        M = np.block([[R[i], AG], [AG.T, Gs + Gs.T - D]])
        out.append(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
    return np.array(out)


def mu_bar_affine(chain: ExtendedChain, mu_r, mu_s, nu):
    """Initial extended distribution; ``nu`` may hold expressions or numbers."""
    f = chain.obs.f
    out = []
    for alpha, beta, gamma, delta in chain.states:
        w = mu_r[alpha] * mu_s[beta]
        out.append(w if f[beta] else w * nu[gamma, delta])
    return out


def synthesize_h2(model: MjlsModel, obs: ObservationProcess, T: int, mu_r, mu_s=None,
                  backend=None, chain: ExtendedChain | None = None,
                  margin: float | None = None) -> SynthesisResult:
    """Minimize the H2 bound ``gamma`` jointly over gains and ``nu``.

    ``gamma`` bounds the squared H2 norm.  When ``mu_s`` is omitted the
    stationary distribution of the channel is used.
    """
    chain = chain or transition_matrix(model, obs, T)
    mu_r = np.asarray(mu_r, dtype=float)
    defaulted = mu_s is None
    mu_s = stationary_distribution(obs.Q) if defaulted else np.asarray(mu_s, dtype=float)
    eps = _margin(model) if margin is None else margin
    n, ell = model.n, model.ell
    S = len(chain)

    prog = sdp.Program()
    W = [prog.symmetric(f"W[{i}]", ell) for i in range(S)]
    R = [prog.symmetric(f"R[{i}]", n) for i in range(S)]
    G, F = _slot_variables(prog, model, T)
    nu = {(g, d): prog.scalar(f"nu[{g},{d}]") for g in range(model.N) for d in range(T)}
    gamma_var = prog.scalar("gamma")
    mu = mu_bar_affine(chain, mu_r, mu_s, nu)
    for i, (alpha, _, gamma, delta) in enumerate(chain.states):
        Gs, Fs = G[gamma, delta], F[gamma, delta]
        bottom = Gs + Gs.T - _incoming(chain, R, i)
        EE = model.E[alpha] @ model.E[alpha].T
        top = R[i] - mu[i] * EE
        AG = model.A[alpha] @ Gs + model.B[alpha] @ Fs
        CG = model.C[alpha] @ Gs + model.D[alpha] @ Fs
        prog.add_lmi(sdp.block([[top], [AG.T, bottom]]), f"h2a[{i}]", margin=eps)
        prog.add_lmi(sdp.block([[W[i]], [CG.T, bottom]]), f"h2b[{i}]", margin=eps)
    trace_sum = sum((w.trace() for w in W), sdp.Affine([[0.0]]))
    prog.add_nonneg(gamma_var - trace_sum - eps, "trace<gamma")
    for key, v in nu.items():
        prog.add_nonneg(v, f"nu{key}>=0")
    prog.add_equality(sum(nu.values(), sdp.Affine([[0.0]])) - 1.0, "sum nu = 1")
    prog.minimize(gamma_var)
    sol = sdp.solve(prog.build(), backend)

    result = SynthesisResult("failure", "h2")
    if defaulted:
        result.verification["mu_s_default"] = "stationary"
    result = _finish(result, sol, model, obs, T, chain)
    if sol.ok:
        result.gamma = float(sol["gamma"][0, 0])
        raw = np.array([[sol[f"nu[{g},{d}]"][0, 0] for d in range(T)] for g in range(model.N)])
        nu_v = np.clip(raw, 0.0, None)
        result.nu = nu_v / nu_v.sum()
    if result.ok:
        init = InitialData(mu_r, mu_s, result.nu)
        mu_bar = extended_initial_distribution(chain, init)
        cl = analysis.closed_loop(model, obs, T, result.gains, chain)
        h2sq = analysis.h2_norm_squared(cl, mu_bar)
        result.verification["h2_norm_squared"] = h2sq
        if h2sq > result.gamma * (1 + 1e-6):
            result.status = "indeterminate"
            result.message = f"Gramian H2 value {h2sq:.6g} exceeds the certified bound {result.gamma:.6g}"
    return result


def synthesize_hinf(model: MjlsModel, obs: ObservationProcess, T: int, backend=None,
                    chain: ExtendedChain | None = None, prune: bool = True,
                    margin: float | None = None) -> SynthesisResult:
    """Minimize the H-infinity bound ``gamma`` (on the squared norm)."""
    chain = chain or transition_matrix(model, obs, T)
    prog, pairs = hinf_program(model, chain, prune=prune, margin=margin)
    sol = sdp.solve(prog.build(), backend)
    result = _finish(SynthesisResult("failure", "hinf"), sol, model, obs, T, chain)
    if sol.ok:
        result.gamma = float(sol["gamma"][0, 0])
    if result.ok:
        # the analysis LMIs give G one value per state, so they can only be
        # looser than the synthesis LMIs; a small relative slack absorbs
        # solver tolerance
        eps = _margin(model) if margin is None else margin
        cl = analysis.closed_loop(model, obs, T, result.gains, chain)
        cert = analysis.hinf_upper_bound(cl, result.gamma * (1 + HINF_RECHECK_SLACK) + 10 * eps,
                                         backend=backend, prune=prune, margin=eps)
        result.verification["hinf_recheck"] = cert.status
        if not cert.feasible:
            result.status = "indeterminate"
            result.message = f"H-infinity re-check at the returned gamma was {cert.status}"
    return result


def hinf_program(model: MjlsModel, chain: ExtendedChain, prune: bool = True,
                 margin: float | None = None):
    eps = _margin(model) if margin is None else margin
    n, q, ell, T = model.n, model.q, model.ell, chain.T
    S = len(chain)
    prog = sdp.Program()
    H = [prog.variable(f"H[{i}]", (n, n)) for i in range(S)]
    X = [prog.symmetric(f"X[{i}]", n) for i in range(S)]
    pairs = analysis.hinf_pairs(chain, prune)
    Z = {(i, j): prog.symmetric(f"Z[{i},{j}]", n) for i, j in pairs}
    G, F = _slot_variables(prog, model, T)
    g = prog.scalar("gamma")
    for i, (alpha, _, gamma, delta) in enumerate(chain.states):
        Gs, Fs = G[gamma, delta], F[gamma, delta]
        FZ = 0.0
        for j in chain.successors(i):
            FZ = FZ + chain.pbar[i, j] * Z[i, int(j)]
        grid = [
            [Gs + Gs.T - X[i]],
            [None, g * np.eye(q)],
            [model.A[alpha] @ Gs + model.B[alpha] @ Fs, model.E[alpha], H[i] + H[i].T - FZ],
            [model.C[alpha] @ Gs + model.D[alpha] @ Fs, None, None, np.eye(ell)],
        ]
        prog.add_lmi(sdp.block(grid), f"hinf[{i}]", margin=eps)
    for (i, j), Zij in Z.items():
        prog.add_lmi(sdp.block([[Zij], [H[i], X[j]]]), f"couple[{i},{j}]", margin=eps)
    if prune:
        for i in range(S):
            prog.add_lmi(X[i], f"X[{i}]>0", margin=eps)
    prog.minimize(g)
    return prog, pairs


def classical_h2_design(model: MjlsModel, Q, mu_r, mu_s, backend=None,
                        margin: float | None = None) -> tuple[float, sdp.Solution]:
    """Mode-observed H2 design on the joint chain ``(r, s)``.

    Built directly from ``kron(P, Q)`` with one ``G``/``F`` per mode and
    no controller memory; this is the reference for the all-observing
    channel, where every extended state has ``gamma == alpha``.
    """
    P = model.P
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    M = Q.shape[0]
    Pj = np.kron(P, Q)
    mu = np.kron(np.asarray(mu_r, float), np.asarray(mu_s, float))
    eps = _margin(model) if margin is None else margin
    n, ell, N = model.n, model.ell, model.N
    S = N * M
    prog = sdp.Program()
    W = [prog.symmetric(f"W[{t}]", ell) for t in range(S)]
    R = [prog.symmetric(f"R[{t}]", n) for t in range(S)]
    G = [prog.variable(f"G[{a}]", (n, n)) for a in range(N)]
    F = [prog.variable(f"F[{a}]", (model.m, n)) for a in range(N)]
    gam = prog.scalar("gamma")
    for t in range(S):
        a = t // M
        inflow = 0.0
        for u in range(S):
            if Pj[u, t] != 0.0:
                inflow = inflow + Pj[u, t] * R[u]
        bottom = G[a] + G[a].T - inflow
        AG = model.A[a] @ G[a] + model.B[a] @ F[a]
        CG = model.C[a] @ G[a] + model.D[a] @ F[a]
        top = R[t] - mu[t] * (model.E[a] @ model.E[a].T)
        prog.add_lmi(sdp.block([[top], [AG.T, bottom]]), f"a[{t}]", margin=eps)
        prog.add_lmi(sdp.block([[W[t]], [CG.T, bottom]]), f"b[{t}]", margin=eps)
    prog.add_nonneg(gam - sum((w.trace() for w in W), sdp.Affine([[0.0]])) - eps, "trace")
    prog.minimize(gam)
    sol = sdp.solve(prog.build(), backend)
    return (float(sol["gamma"][0, 0]) if sol.ok else math.nan), sol
