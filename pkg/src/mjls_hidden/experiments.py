"""Parameter sweeps and the two benchmark studies.

``example1_sweep`` designs H2 controllers over Gilbert-Elliott channels with
``p = q``; ``example2_sweep`` designs H-infinity controllers over i.i.d.
observation failures; ``example2_trajectories`` simulates the ``T = 1`` and
``T = 5`` designs under a cosine disturbance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import analysis, plants, simulate, synthesis
from .model import gilbert_elliott, iid_failures

EXAMPLE1_INV_P = (1, 2, 4, 8, 16, 32)
EXAMPLE1_T = (1, 2, 5)
EXAMPLE2_PF = tuple(round(0.1 * i, 10) for i in range(11))
EXAMPLE2_T = (1, 2, 3, 5, 6)
TRAJ_HORIZON = 200
TRAJ_PATHS = 300
TRAJ_X0 = (1.0, 2.0)


@dataclass
class SweepPoint:
    params: dict
    result: synthesis.SynthesisResult

    def row(self) -> dict:
        out = dict(self.params)
        out["status"] = self.result.status
        out["gamma"] = self.result.gamma
        return out


@dataclass
class Sweep:
    points: list = field(default_factory=list)

    def value(self, key: str = "gamma", **params) -> float:
        for pt in self.points:
            if all(pt.params.get(k) == v for k, v in params.items()):
                if key == "gamma":
                    return pt.result.gamma if pt.result.ok else math.inf
                return pt.result.verification.get(key, math.nan)
        raise KeyError(params)


def example1_sweep(inv_p=EXAMPLE1_INV_P, periods=EXAMPLE1_T, backend=None, progress=None) -> Sweep:
    """H2 designs for the four-state plant; ``mu_s`` uniform, ``p = q = 1 / inv_p``."""
    model = plants.example1()
    sweep = Sweep()
    for k in inv_p:
        obs = gilbert_elliott(1.0 / k, 1.0 / k)
        for T in periods:
            res = synthesis.synthesize_h2(model, obs, T, plants.EXAMPLE1_MU_R, [0.5, 0.5],
                                          backend=backend)
            sweep.points.append(SweepPoint({"inv_p": k, "T": T}, res))
            if progress:
                progress(f"inv_p={k} T={T}: {res.status} gamma={res.gamma:.6g}")
    return sweep


def example1_rows(sweep: Sweep):
    header = ["inv_p", "T", "status", "h2_bound", "h2_bound_squared", "h2_achieved"]
    rows = []
    for pt in sweep.points:
        r = pt.result
        ach = r.verification.get("h2_norm_squared", math.nan)
        rows.append([pt.params["inv_p"], pt.params["T"], r.status,
                     repr(math.sqrt(r.gamma)) if r.ok else "nan",
                     repr(r.gamma) if r.ok else "nan",
                     repr(math.sqrt(ach)) if r.ok else "nan"])
    return header, rows


def example2_sweep(p_f=EXAMPLE2_PF, periods=EXAMPLE2_T, backend=None, progress=None) -> Sweep:
    """H-infinity designs for the two-state plant over i.i.d. failures."""
    model = plants.example2()
    sweep = Sweep()
    for pf in p_f:
        obs = iid_failures(pf)
        for T in periods:
            res = synthesis.synthesize_hinf(model, obs, T, backend=backend)
            sweep.points.append(SweepPoint({"p_f": pf, "T": T}, res))
            if progress:
                progress(f"p_f={pf} T={T}: {res.status} gamma={res.gamma:.6g}")
    return sweep


def example2_rows(sweep: Sweep):
    header = ["p_f", "T", "status", "hinf_bound_squared", "hinf_bound"]
    rows = []
    for pt in sweep.points:
        r = pt.result
        rows.append([repr(pt.params["p_f"]), pt.params["T"], r.status,
                     repr(r.gamma) if r.ok else "nan",
                     repr(math.sqrt(r.gamma)) if r.ok else "nan"])
    return header, rows


def trend_checks_example1(sweep: Sweep, inv_p=EXAMPLE1_INV_P, periods=EXAMPLE1_T,
                          key: str = "gamma", tol: float = 1e-6) -> list[tuple[str, bool]]:
    """Monotonicity of ``sqrt(value)`` in ``T`` and in ``1/p``.

    ``key="gamma"`` checks the certified bound (infeasible points count as
    ``+inf``); ``key="h2_norm_squared"`` checks the closed-loop norm.
    """
    def v(k, T):
        x = sweep.value(key, inv_p=k, T=T)
        return math.sqrt(x) if x >= 0 else math.nan

    checks = []
    for k in inv_p:
        vals = [v(k, T) for T in periods]
        ok = all(b <= a + tol for a, b in zip(vals, vals[1:]))
        checks.append((f"1/p={k}: nonincreasing in T {fmt_list(vals)}", ok))
    for T in periods:
        vals = [v(k, T) for k in inv_p]
        ok = all(b >= a - tol for a, b in zip(vals, vals[1:]))
        checks.append((f"T={T}: nondecreasing in 1/p {fmt_list(vals)}", ok))
    return checks


def trend_checks_example2(sweep: Sweep, p_f=EXAMPLE2_PF, periods=EXAMPLE2_T,
                          tol: float = 1e-6) -> list[tuple[str, bool]]:
    checks = []
    for pf in p_f:
        g = {T: sweep.value(p_f=pf, T=T) for T in periods}
        checks.append((f"p_f={pf}: all feasible", all(math.isfinite(x) for x in g.values())))
        checks.append((f"p_f={pf}: gamma(T) <= gamma(1) + tol",
                       all(g[T] <= g[1] + tol for T in periods)))
        if 3 in g and 6 in g:
            checks.append((f"p_f={pf}: gamma(6) <= gamma(3) + tol", g[6] <= g[3] + tol))
    return checks


def fmt_list(vals) -> str:
    return "[" + ", ".join(f"{x:.6g}" for x in vals) + "]"


@dataclass
class TrajectoryStudy:
    designs: dict  # T -> SynthesisResult
    trajectories: dict  # T -> Trajectory
    gains: dict  # T -> empirical gain

    def time_average(self, T: int) -> float:
        return float(np.mean(self.trajectories[T].mean_sq_z()))


def example2_trajectories(p_f: float = 0.5, periods=(1, 5), n_paths: int = TRAJ_PATHS,
                          horizon: int = TRAJ_HORIZON, seed: int = 0, backend=None) -> TrajectoryStudy:
    """Simulate the designs for each period along the same sampled paths.

    Starts from ``x0 = [1, 2]`` with the first mode and the first (observing)
    channel state; ``w(k) = 2 cos(k / 2)``.  Every design sees the same random
    streams, so the comparison across periods is paired.
    """
    model = plants.example2()
    obs = iid_failures(p_f)
    start = simulate.FixedStart(0, 0)
    w = simulate.Cosine(2.0, 0.5)
    designs, trajs, gains = {}, {}, {}
    for T in periods:
        res = synthesis.synthesize_hinf(model, obs, T, backend=backend)
        designs[T] = res
        if not res.ok:
            continue
        rng = simulate.RngSpec(seed)
        trajs[T] = simulate.simulate_closed_loop(model, obs, T, res.gains, TRAJ_X0, start, w,
                                                 horizon, n_paths, rng)
        gains[T] = simulate.empirical_gain(model, obs, T, res.gains, w, start, n_paths, horizon, rng)
    return TrajectoryStudy(designs, trajs, gains)


def example2_open_loop_radius(p_f: float = 0.5) -> float:
    """Mean square spectral radius of the uncontrolled two-state plant."""
    model = plants.example2()
    obs = iid_failures(p_f)
    from .model import FeedbackGains

    cl = analysis.closed_loop(model, obs, 1, FeedbackGains.zeros(model, 1))
    return analysis.mss_spectral_radius(cl)
