"""Command-line front end.

Exit status is 0 on success, 1 when a design or analysis comes out
infeasible, indeterminate or unstable, and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import analysis, experiments, io, plants, sdp, simulate, synthesis
from .chain import chain_csv_rows, extended_initial_distribution, transition_matrix
from .model import FeedbackGains, InitialData, stationary_distribution, validate_model

EXIT_OK, EXIT_NEGATIVE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# argument helpers ---------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("list must not be empty")
    return vals


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def load_model_arg(text: str):
    """``ex1``/``ex2`` (or ``example1``/``example2``) or a model file path."""
    if text in plants.BUILTIN:
        return plants.BUILTIN[text](), None, None
    path = Path(text)
    if not path.exists():
        raise UsageError(f"model {text!r} is neither a built-in (ex1, ex2) nor an existing file")
    try:
        return io.load_model(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot load model {text}: {exc}") from None


def resolve_channel(args, file_obs):
    if args.channel:
        try:
            return io.parse_channel(args.channel)
        except (ValueError, OSError) as exc:
            raise UsageError(str(exc)) from None
    if file_obs is None:
        raise UsageError("no channel given: pass --channel or put a channel in the model file")
    return file_obs


def resolve_gains(text: str | None, model, T: int) -> FeedbackGains:
    if text is None or text == "zero":
        return FeedbackGains.zeros(model, T)
    try:
        gains = io.load_gains(text)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load gains {text}: {exc}") from None
    if gains.K.shape != (model.N, T, model.m, model.n):
        raise UsageError(f"gain bank has shape {gains.K.shape}, expected {(model.N, T, model.m, model.n)}")
    return gains


def resolve_initial(args, model, obs, T, file_init) -> InitialData:
    """Initial data from flags, else the model file, else uniform ``mu_r``/``nu`` and stationary ``mu_s``."""
    mu_r = args.mu_r or (file_init.mu_r if file_init is not None else np.full(model.N, 1.0 / model.N))
    mu_s = args.mu_s or (file_init.mu_s if file_init is not None else stationary_distribution(obs.Q))
    nu = None
    if getattr(args, "nu", None):
        if len(args.nu) != model.N * T:
            raise UsageError(f"--nu needs N * T = {model.N * T} entries, got {len(args.nu)}")
        nu = np.asarray(args.nu).reshape(model.N, T)
    elif file_init is not None and file_init.nu is not None and file_init.nu.shape == (model.N, T):
        nu = file_init.nu
    else:
        nu = np.full((model.N, T), 1.0 / (model.N * T))
    try:
        return InitialData(mu_r, mu_s, nu)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def backend_from(args):
    try:
        return sdp.make_backend(args.solver, args.tol)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def margin_from(args):
    return args.eps


def outdir(args) -> Path:
    path = Path(args.out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"output directory {path} is not writable: {exc}") from None
    return path


def config_of(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def inputs_of(args) -> dict:
    out = {}
    for key in ("model", "gains"):
        val = getattr(args, key, None)
        if val and Path(val).is_file():
            out[key] = {"path": val, "sha256": io.file_digest(val)}
        elif val:
            out[key] = {"builtin": val}
    ch = getattr(args, "channel", None)
    if ch and ch.startswith("file:"):
        out["channel"] = {"path": ch[5:], "sha256": io.file_digest(ch[5:])}
    return out


def emit(report: dict) -> None:
    print(json.dumps(report, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def save_report(path: Path, report: dict) -> None:
    io.write_text_atomic(path, json.dumps(report, indent=2, sort_keys=True, default=_jsonable) + "\n")


def certificate_rows(matrices: dict):
    """Long-format rows ``name, index, i, j, value`` (1-based) for matrix families."""
    rows = []
    for name, fam in matrices.items():
        arr = np.asarray(fam, dtype=float)
        if arr.ndim == 2:
            arr = arr[None]
        for idx, M in enumerate(arr.reshape((-1,) + arr.shape[-2:])):
            for (i, j), v in np.ndenumerate(M):
                rows.append([name, idx + 1, i + 1, j + 1, io.fmt(v)])
    return ["name", "index", "row", "col", "value"], rows


def eigen_rows(min_eigs: dict):
    return ["block", "min_eigenvalue"], [[k, io.fmt(v)] for k, v in min_eigs.items()]


# commands -----------------------------------------------------------------------

def cmd_validate(args) -> int:
    if args.model in plants.BUILTIN:
        report = validate_model(plants.BUILTIN[args.model]())
    else:
        try:
            doc = json.loads(Path(args.model).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read {args.model}: {exc}") from None
        try:
            io.model_from_dict(doc)
            report = []
        except (ValueError, KeyError) as exc:
            report = [str(exc)]
    emit({"model": args.model, "valid": not report, "problems": report})
    return EXIT_OK if not report else EXIT_NEGATIVE


def cmd_chain(args) -> int:
    model, file_obs, _ = load_model_arg(args.model)
    obs = resolve_channel(args, file_obs)
    chain = transition_matrix(model, obs, args.T)
    out = outdir(args)
    header, rows = chain_csv_rows(chain)
    io.write_csv(out / "chain.csv", header, rows)
    io.write_manifest(out, config_of(args), inputs_of(args), ["chain.csv"])
    emit({"states": len(chain), "file": str(out / "chain.csv")})
    return EXIT_OK


def cmd_analyze(args) -> int:
    model, file_obs, file_init = load_model_arg(args.model)
    obs = resolve_channel(args, file_obs)
    gains = resolve_gains(args.gains, model, args.T)
    cl = analysis.closed_loop(model, obs, args.T, gains)
    radius = analysis.mss_spectral_radius(cl)
    report = {"analysis": args.kind, "spectral_radius": radius, "mean_square_stable": radius < 1.0}
    cert = None
    code = EXIT_OK
    if args.kind == "mss":
        if radius >= 1.0:
            report["message"] = f"not mean square stable: spectral radius > 1 ({radius:.6g})"
            code = EXIT_NEGATIVE
        if args.lmi:
            cert = analysis.is_mss_lmi(cl, backend_from(args))
            report["lmi"] = cert.report()
    elif radius >= 1.0:
        report["message"] = f"not mean square stable: spectral radius > 1 ({radius:.6g})"
        code = EXIT_NEGATIVE
    elif args.kind == "h2":
        init = resolve_initial(args, model, obs, args.T, file_init)
        mu_bar = extended_initial_distribution(cl.chain, init)
        report["h2_norm_squared"] = analysis.h2_norm_squared(cl, mu_bar)
        report["h2_norm"] = math.sqrt(report["h2_norm_squared"])
        cert = analysis.h2_upper_bound_lmi(cl, mu_bar, backend_from(args), margin_from(args))
        report["lmi"] = cert.report()
    else:
        _, cert = analysis.hinf_minimize(cl, backend_from(args), margin=margin_from(args))
        report["lmi"] = cert.report()
        report["hinf_bound_squared"] = cert.value
        report["hinf_bound"] = math.sqrt(cert.value) if cert.value >= 0 else math.nan
        if not cert.feasible:
            code = EXIT_NEGATIVE
    if cert is not None and args.kind != "mss" and not cert.feasible:
        code = EXIT_NEGATIVE
    emit(report)
    if args.out:
        out = outdir(args)
        files = ["report.json"]
        save_report(out / "report.json", report)
        if args.certificate and cert is not None and cert.matrices:
            io.write_csv(out / "certificate.csv", *certificate_rows(cert.matrices))
            io.write_csv(out / "certificate_eigenvalues.csv", *eigen_rows(cert.min_eigenvalues))
            files += ["certificate.csv", "certificate_eigenvalues.csv"]
        io.write_manifest(out, config_of(args), inputs_of(args), files)
    return code


def cmd_synthesize(args) -> int:
    model, file_obs, file_init = load_model_arg(args.model)
    obs = resolve_channel(args, file_obs)
    backend = backend_from(args)
    if args.kind == "stabilize":
        res = synthesis.synthesize_stabilizing(model, obs, args.T, backend)
    elif args.kind == "h2":
        mu_r = args.mu_r or (file_init.mu_r if file_init is not None else np.full(model.N, 1.0 / model.N))
        mu_s = args.mu_s or (file_init.mu_s if file_init is not None else None)
        res = synthesis.synthesize_h2(model, obs, args.T, mu_r, mu_s, backend, margin=margin_from(args))
    else:
        res = synthesis.synthesize_hinf(model, obs, args.T, backend, margin=margin_from(args))
    report = res.report()
    if res.nu is not None:
        report["nu"] = res.nu.tolist()
    emit(report)
    out = outdir(args)
    files = ["report.json"]
    save_report(out / "report.json", report)
    if res.gains is not None:
        io.save_gains(out / "gains.json", res.gains)
        files.append("gains.json")
    if args.certificate and res.solution is not None and res.solution.ok:
        io.write_csv(out / "certificate.csv", *certificate_rows(res.solution.values))
        files.append("certificate.csv")
    io.write_manifest(out, config_of(args), inputs_of(args), files)
    return EXIT_OK if res.ok else EXIT_NEGATIVE


def cmd_simulate(args) -> int:
    model, file_obs, file_init = load_model_arg(args.model)
    obs = resolve_channel(args, file_obs)
    gains = resolve_gains(args.gains, model, args.T)
    x0 = np.asarray(args.x0 if args.x0 is not None else np.zeros(model.n), dtype=float)
    if x0.shape != (model.n,):
        raise UsageError(f"--x0 needs {model.n} entries, got {x0.size}")
    if args.r0 is not None or args.s0 is not None:
        if args.r0 is None or args.s0 is None:
            raise UsageError("--r0 and --s0 must be given together")
        start = simulate.FixedStart(args.r0 - 1, args.s0 - 1,
                                    None if args.sigma0 is None else args.sigma0 - 1, args.rho0 - 1)
        if not (0 <= start.r0 < model.N and 0 <= start.s0 < obs.M):
            raise UsageError("--r0/--s0 out of range (1-based)")
    else:
        start = resolve_initial(args, model, obs, args.T, file_init)
    try:
        w = simulate.parse_disturbance(args.disturbance)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    traj = simulate.simulate_closed_loop(model, obs, args.T, gains, x0, start, w, args.horizon,
                                         args.paths, simulate.RngSpec(args.seed))
    out = outdir(args)
    header, rows = simulate.trajectory_csv_rows({"sim": traj})
    io.write_csv(out / "trajectory.csv", header, rows)
    io.write_manifest(out, config_of(args), inputs_of(args), ["trajectory.csv"])
    emit({"paths": args.paths, "horizon": args.horizon,
          "time_average_mean_z2": float(np.mean(traj.mean_sq_z())),
          "file": str(out / "trajectory.csv")})
    return EXIT_OK


def cmd_sweep(args) -> int:
    model, _, file_init = load_model_arg(args.model)
    if "{x}" not in args.channel:
        raise UsageError("--channel must contain the placeholder {x}, e.g. iid:{x} or ge:{x},{x}")
    backend = backend_from(args)
    rows = []
    any_bad = False
    for x in args.grid:
        spec = args.channel.replace("{x}", repr(x))
        try:
            obs = io.parse_channel(spec)
        except ValueError as exc:
            raise UsageError(f"{spec}: {exc}") from None
        for T in args.T:
            if args.problem == "h2":
                mu_r = file_init.mu_r if file_init is not None else np.full(model.N, 1.0 / model.N)
                mu_s = file_init.mu_s if file_init is not None else None
                res = synthesis.synthesize_h2(model, obs, T, mu_r, mu_s, backend, margin=args.eps)
            elif args.problem == "hinf":
                res = synthesis.synthesize_hinf(model, obs, T, backend, margin=args.eps)
            else:
                res = synthesis.synthesize_stabilizing(model, obs, T, backend)
            any_bad |= not res.ok
            rows.append([repr(x), T, res.status, io.fmt(res.gamma) if res.ok else "nan"])
            print(f"x={x} T={T}: {res.status} gamma={res.gamma:.6g}", file=sys.stderr)
    out = outdir(args)
    io.write_csv(out / "sweep.csv", ["x", "T", "status", "gamma"], rows)
    io.write_manifest(out, config_of(args), inputs_of(args), ["sweep.csv"])
    return EXIT_NEGATIVE if any_bad else EXIT_OK


def cmd_reproduce(args) -> int:
    out = outdir(args)
    backend = backend_from(args)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    if args.study == "example1":
        sweep = experiments.example1_sweep(backend=backend, progress=log)
        io.write_csv(out / "example1_h2.csv", *experiments.example1_rows(sweep))
        checks = experiments.trend_checks_example1(sweep)
        achieved = experiments.trend_checks_example1(sweep, key="h2_norm_squared")
        summary = {"bound_trends": checks, "achieved_norm_trends": achieved}
        files = ["example1_h2.csv", "example1_trends.json"]
        save_report(out / "example1_trends.json",
                    {k: [{"check": c, "pass": ok} for c, ok in v] for k, v in summary.items()})
        for name, lst in summary.items():
            for c, ok in lst:
                print(f"{'PASS' if ok else 'FAIL'} [{name}] {c}")
        ok_all = all(ok for c, ok in checks)
    else:
        sweep = experiments.example2_sweep(backend=backend, progress=log)
        io.write_csv(out / "example2_hinf.csv", *experiments.example2_rows(sweep))
        checks = experiments.trend_checks_example2(sweep)
        study = experiments.example2_trajectories(seed=args.seed, backend=backend)
        header, rows = simulate.trajectory_csv_rows({f"T{T}": tr for T, tr in study.trajectories.items()})
        io.write_csv(out / "example2_trajectories.csv", header, rows)
        gains_rows = [[T, io.fmt(study.designs[T].gamma), io.fmt(math.sqrt(study.designs[T].gamma)),
                       io.fmt(g), io.fmt(study.time_average(T))] for T, g in study.gains.items()]
        io.write_csv(out / "example2_gains.csv",
                     ["T", "hinf_bound_squared", "hinf_bound", "empirical_gain", "time_average_mean_z2"],
                     gains_rows)
        files = ["example2_hinf.csv", "example2_trajectories.csv", "example2_gains.csv"]
        for c, ok in checks:
            print(f"{'PASS' if ok else 'FAIL'} {c}")
        ok_all = all(ok for c, ok in checks)
    io.write_manifest(out, config_of(args), {}, files)
    return EXIT_OK if ok_all else EXIT_NEGATIVE


# parser -------------------------------------------------------------------------

def _add_problem_args(p, channel=True, T=True):
    p.add_argument("--model", required=True, help="ex1, ex2 or a model file")
    if channel:
        p.add_argument("--channel", help="ge:p,q | iid:pf | periodic:l,p | file:<path>")
    if T:
        p.add_argument("--T", type=_positive_int, default=1, help="gain period")


def _add_solver_args(p):
    p.add_argument("--solver", default="default", help="default, clarabel or cvxopt")
    p.add_argument("--tol", type=float, default=None, help="solver tolerance")
    p.add_argument("--eps", type=float, default=None,
                   help="strict-inequality margin (default scales with the plant matrices)")


def _add_initial_args(p):
    p.add_argument("--mu-r", type=_floats, default=None, help="initial mode distribution")
    p.add_argument("--mu-s", type=_floats, default=None, help="initial channel distribution")
    p.add_argument("--nu", type=_floats, default=None,
                   help="initial (sigma0, rho0) distribution, row-major N x T")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mjls-hidden", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a model file")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("chain", help="dump the extended chain as CSV")
    _add_problem_args(p)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_chain)

    p = sub.add_parser("analyze", help="stability and performance of a given gain bank")
    p.add_argument("kind", choices=["mss", "h2", "hinf"])
    _add_problem_args(p)
    p.add_argument("--gains", default="zero", help="'zero' or a gains file")
    p.add_argument("--lmi", action="store_true", help="also search for an LMI stability certificate")
    p.add_argument("--certificate", action="store_true", help="dump certificate matrices to CSV")
    p.add_argument("--out", default=None)
    _add_solver_args(p)
    _add_initial_args(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("synthesize", help="design a periodic gain bank")
    p.add_argument("kind", choices=["stabilize", "h2", "hinf"])
    _add_problem_args(p)
    p.add_argument("--certificate", action="store_true", help="dump all solver matrices to CSV")
    p.add_argument("--out", default="out")
    _add_solver_args(p)
    _add_initial_args(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("simulate", help="Monte Carlo closed-loop trajectories")
    _add_problem_args(p)
    p.add_argument("--gains", default="zero")
    p.add_argument("--x0", type=_floats, default=None)
    p.add_argument("--r0", type=int, default=None, help="fixed initial mode (1-based)")
    p.add_argument("--s0", type=int, default=None, help="fixed initial channel state (1-based)")
    p.add_argument("--sigma0", type=int, default=None, help="fixed last observed mode (1-based)")
    p.add_argument("--rho0", type=int, default=1, help="fixed initial phase (1-based)")
    p.add_argument("--disturbance", default="zero", help="zero | impulse:i | cos:amp,freq | noise:var")
    p.add_argument("--paths", type=_positive_int, default=300)
    p.add_argument("--horizon", type=_positive_int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    _add_initial_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="synthesis over a channel parameter grid")
    p.add_argument("problem", choices=["stabilize", "h2", "hinf"])
    p.add_argument("--model", required=True)
    p.add_argument("--channel", required=True, help="channel template with {x}, e.g. iid:{x}")
    p.add_argument("--grid", type=_floats, required=True, help="comma-separated values for {x}")
    p.add_argument("--T", type=_ints, default=[1], help="comma-separated periods")
    p.add_argument("--out", default="out")
    _add_solver_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("reproduce", help="rerun one of the two benchmark studies")
    p.add_argument("study", choices=["example1", "example2"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--verbose", action="store_true")
    _add_solver_args(p)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "grid", None) == []:
        parser.error("--grid must not be empty")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
