"""Model, channel and gain-bank files plus CSV/manifest writers.

Model and gain files are JSON documents.  Floats are written with Python's
shortest round-trip representation, so load/save/load is lossless.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import platform
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .model import (FeedbackGains, InitialData, MjlsModel, ObservationProcess, gilbert_elliott,
                    iid_failures, periodic_with_failures, renormalize_rows)

PRESETS = {
    "ge": (gilbert_elliott, ("p", "q")),
    "iid": (iid_failures, ("p_f",)),
    "periodic": (periodic_with_failures, ("period", "p")),
}


def _nested(a) -> list:
    return np.asarray(a, dtype=float).tolist()


# channels -------------------------------------------------------------------

def parse_channel(spec: str) -> ObservationProcess:
    """Channel from ``ge:p,q``, ``iid:pf``, ``periodic:l,p`` or ``file:<path>``."""
    kind, sep, arg = spec.partition(":")
    if not sep:
        raise ValueError(f"channel spec {spec!r} needs the form kind:params")
    if kind == "file":
        doc = json.loads(Path(arg).read_text())
        return channel_from_dict(doc.get("channel", doc))
    if kind not in PRESETS:
        raise ValueError(f"unknown channel kind {kind!r}; use ge, iid, periodic or file")
    ctor, names = PRESETS[kind]
    parts = [p for p in arg.split(",") if p]
    if len(parts) != len(names):
        raise ValueError(f"channel {kind} takes {len(names)} parameter(s) ({', '.join(names)}), "
                         f"got {len(parts)}")
    try:
        values = [float(p) for p in parts]
    except ValueError:
        raise ValueError(f"channel parameters must be numbers, got {arg!r}") from None
    if kind == "periodic":
        if values[0] != int(values[0]):
            raise ValueError(f"period must be an integer, got {parts[0]}")
        values[0] = int(values[0])
    return ctor(*values)


def channel_from_dict(doc: dict) -> ObservationProcess:
    if "preset" in doc:
        kind = doc["preset"]
        if kind not in PRESETS:
            raise ValueError(f"unknown channel preset {kind!r}")
        ctor, names = PRESETS[kind]
        params = doc.get("params", {})
        missing = [k for k in names if k not in params]
        if missing:
            raise ValueError(f"channel preset {kind} is missing {', '.join(missing)}")
        return ctor(*(params[k] for k in names))
    Q = renormalize_rows(np.atleast_2d(np.asarray(doc["Q"], dtype=float)), "Q")
    return ObservationProcess(Q, tuple(doc["f"]), name=doc.get("name", ""))


def channel_to_dict(obs: ObservationProcess) -> dict:
    return {"Q": _nested(obs.Q), "f": list(obs.f), "name": obs.name}


# models -----------------------------------------------------------------------

def model_to_dict(model: MjlsModel, obs: ObservationProcess | None = None,
                  init: InitialData | None = None) -> dict:
    doc = {
        "name": model.name,
        "dimensions": {"N": model.N, "n": model.n, "m": model.m, "ell": model.ell, "q": model.q},
        "P": _nested(model.P),
    }
    for key in "ABCDE":
        doc[key] = [_nested(M) for M in getattr(model, key)]
    if obs is not None:
        doc["channel"] = channel_to_dict(obs)
    if init is not None:
        doc["initial"] = {"mu_r": _nested(init.mu_r), "mu_s": _nested(init.mu_s)}
        if init.nu is not None:
            doc["initial"]["nu"] = _nested(init.nu)
    return doc


def model_from_dict(doc: dict):
    """Return ``(model, channel or None, initial data or None)``.

    ``P`` and ``Q`` rows within 1e-12 of stochastic are renormalized; the
    model is then validated and any violation raises ``ValueError``.
    """
    missing = [k for k in ("A", "B", "C", "D", "E", "P") if k not in doc]
    if missing:
        raise ValueError(f"model file is missing {', '.join(missing)}")
    P = renormalize_rows(np.atleast_2d(np.asarray(doc["P"], dtype=float)), "P")
    model = MjlsModel(A=doc["A"], B=doc["B"], C=doc["C"], D=doc["D"], E=doc["E"], P=P,
                      name=doc.get("name", ""))
    model.check()
    dims = doc.get("dimensions", {})
    actual = {"N": model.N, "n": model.n, "m": model.m, "ell": model.ell, "q": model.q}
    wrong = [f"{k} = {dims[k]} but the matrices give {actual[k]}" for k in dims if dims[k] != actual.get(k)]
    if wrong:
        raise ValueError("dimension mismatch: " + "; ".join(wrong))
    obs = channel_from_dict(doc["channel"]) if "channel" in doc else None
    init = None
    if "initial" in doc:
        ini = doc["initial"]
        init = InitialData(ini["mu_r"], ini["mu_s"], ini.get("nu"))
    return model, obs, init


def load_model(path) -> tuple:
    return model_from_dict(json.loads(Path(path).read_text()))


def save_model(path, model: MjlsModel, obs=None, init=None) -> None:
    write_text_atomic(path, json.dumps(model_to_dict(model, obs, init), indent=2) + "\n")


# gains --------------------------------------------------------------------------

def gains_to_dict(gains: FeedbackGains) -> dict:
    N, T, m, n = gains.K.shape
    return {"gains": {"N": N, "T": T, "m": m, "n": n, "K": _nested(gains.K)}}


def gains_from_dict(doc: dict) -> FeedbackGains:
    g = doc["gains"]
    K = np.asarray(g["K"], dtype=float)
    expected = (g["N"], g["T"], g["m"], g["n"])
    if K.shape != expected:
        raise ValueError(f"gain bank has shape {K.shape}, header says {expected}")
    return FeedbackGains(K)


def load_gains(path) -> FeedbackGains:
    return gains_from_dict(json.loads(Path(path).read_text()))


def save_gains(path, gains: FeedbackGains) -> None:
    write_text_atomic(path, json.dumps(gains_to_dict(gains), indent=2) + "\n")


# writers --------------------------------------------------------------------------

def write_text_atomic(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    write_text_atomic(path, csv_text(header, rows))


def fmt(x) -> str:
    """Shortest round-trip text for a float (``nan``/``inf`` spelled out)."""
    return repr(float(x))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def versions() -> dict:
    out = {"mjls_hidden": __version__, "python": platform.python_version(), "numpy": np.__version__}
    for mod in ("scipy", "clarabel", "cvxopt"):
        try:
            out[mod] = __import__(mod).__version__
        except (ImportError, AttributeError):
            out[mod] = "unavailable"
    return out


def write_manifest(outdir, config: dict, inputs: dict, outputs: list[str]) -> Path:
    """``manifest.json`` with the run configuration, input hashes and output hashes."""
    outdir = Path(outdir)
    doc = {
        "config": config,
        "inputs": inputs,
        "outputs": {name: file_digest(outdir / name) for name in outputs},
        "versions": versions(),
    }
    path = outdir / "manifest.json"
    write_text_atomic(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
