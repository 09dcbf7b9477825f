import numpy as np
import pytest

from mjls_hidden.model import MjlsModel, ObservationProcess


def random_stochastic(rng, k, zero_prob=0.0):
    M = rng.random((k, k))
    if zero_prob:
        M[rng.random((k, k)) < zero_prob] = 0.0
        for i in range(k):
            if M[i].sum() == 0.0:
                M[i, rng.integers(k)] = 1.0
    return M / M.sum(axis=1, keepdims=True)


def random_model(rng, N=2, n=2, m=1, ell=1, q=1, scale=1.0, name="random"):
    return MjlsModel(
        A=[scale * rng.standard_normal((n, n)) for _ in range(N)],
        B=[rng.standard_normal((n, m)) for _ in range(N)],
        C=[rng.standard_normal((ell, n)) for _ in range(N)],
        D=[rng.standard_normal((ell, m)) for _ in range(N)],
        E=[rng.standard_normal((n, q)) for _ in range(N)],
        P=random_stochastic(rng, N),
        name=name,
    )


def random_channel(rng, M=2, zero_prob=0.0):
    f = [int(b) for b in rng.integers(0, 2, size=M)]
    if M > 1 and not any(f):
        f[0] = 1
    return ObservationProcess(random_stochastic(rng, M, zero_prob), tuple(f), name="random")


def scalar_model(a, b=0.0, c=1.0, d=0.0, e=1.0):
    return MjlsModel(A=[[[a]]], B=[[[b]]], C=[[[c]]], D=[[[d]]], E=[[[e]]], P=[[1.0]], name="scalar")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(verdicts):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
