import json

import numpy as np
import pytest

from conftest import random_model
from mjls_hidden import io, plants
from mjls_hidden.model import FeedbackGains, InitialData, gilbert_elliott, periodic_with_failures


def test_model_round_trip_is_lossless(tmp_path, rng):
    model = random_model(rng, N=3, n=3, m=2, ell=2, q=2)
    obs = periodic_with_failures(3, 0.1 + 1 / 3)
    init = InitialData(rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(6)).reshape(3, 2))
    path = tmp_path / "m.json"
    io.save_model(path, model, obs, init)
    m2, o2, i2 = io.load_model(path)
    for key in "ABCDE":
        for a, b in zip(getattr(model, key), getattr(m2, key)):
            assert np.array_equal(a, b)
    assert np.array_equal(o2.Q, obs.Q) and o2.f == obs.f
    assert np.array_equal(i2.nu, init.nu)
    io.save_model(tmp_path / "m2.json", m2, o2, i2)
    assert (tmp_path / "m2.json").read_text() == path.read_text()


def test_round_trip_keeps_17_significant_digits(tmp_path):
    x = 0.12345678901234567
    model = plants.example2().with_matrices(A=[np.full((2, 2), x), np.eye(2)])
    io.save_model(tmp_path / "m.json", model)
    m2, _, _ = io.load_model(tmp_path / "m.json")
    assert f"{m2.A[0][0, 0]:.17g}" == f"{x:.17g}"


def test_preset_channel_in_file(tmp_path):
    doc = io.model_to_dict(plants.example2())
    doc["channel"] = {"preset": "ge", "params": {"p": 0.3, "q": 0.3}}
    model, obs, init = io.model_from_dict(doc)
    np.testing.assert_allclose(obs.Q, gilbert_elliott(0.3, 0.3).Q)
    assert init is None
    doc["channel"] = {"preset": "ge", "params": {"p": 0.3}}
    with pytest.raises(ValueError, match="missing q"):
        io.model_from_dict(doc)


def test_rows_within_tolerance_are_renormalized():
    doc = io.model_to_dict(plants.example2())
    doc["P"] = [[0.1, 0.9 + 4e-13], [0.7, 0.3]]
    model, _, _ = io.model_from_dict(doc)
    assert model.P[0].sum() == pytest.approx(1.0, abs=1e-15)
    doc["P"] = [[0.1, 0.95], [0.7, 0.3]]
    with pytest.raises(ValueError, match="row 1"):
        io.model_from_dict(doc)


def test_dimension_header_is_checked():
    doc = io.model_to_dict(plants.example2())
    doc["dimensions"]["n"] = 3
    with pytest.raises(ValueError, match="dimension mismatch"):
        io.model_from_dict(doc)
    del doc["A"]
    with pytest.raises(ValueError, match="missing A"):
        io.model_from_dict(doc)


@pytest.mark.parametrize("spec,M,f", [
    ("ge:0.3,0.4", 2, (1, 0)),
    ("iid:0.5", 2, (1, 0)),
    ("periodic:3,0.5", 4, (1, 0, 0, 0)),
])
def test_parse_channel(spec, M, f):
    obs = io.parse_channel(spec)
    assert obs.M == M and obs.f == f


@pytest.mark.parametrize("spec", ["ge:0.3", "iid", "foo:1", "iid:x", "periodic:1.5,0.5", "ge:2,0.1"])
def test_parse_channel_rejects(spec):
    with pytest.raises(ValueError):
        io.parse_channel(spec)


def test_channel_file(tmp_path):
    path = tmp_path / "ch.json"
    path.write_text(json.dumps({"Q": [[0.5, 0.5], [0.2, 0.8]], "f": [0, 1]}))
    obs = io.parse_channel(f"file:{path}")
    assert obs.f == (0, 1)


def test_gains_round_trip(tmp_path, rng):
    gains = FeedbackGains(rng.standard_normal((2, 3, 1, 2)))
    io.save_gains(tmp_path / "g.json", gains)
    back = io.load_gains(tmp_path / "g.json")
    assert np.array_equal(back.K, gains.K)
    doc = json.loads((tmp_path / "g.json").read_text())
    doc["gains"]["T"] = 2
    with pytest.raises(ValueError):
        io.gains_from_dict(doc)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    io.write_csv(tmp_path / "a.csv", ["x", "y"], [[1, 2], [3, 4]])
    assert (tmp_path / "a.csv").read_text() == "x,y\n1,2\n3,4\n"
    assert [p.name for p in tmp_path.iterdir()] == ["a.csv"]


def test_manifest_hashes_outputs(tmp_path):
    io.write_csv(tmp_path / "a.csv", ["x"], [[1]])
    path = io.write_manifest(tmp_path, {"seed": 0}, {}, ["a.csv"])
    doc = json.loads(path.read_text())
    assert doc["outputs"]["a.csv"] == io.file_digest(tmp_path / "a.csv")
    assert doc["config"] == {"seed": 0}
    assert "numpy" in doc["versions"]


def test_fmt_round_trips():
    for x in (0.1, 1 / 3, 1e-300, float("inf")):
        assert float(io.fmt(x)) == x
