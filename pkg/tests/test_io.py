import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dpjl.io import (ConfigError, RunManifest, apply_overrides, export_curve_csv, fmt_float,
                     format_spec_comment, load_config, read_curve_csv)
from dpjl.tradeoff import gaussian_curve, identity_curve


def test_identity_curve_rows(tmp_path):
    path = export_curve_csv(identity_curve(), tmp_path / "id.csv",
                            format_spec_comment(1.0, None, 0.5, 1, 1e-4))
    lines = path.read_text().splitlines()
    assert lines[1] == "alpha,beta"
    for line in lines[2:]:
        a, b = map(float, line.split(","))
        assert b == 1 - a


def test_tradeoff_round_trip(tmp_path):
    curve = gaussian_curve(1.3)
    comment = format_spec_comment(0.6, 5, 256 / 25000, 1470, 1e-4, clamp=32.0)
    table = read_curve_csv(export_curve_csv(curve, tmp_path / "g.csv", comment))
    assert table.columns == ("alpha", "beta")
    assert np.array_equal(table.x, curve.alphas) and np.array_equal(table.y, curve.betas)
    assert set(table.spec) == {"sigma", "r", "p", "T", "delta_eps", "clamp"}
    assert (table.spec["r"], table.spec["T"], table.spec["clamp"]) == ("5", "1470", "32")
    assert float(table.spec["sigma"]) == 0.6 and float(table.spec["p"]) == 256 / 25000
    assert float(table.spec["delta_eps"]) == 1e-4


def test_eps_delta_round_trip(tmp_path):
    eps, delta = np.linspace(0, 3, 7), np.geomspace(1e-2, 1e-9, 7)
    table = read_curve_csv(export_curve_csv((eps, delta), tmp_path / "e.csv",
                                            format_spec_comment(1.0, None, 0.1, 3, 1e-3)))
    assert table.columns == ("epsilon", "delta") and table.spec["r"] == "exact"
    np.testing.assert_allclose(table.y, delta, rtol=1e-15)


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_float_round_trips(v):
    assert float(fmt_float(v)) == v


def test_curve_format_errors(tmp_path):
    with pytest.raises(ValueError):
        export_curve_csv(identity_curve(), tmp_path / "x.csv", "sigma=1")
    with pytest.raises(ValueError):
        export_curve_csv((np.zeros(3), np.zeros(2)), tmp_path / "x.csv", "# spec sigma=1")
    (tmp_path / "bad.csv").write_text("alpha,beta\n0,1\n")
    with pytest.raises(ValueError, match="spec"):
        read_curve_csv(tmp_path / "bad.csv")
    (tmp_path / "bad2.csv").write_text("# spec sigma=1 r=2\nalpha,beta\n")
    with pytest.raises(ValueError, match="lacks"):
        read_curve_csv(tmp_path / "bad2.csv")


def test_overrides():
    cfg = {"train": {"batch_size": 8}, "seed": 1}
    out = apply_overrides(cfg, ["train.batch_size=16", "train.optimizer=dp-sgd", "data.limit_train=5",
                                "train.clip_norm=[1, 2]"])
    assert out["train"] == {"batch_size": 16, "optimizer": "dp-sgd", "clip_norm": [1, 2]}
    assert out["data"] == {"limit_train": 5}
    assert cfg == {"train": {"batch_size": 8}, "seed": 1}
    for bad in ("noequals", "=3", "seed.x=1"):
        with pytest.raises(ConfigError):
            apply_overrides(cfg, [bad])


def test_load_config(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")


def test_manifest_round_trip(tmp_path):
    m = RunManifest("train", {"seed": 3}, 3, {"metrics": "m.csv"}, {"delta_eps": 1e-4}, results={"steps": 2})
    path = m.write(tmp_path / "run_manifest.json")
    assert RunManifest.read(path) == m
    assert json.loads(path.read_text())["format"] == RunManifest.FORMAT
    assert load_config(path) == {"seed": 3}
    (tmp_path / "other.json").write_text("{}")
    with pytest.raises(ValueError):
        RunManifest.read(tmp_path / "other.json")
