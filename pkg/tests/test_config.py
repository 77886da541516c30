import copy

import numpy as np
import pytest
import tomli

from conftest import load
from rpcbf.cli import resolve_config
from rpcbf.config import ConfigError, DesignBundle, ExperimentConfig, design_hash
from rpcbf.design import build_spec, report_text, synthesize


def raw(name):
    with open(resolve_config(name), "rb") as fh:
        return tomli.load(fh)


@pytest.mark.parametrize("name", ["toy1d", "cwh", "lane"])
def test_shipped_configs_load(name):
    cfg = load(name)
    assert cfg.scenario == raw(name)["simulation"]["scenario"]
    assert len(cfg.config_hash) == 16


def test_shipped_numbers():
    cwh, lane = load("cwh"), load("lane")
    assert cwh.horizon() == 200 and cwh.horizon("ci") == 50
    assert cwh.simulation["steps"] == 400 and lane.simulation["steps"] == 300
    assert lane.horizon() == 20
    assert cwh.controller["alpha_f"] == 1e6 and cwh.controller["pad_step"] == 1e-3
    assert lane.constraints["steering_change_bound_deg"] == 17.5


def test_reconstructed_values_are_marked():
    for name in ("cwh", "lane"):
        text = resolve_config(name).read_text()
        assert "# reconstructed" in text


@pytest.mark.parametrize("section,key,value,path", [
    ("model", "ts", 1.0, "model.ts"),
    ("controller", "horizon", -3, "controller.horizon"),
    ("constraints", "input_bound_au", "big", "constraints.input_bound_au"),
    ("simulation", "x0", [1.0, 2.0], "simulation.x0"),
    ("objective", "kind", "speed", "objective.kind"),
])
def test_bad_keys_report_path(section, key, value, path):
    doc = copy.deepcopy(raw("cwh"))
    doc[section][key] = value
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict(doc)
    assert exc.value.path == path


def test_missing_key_and_section():
    doc = raw("cwh")
    del doc["model"]["ts_s"]
    with pytest.raises(ConfigError, match="model.ts_s"):
        ExperimentConfig.from_dict(doc)
    doc = raw("cwh")
    doc["extra"] = {}
    with pytest.raises(ConfigError, match="extra"):
        ExperimentConfig.from_dict(doc)


def test_hash_changes_with_content():
    doc = raw("toy1d")
    a = ExperimentConfig.from_dict(doc).config_hash
    doc["simulation"]["seed"] = 99
    assert ExperimentConfig.from_dict(doc).config_hash != a


def test_bundle_round_trip(tmp_path, toy):
    cfg, bundle, _ = toy
    path = tmp_path / "toy.bundle.toml"
    bundle.save(path)
    back = DesignBundle.load(path)
    np.testing.assert_array_equal(back.tube.E.shape, bundle.tube.E.shape)
    np.testing.assert_array_equal(back.cbf.P, bundle.cbf.P)
    assert back.cbf.gamma_f == bundle.cbf.gamma_f
    assert back.config_hash == design_hash(cfg, bundle.horizon)
    assert "gamma_f" in report_text(cfg, back)
    assert np.sqrt(back.tube.E.shape[0, 0]) == pytest.approx(0.1)


def test_bundle_mismatch_rejected(toy):
    cfg, bundle, _ = toy
    doc = raw("toy1d")
    doc["constraints"]["state_bound_au"] = 2.0
    other = ExperimentConfig.from_dict(doc)
    with pytest.raises(ConfigError, match="config_hash"):
        build_spec(other, bundle)


def test_bundle_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        DesignBundle.load(tmp_path / "none.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("this is = = not toml")
    with pytest.raises(ConfigError, match="malformed"):
        DesignBundle.load(bad)
    bad.write_text("[meta]\nversion = 1\n")
    with pytest.raises(ConfigError, match="missing"):
        DesignBundle.load(bad)


def test_synthesis_report_fields(cwh_ci):
    _, bundle, _ = cwh_ci
    r = bundle.report
    assert r["sf_contained"] and r["terminal_violations"] == 0
    assert 0 < r["lambda"] < 1 and r["gamma_f"] > 0 and r["rho"] < 1
    assert len(r["state_tightening"]) == 12


def test_synthesize_is_deterministic():
    cfg = load("toy1d")
    a = synthesize(cfg, cfg.horizon()).to_dict()
    b = synthesize(cfg, cfg.horizon()).to_dict()
    assert a == b
