import json

import pytest

from neural_gaits import config as C


def test_default_round_trip(tmp_path):
    cfg = C.default_config(3)
    p = tmp_path / "c.json"
    cfg.save(p)
    again = C.load(p)
    assert again.dumps() == cfg.dumps()
    assert again.train.seed == 3 and again.sim.seed == 3


def test_partial_config_fills_defaults():
    cfg = C.from_dict({"seed": 1, "train": {"epochs": 5}})
    assert cfg.train.epochs == 5 and cfg.train.seed == 1
    assert cfg.train.lr == 1e-2 and cfg.train.decay_epochs == (100, 400, 800)
    assert cfg.surrogate.to_dict() != cfg.nominal.to_dict()


@pytest.mark.parametrize("doc", [{}, {"seed": -1}, {"seed": 0, "bogus": 1}, {"seed": 0, "loss_threshold": 0},
                                 {"seed": 0, "regions": {"Z_O": {"z1": [0, 1]}}},
                                 {"seed": 0, "nominal": {"m_torso": "heavy"}}])
def test_schema_errors(doc):
    with pytest.raises(C.ConfigError):
        C.from_dict(doc)


def test_value_errors_become_config_errors():
    with pytest.raises(C.ConfigError):
        C.from_dict({"seed": 0, "train": {"epochs": 0}})
    with pytest.raises(C.ConfigError):
        C.from_dict({"seed": 0, "train": {"no_such_field": 0}})
    with pytest.raises(C.ConfigError):
        C.from_dict({"seed": 0, "regions": {"elsewhere": {"z1": [0, 1], "z2": [0, 1]}}})


def test_bad_json_and_missing_file(tmp_path):
    with pytest.raises(C.ConfigError):
        C.loads("{seed: 0")
    with pytest.raises(C.ConfigError):
        C.load(tmp_path / "nope.json")


def test_output_dir_env_override(monkeypatch):
    cfg = C.from_dict({"seed": 0, "output_dir": "here"})
    monkeypatch.delenv(C.OUTPUT_ENV, raising=False)
    assert cfg.resolved_output_dir() == "here"
    monkeypatch.setenv(C.OUTPUT_ENV, "/tmp/elsewhere")
    assert cfg.resolved_output_dir() == "/tmp/elsewhere"


def test_refine_config_uses_surrogate_plant():
    cfg = C.from_dict({"seed": 0, "refine_train_epochs": 7})
    r = cfg.refine_config()
    assert r.train.epochs == 7
    assert r.sim.plant.to_dict() == cfg.surrogate.to_dict()
    assert json.loads(cfg.dumps())["refine_train_epochs"] == 7
