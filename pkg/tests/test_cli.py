import json
import os

import pytest

from neural_gaits import cli
from neural_gaits import config as C

TINY = {"seed": 0, "train": {"epochs": 3, "n_per_region": 32, "n_eval": 64, "prior_steps": 2},
        "sim": {"max_steps": 1, "max_time": 2.0},
        "verify": {"n_samples": 1000, "n_pairs": 2000}}


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def read(path):
    with open(path, "rb") as f:
        return f.read()


def test_train_is_byte_deterministic(tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    ra = cli.main(["train", "--config", tiny, "--out", str(a), "--quiet"])
    rb = cli.main(["train", "--config", tiny, "--out", str(b), "--quiet"])
    assert ra == rb and ra in (cli.OK, cli.FAILED)
    for name in ("policy.json", "history.csv", "summary.json", "prior_history.csv"):
        assert read(a / name) == read(b / name), name
    s = json.loads(read(a / "summary.json"))
    assert s["converged"] == (s["best_loss"] <= s["threshold"])
    assert "seconds" in json.loads(read(a / "summary.meta.json"))


def test_rollout_verify_export(tiny, tmp_path):
    out = tmp_path / "run"
    cli.main(["train", "--config", tiny, "--out", str(out), "--quiet"])
    ck = str(out / "policy.json")
    code = cli.main(["rollout", "--config", tiny, "--checkpoint", ck, "--out", str(out), "--quiet"])
    assert code in (cli.OK, cli.FAILED)
    stats = json.loads(read(out / "rollout_nominal_stats.json"))
    assert (code == cli.OK) == (stats["outcome"] == "completed")
    code = cli.main(["verify", "--config", tiny, "--checkpoint", ck, "--out", str(out), "--quiet"])
    cert = json.loads(read(out / "certification.json"))
    assert (code == cli.OK) == cert["passed"]
    assert len(cert["sigma_sweep"]) == 13
    code = cli.main(["export", str(out / "rollout_nominal.csv"), "--format", "svg-lines",
                     "--out", str(out / "ex"), "--quiet"])
    assert code == cli.OK
    for name in ("phase_portrait", "torso_angle", "swing_foot_height"):
        assert (out / "ex" / f"{name}.csv").exists()
        assert read(out / "ex" / f"{name}.svg").startswith(b"<svg")


def test_output_dir_from_environment(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv(C.OUTPUT_ENV, str(tmp_path / "env"))
    cli.main(["train", "--config", tiny, "--quiet"])
    assert (tmp_path / "env" / "policy.json").exists()


def test_init_config_round_trip(tmp_path):
    p = tmp_path / "c.json"
    assert cli.main(["init-config", str(p), "--seed", "4"]) == cli.OK
    assert C.load(p).seed == 4


def test_errors_exit_one(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == cli.ERROR
    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": "zero"}')
    assert cli.main(["train", "--config", str(bad)]) == cli.ERROR
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert cli.main(["export", str(empty)]) == cli.ERROR
    assert cli.main(["refine", "--episodes", "0"]) == cli.ERROR
    assert cli.main(["no-such-command"]) == cli.ERROR
    assert "error" in capsys.readouterr().err


def test_checkpoint_shape_mismatch(tiny, tmp_path):
    out = tmp_path / "r"
    cli.main(["train", "--config", tiny, "--out", str(out), "--quiet"])
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**TINY, "train": {**TINY["train"], "sizes": [2, 8, 2]}}))
    assert cli.main(["rollout", "--config", str(other), "--checkpoint", str(out / "policy.json"),
                     "--out", str(out), "--quiet"]) == cli.ERROR
