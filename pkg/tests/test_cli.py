import json

import pytest

from lipsync_ldm import cli
from lipsync_ldm.config import RunConfig, load_config
from lipsync_ldm.errors import ConfigError


@pytest.fixture(scope="module")
def corpus_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "raw"), "--n-clips", "2", "--frames", "50", "--size", "96", "--seed", "1"]) == 0
    assert cli.main(["preprocess", "--in", str(root / "raw"), "--out", str(root / "crops"), "--crop-size", "64"]) == 0
    return root


def _stderr_record(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)


def test_usage_error_is_exit_2_with_json(capsys):
    assert cli.main(["no-such-command"]) == cli.EXIT_USAGE
    rec = _stderr_record(capsys)
    assert rec["error"] == "UsageError" and rec["exit_code"] == 2


def test_help_exits_cleanly(capsys):
    assert cli.main(["--help"]) == 0
    assert "train-syncnet" in capsys.readouterr().out


def test_unknown_config_key_is_exit_3(tmp_path, capsys, corpus_dirs):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 1\nsyncnet:\n  steps: 2\n  colour: red\n")
    code = cli.main(["train-syncnet", "--config", str(cfg), "--train", str(corpus_dirs / "crops"), "--run-dir", str(tmp_path / "run")])
    assert code == cli.EXIT_CONFIG
    assert _stderr_record(capsys)["error"] == "ConfigError"
    assert json.loads((tmp_path / "run" / "error.json").read_text())["exit_code"] == 3


def test_missing_input_is_exit_4(tmp_path, capsys):
    assert cli.main(["preprocess", "--in", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]) == cli.EXIT_INPUT
    assert _stderr_record(capsys)["error"] == "IngestError"


def test_quality_failure_is_exit_5(tmp_path, capsys, corpus_dirs):
    code = cli.main(["preprocess", "--in", str(corpus_dirs / "raw"), "--out", str(tmp_path / "o"), "--threshold", "1e9"])
    assert code == cli.EXIT_QUALITY


def test_incompatible_weights_is_exit_7(tmp_path, capsys, corpus_dirs):
    import torch

    torch.save({"kind": "unet"}, tmp_path / "bad.pt")
    code = cli.main(["train-stage2", "--data", str(corpus_dirs / "crops"), "--stage1", str(tmp_path / "bad.pt"), "--sync-weight", "0", "--run-dir", str(tmp_path / "r")])
    assert code == cli.EXIT_WEIGHTS
    code = cli.main(["preprocess", "--in", str(corpus_dirs / "raw"), "--out", str(tmp_path / "o"), "--scorer", str(tmp_path / "bad.pt")])
    assert code == cli.EXIT_WEIGHTS


def test_exit_code_mapping():
    from lipsync_ldm.errors import TrainingDiverged

    rec = cli.error_record(TrainingDiverged("boom", "ckpt.pt", "sync"), "train-stage2")
    assert rec["exit_code"] == cli.EXIT_DIVERGED and rec["component"] == "sync" and rec["last_good_checkpoint"] == "ckpt.pt"
    assert cli.exit_code_for(RuntimeError()) == cli.EXIT_OTHER


def test_config_round_trip(tmp_path):
    cfg = RunConfig(seed=3, syncnet={"steps": 5})
    cfg.save(tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"sed": 1})
    with pytest.raises(ConfigError):
        RunConfig(device="cuda")


def test_train_and_infer_pipeline(tmp_path, capsys, corpus_dirs):
    crops, raw = str(corpus_dirs / "crops"), corpus_dirs / "raw"
    sn, s1, s2 = tmp_path / "sn", tmp_path / "s1", tmp_path / "s2"
    assert cli.main(["train-syncnet", "--train", crops, "--val", crops, "--steps", "2", "--run-dir", str(sn)]) == 0
    saved = json.loads((sn / "config.json").read_text())
    assert saved["syncnet"]["steps"] == 2
    assert cli.main(["train-stage1", "--data", crops, "--steps", "2", "--window", "8", "--run-dir", str(s1)]) == 0
    args = ["train-stage2", "--data", crops, "--stage1", str(s1 / "stage1.pt"), "--syncnet", str(sn / "syncnet_best.pt")]
    assert cli.main(args + ["--steps", "1", "--window", "8", "--sync-weight", "0.05", "--run-dir", str(s2)]) == 0
    assert json.loads((s2 / "config.json").read_text())["stage2"]["weights"]["sync"] == 0.05
    clips = sorted(p for p in raw.iterdir() if p.is_dir())
    out = tmp_path / "gen"
    assert cli.main(["infer", "--checkpoint", str(s2 / "stage2.pt"), "--clip", str(clips[0]), "--audio", str(clips[1] / "audio.wav"), "--out", str(out), "--steps", "2"]) == 0
    assert (out / "frames.npy").exists()
    capsys.readouterr()
    assert cli.main(["report", str(sn)]) == 0
    assert "accuracy" in capsys.readouterr().out


def test_eval_writes_report(tmp_path, capsys, corpus_dirs):
    crops = str(corpus_dirs / "crops")
    assert cli.main(["eval", "--gen", crops, "--ref", crops, "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["aggregates"]["ssim"] == pytest.approx(1.0)
