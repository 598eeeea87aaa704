import json

import pytest

from spoofmtl.cli import main

from test_model import golden_rows


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["gen-data", "--out", str(out), "--seed", "4",
                 "--override", "n_train=8", "--override", "n_dev=4", "--override", "n_eval=4"]) == 0
    return out


def test_gradcheck_passes_every_operator(tmp_path, capsys):
    assert main(["gradcheck", "--seeds", "1", "--out", str(tmp_path)]) == 0
    table = capsys.readouterr().out.splitlines()
    assert len(table) > 20 and all(line.endswith("pass") for line in table[1:])
    assert (tmp_path / "gradcheck.txt").exists()


def test_describe_model_matches_golden_layer_table(tmp_path, capsys):
    assert main(["describe-model", "--variant", "Seg", "--out", str(tmp_path)]) == 0
    rows = [tuple(c.strip() for c in line.split("|")) for line in capsys.readouterr().out.splitlines()[1:]]
    golden = golden_rows()
    assert [r[:2] for r in rows[:len(golden)]] == [g[:2] for g in golden]
    for r, g in zip(rows, golden):
        if g[2]:
            assert r[2] == g[2]
    assert json.loads((tmp_path / "config.json").read_text())["command"] == "describe-model"


def test_utt_train_score_eval_pipeline(tiny_data, tmp_path, capsys):
    run = tmp_path / "run"
    common = ["--data", str(tiny_data), "--out", str(run)]
    assert main(["train", "--variant", "Utt", "--override", "max_epochs=1", "--override", "batch_size=4"] + common) == 0
    assert (run / "model.ckpt").exists() and (run / "run_record.csv").exists()
    snapshot = json.loads((run / "config.json").read_text())
    assert snapshot["command"] == "train" and snapshot["config"]["variant"] == "Utt"
    assert main(["score", "--ckpt", str(run / "model.ckpt"), "--split", "eval"] + common) == 0
    first = (run / "scores_eval.txt").read_text().splitlines()[0]
    assert first.endswith("utt-direct+utt-derived-seg")
    assert main(["eval", "--scores", str(run / "scores_eval.txt"), "--split", "eval"] + common) == 0
    report = json.loads((run / "report.json").read_text())
    assert {"utt_eer", "seg_eer"} <= set(report)
    assert "utt_eer=" in capsys.readouterr().out


def test_config_file_and_overrides(tiny_data, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"variant": "Seg", "max_epochs": 1, "batch_size": 4}))
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--override", "lr_init=1e-3", "--data", str(tiny_data),
                 "--out", str(out)]) == 0
    config = json.loads((out / "config.json").read_text())["config"]
    assert (config["variant"], config["lr_init"], config["max_epochs"]) == ("Seg", 1e-3, 1)


def test_errors_are_single_machine_readable_lines(tiny_data, tmp_path, capsys):
    assert main(["train", "--override", "learning_rate=1", "--data", str(tiny_data), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: command=train type=") and "learning_rate" in err[-1]
    assert main(["score", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", str(tiny_data),
                 "--out", str(tmp_path)]) == 1
    assert capsys.readouterr().err.strip().splitlines()[-1].startswith("error: command=score")
    assert main(["train", "--variant", "SegBW", "--data", str(tiny_data), "--out", str(tmp_path)]) == 1
    assert "warmup_checkpoint" in capsys.readouterr().err
