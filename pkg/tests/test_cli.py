import json
from pathlib import Path

import pytest

from pascseq.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    syn = d / "syn"
    codes = []
    codes.append(run("synth", "--config", CONFIGS / "tiny_synth.json", "--out", syn))
    codes.append(run("preprocess", "--events", syn / "events.csv", "--labels", syn / "labels.csv",
                     "--hierarchy", syn / "hierarchy.csv", "--embeddings", syn / "embeddings.txt",
                     "--covid-codes", syn / "covid_codes.txt", "--leak-codes", syn / "leak_codes.txt",
                     "--embedding-dim", 16, "--max-len", 40, "--out", d / "cohort.bin"))
    model_flags = ["--arch", "bi-lstm-cnn", "--config", CONFIGS / "tiny_train.json", "--hidden", 8,
                   "--layers", 1, "--conv-channels", 8]
    codes.append(run("train", "--cohort", d / "cohort.bin", *model_flags, "--out", d / "model.ckpt",
                     "--log", d / "epochs.csv"))
    codes.append(run("evaluate", "--model", d / "model.ckpt", "--cohort", d / "cohort.bin", "--roc", d / "roc.csv",
                     "--roc-svg", d / "roc.svg", "--metrics", d / "metrics.json"))
    codes.append(run("attribute", "--model", d / "model.ckpt", "--cohort", d / "cohort.bin",
                     "--threshold-from", d / "metrics.json", "--out", d / "attr.jsonl", "--heatmap-dir", d / "heat"))
    codes.append(run("report", "--attributions", d / "attr.jsonl", "--top", 9, "--out", d / "summary.csv",
                     "--hist-dir", d / "hist"))
    codes.append(run("crossval", "--cohort", d / "cohort.bin", *model_flags, "--out", d / "cv.json"))
    return d, codes


def test_pipeline_exit_codes(pipeline):
    _, codes = pipeline
    assert codes == [0] * 7


def test_outputs_exist(pipeline):
    d, _ = pipeline
    for name in ("cohort.bin", "model.ckpt", "epochs.csv", "roc.csv", "roc.svg", "metrics.json", "attr.jsonl",
                 "summary.csv", "cv.json"):
        assert (d / name).is_file(), name
    assert (d / "epochs.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss,lr"
    assert (d / "summary.csv").read_text().splitlines()[0] == "code,patient_count,separations"


def test_metrics_and_reference_note(pipeline):
    d, _ = pipeline
    m = json.loads((d / "metrics.json").read_text())
    assert m["subset"] == "test"
    assert {"auc", "threshold", "accuracy", "youden_j"} <= m.keys()
    assert m["reference"]["reproducible"] is False
    cv = json.loads((d / "cv.json").read_text())
    assert len(cv["folds"]) == 3 and all("auc" in f for f in cv["folds"])
    assert {"mean_auc", "std_auc"} <= cv.keys()


def test_run_manifests(pipeline):
    d, _ = pipeline
    man = json.loads((d / "model.ckpt.run.json").read_text())
    assert man["command"].startswith("pascseq train")
    assert man["seed"] == 0
    assert len(man["inputs"][str(d / "cohort.bin")]) == 64
    assert {"config", "tool_version", "wall_clock_seconds", "started_at"} <= man.keys()
    assert (d / "syn" / "run.json").is_file()


def test_rerun_from_manifest_is_identical(pipeline, tmp_path):
    d, _ = pipeline
    cfg = json.loads((d / "model.ckpt.run.json").read_text())["config"]
    (tmp_path / "train.json").write_text(json.dumps(cfg["train"]))
    m = cfg["model"]
    assert run("train", "--cohort", d / "cohort.bin", "--arch", m["architecture"], "--config", tmp_path / "train.json",
               "--hidden", m["hidden"], "--layers", m["layers"], "--conv-channels", m["conv_channels"],
               "--out", tmp_path / "model.ckpt", "--log", tmp_path / "epochs.csv") == 0
    assert (tmp_path / "model.ckpt").read_bytes() == (d / "model.ckpt").read_bytes()
    assert (tmp_path / "epochs.csv").read_bytes() == (d / "epochs.csv").read_bytes()


def test_unknown_arch(tmp_path, capsys):
    code = run("train", "--cohort", tmp_path / "c.bin", "--arch", "transformer", "--out", tmp_path / "m")
    assert code == 1
    err = capsys.readouterr().err
    for name in ("uni-lstm", "bi-lstm", "bi-lstm-attn", "bi-lstm-cnn"):
        assert name in err


def test_missing_required_flag():
    assert run("evaluate", "--model", "x") == 1


def test_data_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "c.bin"
    bad.write_bytes(b"garbage")
    assert run("evaluate", "--model", bad, "--cohort", bad, "--metrics", tmp_path / "m.json") == 2
    assert "bad magic" in capsys.readouterr().err


def test_missing_file_exit_2(tmp_path):
    assert run("report", "--attributions", tmp_path / "nope.jsonl", "--out", tmp_path / "s.csv") == 2


def test_bad_config_key_exit_1(tmp_path):
    (tmp_path / "t.json").write_text('{"learning_rate": 3}')
    (tmp_path / "c.bin").write_bytes(b"")
    assert run("synth", "--config", tmp_path / "t.json", "--out", tmp_path / "o") == 1


def test_inputs_not_mutated(pipeline, tmp_path):
    d, _ = pipeline
    before = (d / "cohort.bin").read_bytes(), (d / "model.ckpt").read_bytes()
    run("evaluate", "--model", d / "model.ckpt", "--cohort", d / "cohort.bin", "--metrics", tmp_path / "m.json")
    assert ((d / "cohort.bin").read_bytes(), (d / "model.ckpt").read_bytes()) == before
