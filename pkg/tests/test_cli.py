import json
import os

import pytest

from mtdseg import cli
from mtdseg.config import load_config
from mtdseg.errors import NumericFaultError


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic data, desk config and 10% split produced through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    data, out = root / "data", root / "out"
    assert cli.main(["synth", "--root", str(data), "--num-images", "10", "--image-size", "128"]) == 0
    cfg = root / "desk.yaml"
    assert cli.main(["config", "--desk", "--root", str(data), "--out", str(out),
                     "--write", str(cfg)]) == 0
    text = cfg.read_text().replace("batch_size: 8", "batch_size: 4")
    cfg.write_text(text)
    assert cli.main(["split", "--config", str(cfg)]) == 0
    return root, cfg, out


def test_split_is_idempotent_and_ratio_specific(workspace, capsys):
    root, cfg, out = workspace
    manifest = out / "splits" / "synthetic_labeled0.1.jsonl"
    before = manifest.read_bytes()
    capsys.readouterr()
    assert cli.main(["split", "--config", str(cfg)]) == 0
    assert "up to date" in capsys.readouterr().out
    assert manifest.read_bytes() == before
    assert cli.main(["split", "--config", str(cfg), "--ratio", "0.25", "--ratio", "0.5"]) == 0
    files = {p.name for p in (out / "splits").iterdir()}
    assert {"synthetic_labeled0.25.jsonl", "synthetic_labeled0.5.jsonl"} <= files
    artifacts = json.loads((out / "artifacts.json").read_text())
    assert "splits/synthetic_labeled0.25.jsonl" in artifacts


def test_missing_label_exit_code_names_file(tmp_path, capsys):
    cli.main(["synth", "--root", str(tmp_path / "d"), "--num-images", "2", "--image-size", "64"])
    os.remove(tmp_path / "d" / "labels" / "syn_0001.png")
    code = cli.main(["split", "--out", str(tmp_path / "o"), "--seed", "0"] +
                    ["--config", _write_min_config(tmp_path)])
    assert code == 3
    assert "syn_0001" in capsys.readouterr().err


def _write_min_config(tmp_path):
    path = tmp_path / "min.yaml"
    path.write_text(f"dataset:\n  root: {tmp_path / 'd'}\n  tile_size: 64\n"
                    "augment:\n  crop_size: 56\n")
    return str(path)


def test_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("optim:\n  learning_rate: 0.1\n")
    assert cli.main(["split", "--config", str(bad)]) == 2


def manifest_of(out):
    return str(out / "splits" / "synthetic_labeled0.1.jsonl")


def test_train_eval_report(workspace, tmp_path, capsys):
    root, cfg, out = workspace
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg), "--manifest", manifest_of(out),
                     "--teachers", "mock,mock", "--steps", "3", "--tau", "0.9",
                     "--out", str(run)]) == 0
    saved = load_config(run / "config.yaml")
    assert saved.ssl.tau == 0.9 and saved.optim.max_steps == 3
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 3

    manifest = out / "splits" / "synthetic_labeled0.1.jsonl"
    args = ["eval", "--checkpoint", str(run / "last.pt"), "--manifest", str(manifest),
            "--split", "test"]
    assert cli.main(args + ["--model-source", "ema"]) == 0
    first = (run / "metrics_last-ema-test.json").read_text()
    assert cli.main(args + ["--model-source", "ema"]) == 0
    assert (run / "metrics_last-ema-test.json").read_text() == first
    assert (run / "metrics_last-ema-test.csv").is_file()
    assert cli.main(args + ["--model-source", "student", "--mode", "plain"]) == 0
    artifacts = json.loads((run / "artifacts.json").read_text())
    assert {"last.pt", "train_log.jsonl", "metrics_last-ema-test.json"} <= set(artifacts)

    capsys.readouterr()
    assert cli.main(["report", str(run / "metrics_last-ema-test.json"),
                     str(run / "metrics_last-student-test.json")]) == 0
    table = capsys.readouterr().out
    assert table.splitlines()[0].startswith("| Model | background | disc")
    assert len(table.strip().splitlines()) == 4


def test_ablation_flags(workspace, tmp_path):
    _, cfg, out = workspace
    run = tmp_path / "plain"
    assert cli.main(["train", "--config", str(cfg), "--manifest", manifest_of(out),
                     "--lambda-d", "0", "--omega-d", "0", "--steps", "2", "--out", str(run)]) == 0
    rec = json.loads((run / "train_log.jsonl").read_text().splitlines()[0])
    assert rec["l_distill_total"] is None and rec["fused"] is False


def test_resume_flag(workspace, tmp_path):
    _, cfg, out = workspace
    run = tmp_path / "r"
    common = ["train", "--config", str(cfg), "--manifest", manifest_of(out), "--out", str(run)]
    assert cli.main(common + ["--steps", "2"]) == 0
    assert cli.main(common + ["--steps", "4", "--resume"]) == 0
    steps = [json.loads(ln)["step"] for ln in (run / "train_log.jsonl").read_text().splitlines()]
    assert steps == [0, 1, 2, 3]


def test_train_without_manifest_is_config_error(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("dataset:\n  class_names: [a, b]\n")
    assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


def test_report_mixed_classes_is_data_error(tmp_path):
    a = {"name": "a", "class_names": ["x", "y"], "iou": {"x": 50.0, "y": 60.0}, "miou": 55.0,
         "mf1": 60.0, "kappa": 0.5}
    b = dict(a, name="b", class_names=["x", "z"], iou={"x": 50.0, "z": 60.0})
    for d in (a, b):
        (tmp_path / f"{d['name']}.json").write_text(json.dumps(d))
    assert cli.main(["report", str(tmp_path / "a.json"), str(tmp_path / "b.json")]) == 3


def test_numeric_fault_exit_code(monkeypatch, workspace, tmp_path):
    _, cfg, out = workspace

    def boom(*a, **k):
        raise NumericFaultError("loss diverged")

    monkeypatch.setattr("mtdseg.training.train", boom)
    assert cli.main(["train", "--config", str(cfg), "--manifest", manifest_of(out),
                     "--out", str(tmp_path / "x")]) == 4


def test_config_template_prints_yaml(capsys):
    assert cli.main(["config"]) == 0
    assert "encoder_lr" in capsys.readouterr().out
