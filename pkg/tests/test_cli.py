import json
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from freqpure.cli import main, model_dir, snapshot_steps
from freqpure.config import RunConfig
from freqpure.io import load_batch, save_batch
from freqpure.spectral import SpectrumHistogram
from freqpure.validation import ImageBatch

SMALL_CONFIG = {
    "dataset": {"train_size": 1000, "val_size": 20, "test_size": 100, "seed": 5},
    "train": {"classifier_epochs": 10, "score_epochs": 1, "score_width": 8},
    "attack": {"lambda_": 100.0, "max_iterations": 25, "learning_rate": 0.02},
    "purify": {"t_star": 0.02, "dt": 0.002},
    "eval": {"subset_size": 6, "subset_count": 1, "repeats": 1, "modes": ["pixel", "phase"],
             "t_star_list": [0.02], "seeds": [0]},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = dict(SMALL_CONFIG, output_dir=str(root / "runs"))
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["train", "--config", str(path)]) == 0
    return root, path


def attack(path, capsys, mode, *extra):
    capsys.readouterr()
    assert main(["attack", "--config", str(path), "--mode", mode, *extra]) == 0
    return Path(capsys.readouterr().out.strip().splitlines()[-1])


def test_train_artifacts(workspace):
    root, path = workspace
    d = model_dir(RunConfig.load(path))
    names = {p.name for p in d.iterdir()}
    assert {"classifier.pt", "score.pt", "classifier_loss.tsv", "score_loss.tsv", "train_summary.json"} <= names
    assert len((d / "classifier_loss.tsv").read_text().splitlines()) == 1 + 10
    summary = json.loads((d / "train_summary.json").read_text())
    assert summary["config_hash"] == RunConfig.load(path).hash()


def test_train_rerun_same_hashes(workspace, tmp_path):
    root, path = workspace
    first = json.loads((model_dir(RunConfig.load(path)) / "train_summary.json").read_text())
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "again")]) == 0
    second = json.loads((tmp_path / "again" / "train_summary.json").read_text())
    assert first["classifier_hash"] == second["classifier_hash"]
    assert first["score_hash"] == second["score_hash"]


def test_train_invalid_spec_writes_nothing(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"dataset": {"class_count": 1}, "output_dir": str(tmp_path / "runs")}))
    assert main(["train", "--config", str(path)]) == 1
    assert not (tmp_path / "runs").exists()
    assert "class_count" in capsys.readouterr().err


def test_attack_outputs(workspace, capsys):
    root, path = workspace
    out = attack(path, capsys, "pixel", "--bins", "12")
    assert out.name == "attack_pixel"
    for name in ("adversarial.npz", "perturbation.npz", "trace.tsv", "spectrum.tsv"):
        assert (out / name).is_file()
    assert SpectrumHistogram.load(out / "spectrum.tsv").bin_count == 12
    assert len(list((out / "png").glob("perturbation_x20_*.png"))) == 6
    adv, labels, meta = load_batch(out / "adversarial.npz")
    assert adv.range_tag == "unit" and meta["mode"] == "pixel" and len(labels) == 6


def test_phase_and_pixel_histograms_differ(workspace, capsys):
    root, path = workspace
    a, b = (SpectrumHistogram.load(attack(path, capsys, mode) / "spectrum.tsv").energy for mode in ("pixel", "phase"))
    assert np.abs(a - b).max() > 1e-9


def test_unknown_mode_is_usage_error(workspace, capsys):
    root, path = workspace
    with pytest.raises(SystemExit) as info:
        main(["attack", "--config", str(path), "--mode", "pxl"])
    assert info.value.code == 1
    assert "{pixel, mag, phase, phase_mag, all}" in capsys.readouterr().err


def test_attack_without_models_names_train(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(dict(SMALL_CONFIG, output_dir=str(tmp_path / "empty"))))
    assert main(["attack", "--config", str(path)]) == 1
    assert "freqpure train" in capsys.readouterr().err


def test_purify_snapshots_and_eval_chain(workspace, capsys):
    root, path = workspace
    adv = attack(path, capsys, "pixel") / "adversarial.npz"
    out = root / "purified"
    assert main(["purify", str(adv), "--config", str(path), "--snapshots", "4", "--out", str(out)]) == 0
    files = sorted(p.name for p in (out / "snapshots").glob("sample0000_*.png"))
    assert len(files) == 1 + 4 + 1
    assert files[0].endswith("diffused.png") and files[-1].endswith("final.png")
    assert len(list((out / "snapshots").glob("*.png"))) == 6 * 6
    purified, _, meta = load_batch(out / "purified.npz")
    assert purified.range_tag == "unit" and float(meta["t_star"]) == 0.02
    eval_out = root / "eval_files"
    assert main(["eval", str(adv), str(out / "purified.npz"), "--config", str(path), "--out", str(eval_out)]) == 0
    rows = [json.loads(l) for l in (eval_out / "accuracy.jsonl").read_text().splitlines()]
    assert [r["n"] for r in rows] == [6, 6]


def test_snapshot_steps_spacing():
    assert snapshot_steps(20, 4) == [3, 7, 11, 15]
    assert snapshot_steps(20, 0) == []
    assert len(snapshot_steps(100, 4)) == 4
    assert snapshot_steps(4, 3) == [0, 1, 2]


def test_too_many_snapshots_rejected(workspace, capsys):
    root, path = workspace
    adv = attack(path, capsys, "pixel") / "adversarial.npz"
    assert main(["purify", str(adv), "--config", str(path), "--snapshots", "10"]) == 1
    assert "intermediate steps" in capsys.readouterr().err


def test_purify_rejects_zero_t_star(workspace, capsys):
    root, path = workspace
    adv = attack(path, capsys, "pixel") / "adversarial.npz"
    assert main(["purify", str(adv), "--config", str(path), "--t-star", "0"]) == 1
    assert "(0, 1)" in capsys.readouterr().err


def test_purify_rejects_signed_batch(workspace, tmp_path, capsys):
    root, path = workspace
    f = tmp_path / "signed.npz"
    save_batch(f, ImageBatch(torch.zeros(2, 3, 32, 32), "signed"), np.zeros(2, dtype=np.int64), mode="x", seed=0,
               config_hash="h")
    assert main(["purify", str(f), "--config", str(path)]) == 1
    assert "range_tag" in capsys.readouterr().err


def test_eval_grid_report_and_rerun(workspace, capsys):
    root, path = workspace
    assert main(["eval", "--config", str(path), "--out", str(root / "e1")]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split() == ["model", "mode", "t*", "clean", "adversarial", "purified_clean",
                                "purified_adversarial"]
    assert main(["eval", "--config", str(path), "--out", str(root / "e2"), "--workers", "2"]) == 0
    for name in ("report.jsonl", "report.txt", "subsets.json"):
        assert (root / "e1" / name).read_bytes() == (root / "e2" / name).read_bytes()
    summary = json.loads((root / "e1" / "run_summary.json").read_text())
    assert summary["config_hash"] == RunConfig.load(path).hash() and summary["seed"] == 0
    assert summary["failed"] == 0 and len(summary["cells"]) == 2


def test_eval_without_modes_has_two_columns(workspace, tmp_path, capsys):
    root, path = workspace
    cfg = yaml.safe_load(path.read_text())
    cfg["eval"]["modes"] = []
    p = tmp_path / "clean.yaml"
    p.write_text(yaml.safe_dump(cfg))
    assert main(["eval", "--config", str(p), "--out", str(tmp_path / "e")]) == 0
    assert capsys.readouterr().out.splitlines()[0].split()[3:] == ["clean", "purified_clean"]


def test_analyze(workspace, capsys):
    root, path = workspace
    out = attack(path, capsys, "phase")
    pert = out / "perturbation.npz"
    assert main(["analyze", str(pert), "--bins", "5", "--out", str(root / "an")]) == 0
    assert SpectrumHistogram.load(root / "an" / "spectrum.tsv").bin_count == 5
    adv = out / "adversarial.npz"
    assert main(["analyze", str(adv)]) == 1


def test_config_hash_ignores_output_location():
    a = RunConfig.from_dict({"output_dir": "x", "workers": 4})
    b = RunConfig.from_dict({"output_dir": "y"})
    assert a.hash() == b.hash()
    assert a.hash() != RunConfig.from_dict({"seed": 1}).hash()


def test_config_round_trip(tmp_path):
    cfg = RunConfig.from_dict(SMALL_CONFIG)
    cfg.save(tmp_path / "c.yaml")
    assert RunConfig.load(tmp_path / "c.yaml").hash() == cfg.hash()
    with pytest.raises(Exception, match="unknown"):
        RunConfig.from_dict({"atack": {}})
