import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from skelzsl.cli import main
from skelzsl.tensor_io import save_tensor

TRAIN_ARGS = ["--max-epochs", "25", "--lr", "0.003"]


@pytest.fixture(scope="module")
def synth_tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    cfg = {
        "synth": {
            "classes": 6, "unseen_classes": 2, "d": 10, "n": 8,
            "joints": 4, "frames": 3, "parts": 2, "phases": 2,
            "train_samples_per_class": 10, "val_samples_per_class": 4,
            "test_samples_per_class": 6, "anchor_separation": 1.3,
            "class_jitter": 0.4, "feature_noise": 0.04, "shift_angle": 0.4,
        }
    }
    cfg_path = root.parent / "synth.json"
    cfg_path.write_text(json.dumps(cfg))
    rc = main(["synth", "--config", str(cfg_path), "--seed", "5", "--out", str(root)])
    assert rc == 0
    return root


@pytest.fixture(scope="module")
def trained_params(synth_tree, tmp_path_factory):
    out = tmp_path_factory.mktemp("params")
    rc = main(["train", "--data", str(synth_tree / "manifest_train.json"),
               "--out", str(out), "--seed", "5", "--force", *TRAIN_ARGS])
    assert rc == 0
    return out


def read_tree(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(Path(root).rglob("*")) if p.is_file()
    }


def test_synth_deterministic(tmp_path, synth_tree):
    out2 = tmp_path / "again"
    cfg = {"synth": json.loads((synth_tree / "synth_config.json").read_text())}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    rc = main(["synth", "--config", str(cfg_path), "--seed", "5", "--out", str(out2)])
    assert rc == 0
    assert read_tree(synth_tree) == read_tree(out2)


def test_synth_unknown_preset_exit_2(tmp_path):
    assert main(["synth", "--preset", "nope", "--out", str(tmp_path / "x")]) == 2


def test_synth_refuses_nonempty_out(tmp_path):
    out = tmp_path / "busy"
    out.mkdir()
    (out / "junk.txt").write_text("hello")
    assert main(["synth", "--preset", "easy", "--out", str(out)]) == 3


def test_train_deterministic(synth_tree, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        rc = main(["train", "--data", str(synth_tree / "manifest_train.json"),
                   "--out", str(out), "--seed", "9", *TRAIN_ARGS])
        assert rc == 0
    assert read_tree(a) == read_tree(b)


def test_train_single_epoch(synth_tree, tmp_path, capsys):
    rc = main(["train", "--data", str(synth_tree / "manifest_train.json"),
               "--out", str(tmp_path / "p"), "--seed", "1", "--max-epochs", "1"])
    assert rc == 0
    report = json.loads((tmp_path / "p" / "train_report.json").read_text())
    assert report["epochs_run"] == 1
    assert "validation top-1" in capsys.readouterr().out


def test_run_gate_closed_equivalence(synth_tree, trained_params, tmp_path):
    base = ["run", "--data", str(synth_tree / "manifest_test.json"),
            "--params", str(trained_params), "--seed", "3"]
    rc = main(base + ["--tta", "off", "--out", str(tmp_path / "off")])
    assert rc == 0
    rc = main(base + ["--tta", "full", "--conf-threshold", "1.0",
                      "--out", str(tmp_path / "gated")])
    assert rc == 0
    assert (tmp_path / "off" / "predictions.csv").read_bytes() == \
        (tmp_path / "gated" / "predictions.csv").read_bytes()


def test_run_deterministic_reports(synth_tree, trained_params, tmp_path):
    args = ["run", "--data", str(synth_tree / "manifest_test.json"),
            "--params", str(trained_params), "--seed", "3", "--tta", "full"]
    for name in ("r1", "r2"):
        assert main(args + ["--out", str(tmp_path / name)]) == 0
    assert read_tree(tmp_path / "r1") == read_tree(tmp_path / "r2")


def test_run_gzsl_report_has_sun_keys(synth_tree, trained_params, tmp_path):
    rc = main(["run", "--data", str(synth_tree / "manifest_test.json"),
               "--params", str(trained_params), "--protocol", "gzsl",
               "--val-data", str(synth_tree / "manifest_val.json"),
               "--seed", "3", "--out", str(tmp_path / "g")])
    assert rc == 0
    report = json.loads((tmp_path / "g" / "report.json").read_text())
    for key in ("S", "U", "H"):
        assert key in report["metrics"]
    assert (tmp_path / "g" / "calibration.csv").exists()


def test_run_gzsl_empty_split_exit_4(synth_tree, trained_params, tmp_path):
    # rewrite manifest with everything seen
    doc = json.loads((synth_tree / "manifest_test.json").read_text())
    doc["split"] = {"seen": sorted({c["id"] for c in doc["classes"]}), "unseen": []}
    bad = tmp_path / "bad"
    shutil.copytree(synth_tree, bad)
    (bad / "manifest_test.json").write_text(json.dumps(doc))
    rc = main(["run", "--data", str(bad / "manifest_test.json"),
               "--params", str(trained_params), "--protocol", "gzsl",
               "--delta", "0.5", "--seed", "3", "--out", str(tmp_path / "o")])
    assert rc == 4


def test_inspect_tensor_summary(tmp_path, capsys):
    path = tmp_path / "t.dpt"
    save_tensor(np.array([[0.0, 1.0], [1.0, 0.0]]), path)
    assert main(["inspect", str(path)]) == 0
    out = capsys.readouterr().out
    assert "dpt1 float64 shape=2x2" in out
    assert "min=0" in out and "max=1" in out


def test_inspect_manifest_summary(synth_tree, capsys):
    assert main(["inspect", str(synth_tree / "manifest_train.json")]) == 0
    out = capsys.readouterr().out
    assert "classes=6" in out and "seen=4" in out and "unseen=2" in out


def test_inspect_corrupt_magic_exit_5(tmp_path):
    path = tmp_path / "bad.dpt"
    path.write_bytes(b"WRONGSTUFF" + bytes(30))
    assert main(["inspect", str(path)]) == 5


def test_help_lists_defaults():
    import skelzsl.cli as cli

    parser = cli.build_parser()
    for name in ("synth", "train", "run", "ablate", "inspect"):
        sub = next(
            a for a in parser._subparsers._group_actions[0].choices.items()
            if a[0] == name
        )[1]
        text = sub.format_help()
        assert "--help" in text or "usage" in text
    run_help = next(
        a for n, a in parser._subparsers._group_actions[0].choices.items()
        if n == "run"
    ).format_help()
    for flag in ("--protocol", "--tta", "--conf-threshold", "--bank-capacity",
                 "--bmin", "--delta", "--config", "--seed", "--force"):
        assert flag in run_help
    assert "0.1" in run_help  # conf threshold default documented
    assert "16" in run_help   # bank capacity default documented


def test_unknown_config_key_exit_2(tmp_path, synth_tree):
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps({"mystery": 1}))
    rc = main(["train", "--data", str(synth_tree / "manifest_train.json"),
               "--out", str(tmp_path / "p"), "--config", str(cfg_path)])
    assert rc == 2
