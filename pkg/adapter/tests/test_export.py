import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from skelzsl_adapter import (
    ClassEntry,
    ExportJob,
    SampleEntry,
    build_prompt,
    export_dataset,
    export_text_anchors,
    export_visual_features,
    load_job,
)
from skelzsl_adapter.encoders import HashedNgramTextEncoder

PARTS = ("head", "hands", "torso", "legs")
PHASES = ("start", "middle", "end")


def descriptions(name):
    return tuple(
        [f"{name} overall motion"]
        + [f"{name}: the {p} moves" for p in PARTS]
        + [f"{name}: {ph} phase" for ph in PHASES]
    )


def make_job(tmp_path, n_samples=4, anchor_dim=512, feature_dim=256,
             backbone_classes=None):
    classes = tuple(
        ClassEntry(c, f"action_{c}", descriptions(f"action {c}")) for c in range(3)
    )
    rng = np.random.default_rng(0)
    samples = []
    for i in range(n_samples):
        src = tmp_path / f"raw_{i}.npy"
        np.save(src, rng.normal(size=(12, feature_dim)))
        samples.append(SampleEntry(f"clip{i}", i % 3, str(src)))
    return ExportJob(
        classes=classes,
        samples=tuple(samples),
        seen=frozenset({0, 1}),
        unseen=frozenset({2}),
        parts=4,
        phases=3,
        anchor_dim=anchor_dim,
        feature_dim=feature_dim,
        text_encoder="hashed-ngram",
        skeleton_encoder="npy-passthrough",
        backbone_training_classes=(
            frozenset({0, 1}) if backbone_classes is None else frozenset(backbone_classes)
        ),
        output_dir=tmp_path / "out",
    )


def test_prompt_template():
    assert build_prompt(" Raise arm. ") == "a video of Raise arm."


def test_anchor_tensor_shape_and_norms(tmp_path):
    job = make_job(tmp_path)
    path = export_text_anchors(job)
    raw = path.read_bytes()
    assert raw[:4] == b"DPT1"
    rank = raw[5]
    shape = tuple(np.frombuffer(raw[8:8 + 8 * rank], dtype="<u8"))
    assert shape == (3, 8, 512)
    payload = np.frombuffer(raw[8 + 8 * rank:], dtype="<f8").reshape(shape)
    np.testing.assert_allclose(np.linalg.norm(payload, axis=-1), 1.0, atol=1e-9)


def test_identical_descriptions_identical_rows(tmp_path):
    enc = HashedNgramTextEncoder(dim=64)
    a, b = enc.encode(["swing the arm", "swing the arm"])
    np.testing.assert_array_equal(a, b)


def test_description_count_enforced(tmp_path):
    with pytest.raises(ValueError, match="descriptions"):
        ExportJob(
            classes=(ClassEntry(0, "x", ("just one",)),),
            samples=(),
            seen=frozenset({0}),
            unseen=frozenset(),
            parts=4, phases=3, anchor_dim=16, feature_dim=8,
            text_encoder="hashed-ngram", skeleton_encoder="npy-passthrough",
            backbone_training_classes=frozenset({0}),
            output_dir=tmp_path,
        )


def test_unseen_class_in_backbone_training_is_hard_error(tmp_path):
    with pytest.raises(ValueError, match="leak"):
        make_job(tmp_path, backbone_classes={0, 1, 2})


def test_feature_dimension_checked(tmp_path):
    job = make_job(tmp_path, feature_dim=256)
    bad = tmp_path / "bad.npy"
    np.save(bad, np.zeros((10, 99)))
    job = ExportJob(
        **{**job.__dict__, "samples": (SampleEntry("bad", 0, str(bad)),)}
    )
    with pytest.raises(ValueError, match="expected"):
        export_visual_features(job)


def test_exported_tree_passes_primary_validation(tmp_path):
    from skelzsl import load_manifest, validate_dataset
    from skelzsl.anchors import assemble_anchor_set

    job = make_job(tmp_path)
    manifest_path = export_dataset(job)
    manifest = load_manifest(manifest_path)
    ds = validate_dataset(manifest)
    anchors = ds.anchor_tensor()
    assert anchors.shape == (3, 8, 512)
    assert ds.features("clip0").shape == (12, 256)
    # rows are importable as a valid anchor set without renormalization drift
    aset = assemble_anchor_set(anchors, manifest)
    np.testing.assert_allclose(aset.values, anchors, atol=1e-9)


def test_round_trip_through_primary_io(tmp_path):
    from skelzsl import load_tensor, save_tensor

    job = make_job(tmp_path)
    export_dataset(job)
    src = job.output_dir / "features" / "clip0.dpt"
    arr = load_tensor(src)
    dst = tmp_path / "again.dpt"
    save_tensor(arr, dst)
    assert src.read_bytes() == dst.read_bytes()


def test_job_file_round_trip(tmp_path):
    job = make_job(tmp_path)
    doc = {
        "classes": [
            {"id": c.class_id, "name": c.name, "descriptions": list(c.descriptions)}
            for c in job.classes
        ],
        "samples": [
            {"id": s.sample_id, "class": s.class_id, "source": s.source}
            for s in job.samples
        ],
        "split": {"seen": [0, 1], "unseen": [2]},
        "parts": 4, "phases": 3, "anchor_dim": 512, "feature_dim": 256,
        "text_encoder": "hashed-ngram", "skeleton_encoder": "npy-passthrough",
        "backbone_training_classes": [0, 1],
        "output_dir": str(tmp_path / "out2"),
    }
    job_path = tmp_path / "job.json"
    job_path.write_text(json.dumps(doc))
    loaded = load_job(job_path)
    assert loaded.classes == job.classes
    assert loaded.granularity_labels[0] == "global"


def test_end_to_end_drives_primary_cli_run(tmp_path):
    """Exported tree must survive `run --tta off` through the primary CLI."""
    job = make_job(tmp_path, n_samples=6)
    manifest_path = export_dataset(job)
    out = tmp_path / "report"
    proc = subprocess.run(
        [sys.executable, "-m", "skelzsl.cli", "run",
         "--data", str(manifest_path), "--params", str(tmp_path / "params"),
         "--tta", "off", "--out", str(out), "--seed", "0"],
        capture_output=True, text=True,
    )
    # params dir does not exist yet: train a tiny model first
    assert proc.returncode != 0
    train = subprocess.run(
        [sys.executable, "-m", "skelzsl.cli", "train",
         "--data", str(manifest_path), "--out", str(tmp_path / "params"),
         "--seed", "0", "--max-epochs", "2"],
        capture_output=True, text=True,
    )
    assert train.returncode == 0, train.stderr
    proc = subprocess.run(
        [sys.executable, "-m", "skelzsl.cli", "run",
         "--data", str(manifest_path), "--params", str(tmp_path / "params"),
         "--tta", "off", "--out", str(out), "--seed", "0", "--force"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    report = json.loads((out / "report.json").read_text())
    assert report["metrics"]["n_samples"] > 0
