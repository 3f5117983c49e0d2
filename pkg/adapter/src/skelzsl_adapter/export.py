"""Export pretrained-encoder outputs as DPT1 tensors plus a manifest.

The adapter is a pure exporter: it never computes metrics or adapts
anything. Text descriptions come in per class at every granularity
(one global description, one per body part, one per temporal phase),
already generated offline by a language model. The description-generation
prompt that produces consistent per-part answers is, for reference:

    Using the following format, <QUESTION>: <PART 1> would: ...;
    <PART 2> would: ...; ...

Each description is wrapped in the video prompt template ("a video of
<description>") before text encoding, matching what the alignment library
expects of its anchor tensors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoders import skeleton_encoder, text_encoder
from .wire import write_manifest, write_tensor

PROMPT_PREFIX = "a video of "


@dataclass(frozen=True)
class ClassEntry:
    class_id: int
    name: str
    descriptions: tuple[str, ...]  # global, then body parts, then phases


@dataclass(frozen=True)
class SampleEntry:
    sample_id: str
    class_id: int
    source: str  # raw input consumed by the skeleton encoder


@dataclass(frozen=True)
class ExportJob:
    classes: tuple[ClassEntry, ...]
    samples: tuple[SampleEntry, ...]
    seen: frozenset[int]
    unseen: frozenset[int]
    parts: int
    phases: int
    anchor_dim: int
    feature_dim: int
    text_encoder: str
    skeleton_encoder: str
    backbone_training_classes: frozenset[int]
    output_dir: Path
    checkpoint: str | None = None

    def __post_init__(self):
        gr = self.parts + self.phases + 1
        for entry in self.classes:
            if len(entry.descriptions) != gr:
                raise ValueError(
                    f"class {entry.class_id}: {len(entry.descriptions)} descriptions, "
                    f"expected {gr} (global + {self.parts} parts + {self.phases} phases)"
                )
        if self.seen & self.unseen:
            raise ValueError("seen and unseen classes overlap")
        declared = {c.class_id for c in self.classes}
        if self.seen | self.unseen != declared:
            raise ValueError("split does not cover the declared classes")
        leak = self.backbone_training_classes & self.unseen
        if leak:
            raise ValueError(
                f"backbone was trained on unseen classes {sorted(leak)}: "
                "this would leak test information into the features"
            )

    @property
    def granularity_labels(self) -> list[str]:
        return (
            ["global"]
            + [f"bp_{i}" for i in range(1, self.parts + 1)]
            + [f"ti_{i}" for i in range(1, self.phases + 1)]
        )


def load_job(path: str | Path) -> ExportJob:
    doc = json.loads(Path(path).read_text())
    classes = tuple(
        ClassEntry(int(c["id"]), str(c["name"]), tuple(str(t) for t in c["descriptions"]))
        for c in doc["classes"]
    )
    samples = tuple(
        SampleEntry(str(s["id"]), int(s["class"]), str(s["source"]))
        for s in doc.get("samples", [])
    )
    return ExportJob(
        classes=classes,
        samples=samples,
        seen=frozenset(int(x) for x in doc["split"]["seen"]),
        unseen=frozenset(int(x) for x in doc["split"]["unseen"]),
        parts=int(doc.get("parts", 4)),
        phases=int(doc.get("phases", 3)),
        anchor_dim=int(doc.get("anchor_dim", 512)),
        feature_dim=int(doc.get("feature_dim", 256)),
        text_encoder=str(doc.get("text_encoder", "hashed-ngram")),
        skeleton_encoder=str(doc.get("skeleton_encoder", "npy-passthrough")),
        backbone_training_classes=frozenset(
            int(x) for x in doc.get("backbone_training_classes", sorted(doc["split"]["seen"]))
        ),
        output_dir=Path(doc["output_dir"]),
        checkpoint=doc.get("checkpoint"),
    )


def build_prompt(description: str) -> str:
    trimmed = description.strip()
    if not trimmed:
        raise ValueError("empty description")
    return PROMPT_PREFIX + trimmed


def export_text_anchors(job: ExportJob) -> Path:
    """Encode every prompt and write the (C, Gr, d) anchor tensor."""
    enc = text_encoder(job.text_encoder, job.anchor_dim)
    gr = len(job.granularity_labels)
    prompts = [build_prompt(d) for entry in job.classes for d in entry.descriptions]
    emb = enc.encode(prompts)
    if emb.shape[1] != job.anchor_dim:
        raise ValueError(
            f"text encoder produced dimension {emb.shape[1]}, expected {job.anchor_dim}"
        )
    anchors = emb.reshape(len(job.classes), gr, job.anchor_dim)
    anchors = anchors / np.linalg.norm(anchors, axis=-1, keepdims=True)
    job.output_dir.mkdir(parents=True, exist_ok=True)
    path = job.output_dir / "anchors.dpt"
    write_tensor(anchors, path)
    return path


def export_visual_features(job: ExportJob) -> list[dict]:
    """Write one (S, n) tensor per sample; returns manifest sample records."""
    enc = skeleton_encoder(job.skeleton_encoder, job.feature_dim, job.checkpoint)
    (job.output_dir / "features").mkdir(parents=True, exist_ok=True)
    records = []
    node_count = None
    for sample in job.samples:
        feats = enc.encode(sample.source)
        if node_count is None:
            node_count = feats.shape[0]
        elif feats.shape[0] != node_count:
            raise ValueError(
                f"sample {sample.sample_id}: {feats.shape[0]} nodes, "
                f"expected {node_count} like the rest of the job"
            )
        rel = f"features/{sample.sample_id}.dpt"
        write_tensor(feats, job.output_dir / rel)
        records.append({"id": sample.sample_id, "class": sample.class_id, "features": rel})
    return records


def export_dataset(job: ExportJob) -> Path:
    """Full export: anchors, features and the manifest tying them together."""
    export_text_anchors(job)
    records = export_visual_features(job)
    if records:
        first = records[0]["features"]
        node_count = _tensor_rows(job.output_dir / first)
    else:
        node_count = 1
    manifest = {
        "classes": [
            {"id": c.class_id, "name": c.name, "descriptions": list(c.descriptions)}
            for c in job.classes
        ],
        "split": {"seen": sorted(job.seen), "unseen": sorted(job.unseen)},
        "granularities": job.granularity_labels,
        "anchors": "anchors.dpt",
        "samples": records,
        "dims": {
            "C": len(job.classes),
            "Gr": len(job.granularity_labels),
            "d": job.anchor_dim,
            "S": node_count,
            "n": job.feature_dim,
        },
    }
    path = job.output_dir / "manifest.json"
    write_manifest(manifest, path)
    return path


def _tensor_rows(path: Path) -> int:
    raw = path.read_bytes()
    rank = raw[5]
    extents = np.frombuffer(raw[8:8 + 8 * rank], dtype="<u8")
    return int(extents[0])


def main(argv: list[str] | None = None) -> int:
    import argparse

    parser = argparse.ArgumentParser(
        prog="skelzsl-adapter",
        description="Export encoder outputs to the DPT1/manifest wire format",
    )
    parser.add_argument("job", help="JSON job file")
    args = parser.parse_args(argv)
    job = load_job(args.job)
    path = export_dataset(job)
    print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
