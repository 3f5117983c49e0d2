"""Multi-granularity semantic anchor set: assembly, normalization, views."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_io import DatasetManifest

PROMPT_PREFIX = "a video of "

NORM_TOL = 1e-5


def build_prompt(description: str) -> str:
    """Wrap a class/part description in the canonical video prompt template."""
    trimmed = description.strip()
    if not trimmed:
        raise ValueError("empty description")
    return PROMPT_PREFIX + trimmed


@dataclass(frozen=True)
class SemanticAnchorSet:
    """Unit-norm text embeddings, one d-vector per (class, granularity)."""

    values: np.ndarray  # (C, Gr, d), rows unit L2-norm, read-only
    class_ids: tuple[int, ...]
    granularity_labels: tuple[str, ...]

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def num_granularities(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def class_index(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise KeyError(f"class {class_id} absent from anchor set") from None

    def granularity_index(self, label: str) -> int:
        try:
            return self.granularity_labels.index(label)
        except ValueError:
            raise KeyError(f"unknown granularity label: {label}") from None

    def for_class(self, class_id: int) -> np.ndarray:
        """The (Gr, d) anchor block of one class."""
        return self.values[self.class_index(class_id)]

    def global_slice(self) -> np.ndarray:
        """The (C, d) global-granularity prototypes."""
        return self.values[:, 0, :]

    def global_only(self) -> "SemanticAnchorSet":
        """Anchor set reduced to the single global granularity (Gr=1)."""
        vals = np.ascontiguousarray(self.values[:, :1, :])
        vals.setflags(write=False)
        return SemanticAnchorSet(vals, self.class_ids, ("global",))

    def mean_queries(self) -> np.ndarray:
        """Class-agnostic (Gr, d) query matrix: per-granularity class mean."""
        return self.values.mean(axis=0)


def assemble_anchor_set(raw: np.ndarray, manifest: DatasetManifest) -> SemanticAnchorSet:
    """L2-normalize each (class, granularity) row of the raw embedding tensor."""
    dims = manifest.dims
    want = (dims["C"], dims["Gr"], dims["d"])
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != want:
        raise ValueError(f"anchor tensor shape {raw.shape}, expected {want}")
    norms = np.linalg.norm(raw, axis=-1)
    if (norms == 0).any():
        c, g = np.argwhere(norms == 0)[0]
        cid = manifest.class_records[c].class_id
        label = manifest.granularity_labels[g]
        raise ValueError(f"zero-norm anchor row (class {cid}, granularity {label!r})")
    values = raw / norms[..., None]
    values.setflags(write=False)
    return SemanticAnchorSet(
        values=values,
        class_ids=manifest.class_ids(),
        granularity_labels=manifest.granularity_labels,
    )


def granularity_view(anchors: SemanticAnchorSet, label: str) -> np.ndarray:
    """Read-only (C, d) slice of the anchor set for one granularity label."""
    return anchors.values[:, anchors.granularity_index(label), :]
