"""Accuracy metrics, confusion matrices and report assembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor_io import ClassSplit


def top1_accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    if len(preds) != len(labels):
        raise ValueError("prediction/label length mismatch")
    if not labels:
        raise ValueError("empty prediction stream")
    return sum(p == y for p, y in zip(preds, labels)) / len(labels)


def gzsl_metrics(
    preds: Sequence[int], labels: Sequence[int], split: ClassSplit
) -> tuple[float, float, float]:
    """Seen accuracy, unseen accuracy and their harmonic mean."""
    if len(preds) != len(labels):
        raise ValueError("prediction/label length mismatch")
    unknown = [y for y in labels if y not in split.all_classes()]
    if unknown:
        raise ValueError(f"labels outside the split: {sorted(set(unknown))}")
    seen_pairs = [(p, y) for p, y in zip(preds, labels) if y in split.seen]
    unseen_pairs = [(p, y) for p, y in zip(preds, labels) if y in split.unseen]
    if not seen_pairs or not unseen_pairs:
        raise ValueError("harmonic mean requires both seen and unseen samples")
    s = sum(p == y for p, y in seen_pairs) / len(seen_pairs)
    u = sum(p == y for p, y in unseen_pairs) / len(unseen_pairs)
    return s, u, harmonic_mean(s, u)


def harmonic_mean(s: float, u: float) -> float:
    return 2 * s * u / (s + u) if s + u > 0 else 0.0


def confusion_matrix(
    preds: Sequence[int], labels: Sequence[int], class_order: Sequence[int]
) -> np.ndarray:
    """Count matrix with rows indexed by true class in `class_order`."""
    index = {c: i for i, c in enumerate(class_order)}
    mat = np.zeros((len(class_order), len(class_order)), dtype=np.int64)
    for p, y in zip(preds, labels):
        if y not in index or p not in index:
            raise ValueError(f"class outside class_order: {p if p not in index else y}")
        mat[index[y], index[p]] += 1
    return mat


@dataclass(frozen=True)
class MetricsReport:
    top1: float
    per_class_acc: dict[int, float]
    confusion: np.ndarray
    class_order: tuple[int, ...]
    n_samples: int
    seen_acc: float | None = None
    unseen_acc: float | None = None
    harmonic: float | None = None

    def to_json_dict(self) -> dict:
        """Serializable summary with accuracies at 4 decimals (half-to-even)."""
        doc = {
            "top1": round(self.top1, 4),
            "n_samples": self.n_samples,
            "per_class_acc": {
                str(c): round(a, 4) for c, a in sorted(self.per_class_acc.items())
            },
            "class_order": list(self.class_order),
            "confusion": self.confusion.tolist(),
        }
        if self.seen_acc is not None:
            doc["S"] = round(self.seen_acc, 4)
        if self.unseen_acc is not None:
            doc["U"] = round(self.unseen_acc, 4)
        if self.harmonic is not None:
            doc["H"] = round(self.harmonic, 4)
        return doc


def build_report(
    preds: Sequence[int],
    labels: Sequence[int],
    class_order: Sequence[int],
    split: ClassSplit | None = None,
) -> MetricsReport:
    top1 = top1_accuracy(preds, labels)
    conf = confusion_matrix(preds, labels, class_order)
    per_class: dict[int, float] = {}
    for i, c in enumerate(class_order):
        total = conf[i].sum()
        if total > 0:
            per_class[c] = conf[i, i] / total
    s = u = h = None
    if split is not None:
        has_seen = any(y in split.seen for y in labels)
        has_unseen = any(y in split.unseen for y in labels)
        if has_seen and has_unseen:
            s, u, h = gzsl_metrics(preds, labels, split)
    return MetricsReport(
        top1=top1,
        per_class_acc=per_class,
        confusion=conf,
        class_order=tuple(class_order),
        n_samples=len(labels),
        seen_acc=s,
        unseen_acc=u,
        harmonic=h,
    )


def classwise_delta(
    before: MetricsReport, after: MetricsReport
) -> list[tuple[int, float]]:
    """Per-class accuracy change, largest gains first; ties by class id."""
    if set(before.per_class_acc) != set(after.per_class_acc):
        raise ValueError("reports cover different class sets")
    deltas = [
        (c, after.per_class_acc[c] - before.per_class_acc[c])
        for c in before.per_class_acc
    ]
    return sorted(deltas, key=lambda t: (-t[1], t[0]))
