"""Entropy-based seen/unseen triage and threshold calibration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import AlignmentParams, FusionSpec, VisualFeatureMap
from .anchors import SemanticAnchorSet
from .refinement import Prediction, classify_embedding, embed_sample
from .tensor_io import ClassSplit

SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class GateConfig:
    delta: float | None = None
    grid: tuple[float, ...] | None = None
    quantile_count: int = 33

    def __post_init__(self):
        if self.delta is not None and self.delta < 0:
            raise ValueError("delta must be nonnegative")


def entropy(probs: np.ndarray) -> float:
    """Shannon entropy (natural log) of a probability vector; 0*log0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or (p < -SIMPLEX_TOL).any() or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("input is not a probability simplex")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return float(-terms.sum())


def triage_and_classify(
    fmap: VisualFeatureMap,
    refined: SemanticAnchorSet,
    params: AlignmentParams,
    split: ClassSplit,
    delta: float,
    tau: float | None = None,
    fusion: FusionSpec = FusionSpec(),
) -> Prediction:
    """Route by full-set entropy: below delta -> seen-only, else unseen-only."""
    if not split.seen or not split.unseen:
        raise ValueError("triage requires nonempty seen and unseen splits")
    tau = params.tau if tau is None else tau
    v = embed_sample(fmap, refined, params, fusion)
    union = classify_embedding(v, refined, split.all_classes(), tau)
    domain = split.seen if union.entropy < delta else split.unseen
    return classify_embedding(v, refined, domain, tau)


@dataclass(frozen=True)
class CalibrationRow:
    delta: float
    seen_acc: float
    unseen_acc: float
    harmonic: float


def _route_and_score(
    entropies: np.ndarray,
    embeddings: np.ndarray,
    labels: np.ndarray,
    refined: SemanticAnchorSet,
    split: ClassSplit,
    delta: float,
    tau: float,
) -> CalibrationRow:
    seen_sorted = tuple(sorted(split.seen))
    unseen_sorted = tuple(sorted(split.unseen))
    correct_seen = total_seen = correct_unseen = total_unseen = 0
    for h, v, y in zip(entropies, embeddings, labels):
        domain = seen_sorted if h < delta else unseen_sorted
        pred = classify_embedding(v, refined, domain, tau).label
        if y in split.seen:
            total_seen += 1
            correct_seen += pred == y
        else:
            total_unseen += 1
            correct_unseen += pred == y
    s = correct_seen / total_seen
    u = correct_unseen / total_unseen
    h_mean = 2 * s * u / (s + u) if s + u > 0 else 0.0
    return CalibrationRow(float(delta), s, u, h_mean)


def calibrate_delta(
    validation_stream: list[VisualFeatureMap],
    anchors: SemanticAnchorSet,
    params: AlignmentParams,
    split: ClassSplit,
    cfg: GateConfig = GateConfig(),
    fusion: FusionSpec = FusionSpec(),
) -> tuple[float, list[CalibrationRow]]:
    """Pick the entropy threshold maximizing harmonic-mean accuracy.

    Per-sample embeddings and full-set entropies are computed once from the
    frozen model; every candidate threshold is then scored by routing and
    restricted classification. Ties go to the smallest threshold.
    """
    if not validation_stream:
        raise ValueError("empty validation stream")
    labels = np.array([s.class_id for s in validation_stream])
    has_seen = any(y in split.seen for y in labels)
    has_unseen = any(y in split.unseen for y in labels)
    if not (has_seen and has_unseen):
        raise ValueError("validation stream must contain both seen and unseen samples")

    embeddings = np.stack([
        embed_sample(s, anchors, params, fusion) for s in validation_stream
    ])
    union = tuple(sorted(split.all_classes()))
    entropies = np.array([
        classify_embedding(v, anchors, union, params.tau).entropy for v in embeddings
    ])
    if cfg.grid is not None:
        grid = sorted(cfg.grid)
    else:
        qs = np.linspace(0.01, 0.99, cfg.quantile_count)
        grid = sorted(set(float(q) for q in np.quantile(entropies, qs)))
    rows = [
        _route_and_score(entropies, embeddings, labels, anchors, split, d, params.tau)
        for d in grid
    ]
    best = max(rows, key=lambda r: (r.harmonic, -r.delta))
    return best.delta, rows
