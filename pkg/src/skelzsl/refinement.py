"""Streaming test-time refinement of semantic anchors.

Each incoming sample is classified against anchors rescaled by a learnable
elementwise affine transform (scale, bias). High-confidence pseudo-labeled
samples feed a bounded per-class memory bank; once the bank is populated,
every new sample triggers one gradient step on the affine parameters using
a class-balanced batch of stored samples. The trained alignment parameters
stay frozen throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .alignment import (
    AlignmentParams,
    FusionSpec,
    VisualFeatureMap,
    fuse_rows,
    static_fuse,
)
from .anchors import SemanticAnchorSet
from .seeding import rng_for
from .tensor_io import ClassSplit

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
_QUERY_GRAD = True


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "cosine"  # "constant" | "cosine"
    horizon: int | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule kind: {self.kind}")


@dataclass
class RefinementState:
    """Learnable anchor transform plus optimizer and schedule bookkeeping."""

    scale: np.ndarray  # (C, Gr, d), init ones
    bias: np.ndarray   # (C, Gr, d), init zeros
    lr: float = 0.01
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: str = "sgd"  # "sgd" | "adam"
    step_count: int = 0
    adam_m: dict[str, np.ndarray] | None = None
    adam_v: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer: {self.optimizer}")

    def current_lr(self) -> float:
        if self.schedule.kind == "constant" or not self.schedule.horizon:
            return self.lr
        t = min(self.step_count, self.schedule.horizon)
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * t / self.schedule.horizon))


def init_refinement_state(
    anchors: SemanticAnchorSet,
    lr: float = 0.01,
    schedule: ScheduleConfig | None = None,
    optimizer: str = "sgd",
) -> RefinementState:
    shape = anchors.values.shape
    return RefinementState(
        scale=np.ones(shape),
        bias=np.zeros(shape),
        lr=lr,
        schedule=schedule or ScheduleConfig(),
        optimizer=optimizer,
    )


def refine_anchors(anchors: SemanticAnchorSet, state: RefinementState) -> SemanticAnchorSet:
    """Elementwise affine transform of every anchor, renormalized per vector."""
    if state.scale.shape != anchors.values.shape:
        raise ValueError(
            f"state shape {state.scale.shape} does not match anchors {anchors.values.shape}"
        )
    raw = state.scale * anchors.values + state.bias
    norms = np.linalg.norm(raw, axis=-1)
    if (norms == 0).any():
        c, g = np.argwhere(norms == 0)[0]
        raise ValueError(
            f"zero-norm refined anchor (class {anchors.class_ids[c]}, "
            f"granularity {anchors.granularity_labels[g]!r})"
        )
    values = raw / norms[..., None]
    values.setflags(write=False)
    return SemanticAnchorSet(values, anchors.class_ids, anchors.granularity_labels)


@dataclass(frozen=True)
class Prediction:
    candidates: tuple[int, ...]  # ascending class ids
    probs: np.ndarray            # simplex over candidates
    label: int
    confidence: float
    entropy: float


def _prediction_from_sims(sims: np.ndarray, candidates: tuple[int, ...], tau: float) -> Prediction:
    logits = sims / tau
    logits = logits - logits.max()
    e = np.exp(logits)
    probs = e / e.sum()
    idx = int(np.argmax(probs))
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    return Prediction(
        candidates=candidates,
        probs=probs,
        label=candidates[idx],
        confidence=float(probs[idx]),
        entropy=float(-plogp.sum()),
    )


def embed_sample(
    fmap: VisualFeatureMap,
    refined: SemanticAnchorSet,
    params: AlignmentParams,
    fusion: FusionSpec = FusionSpec(),
) -> np.ndarray:
    """Global projected embedding of a sample under the given anchors."""
    return fuse_rows(fmap, refined.mean_queries(), params, fusion)[0]


def classify_embedding(
    v: np.ndarray,
    refined: SemanticAnchorSet,
    candidates: set[int] | list[int] | tuple[int, ...],
    tau: float,
) -> Prediction:
    cand = tuple(sorted(candidates))
    if not cand:
        raise ValueError("empty candidate set")
    protos = refined.values[[refined.class_index(c) for c in cand], 0, :]
    return _prediction_from_sims(protos @ v, cand, tau)


def predict(
    fmap: VisualFeatureMap,
    refined: SemanticAnchorSet,
    params: AlignmentParams,
    candidates: set[int] | list[int] | tuple[int, ...],
    tau: float | None = None,
    fusion: FusionSpec = FusionSpec(),
) -> Prediction:
    """Softmax over cosine similarity to the candidates' global anchors."""
    tau = params.tau if tau is None else tau
    v = embed_sample(fmap, refined, params, fusion)
    return classify_embedding(v, refined, candidates, tau)


# ---------------------------------------------------------------------------
# memory bank


@dataclass(frozen=True)
class BankEntry:
    feature_map: VisualFeatureMap
    pseudo_label: int
    confidence: float
    insertion_index: int


class MemoryBank:
    """Bounded per-class store of the highest-confidence pseudo-labeled samples."""

    def __init__(self, capacity: int = 16, conf_threshold: float = 0.1):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.conf_threshold = conf_threshold
        self._classes: dict[int, list[BankEntry]] = {}
        self._counter = 0

    def insert(self, fmap: VisualFeatureMap, pseudo_label: int, confidence: float) -> BankEntry:
        assert confidence > self.conf_threshold, "caller must gate on confidence"
        entry = BankEntry(fmap, pseudo_label, confidence, self._counter)
        self._counter += 1
        bucket = self._classes.setdefault(pseudo_label, [])
        bucket.append(entry)
        if len(bucket) > self.capacity:
            victim = min(
                range(len(bucket)),
                key=lambda i: (bucket[i].confidence, bucket[i].insertion_index),
            )
            bucket.pop(victim)
        return entry

    def total_size(self) -> int:
        return sum(len(b) for b in self._classes.values())

    def class_sizes(self) -> dict[int, int]:
        return {c: len(b) for c, b in sorted(self._classes.items())}

    def entries(self, class_id: int) -> list[BankEntry]:
        return list(self._classes.get(class_id, []))

    def sample_balanced(self, batch_size: int, rng: np.random.Generator) -> list[BankEntry]:
        """Round-robin one uniform draw per nonempty class until filled."""
        if self.total_size() == 0:
            raise ValueError("empty memory bank")
        remaining = {c: list(b) for c, b in sorted(self._classes.items()) if b}
        batch: list[BankEntry] = []
        while len(batch) < batch_size and remaining:
            for c in sorted(remaining):
                if len(batch) >= batch_size:
                    break
                bucket = remaining[c]
                pick = int(rng.integers(len(bucket)))
                batch.append(bucket.pop(pick))
                if not bucket:
                    del remaining[c]
        return batch


# ---------------------------------------------------------------------------
# adaptation step


def _adaptation_graph(
    batch: list[BankEntry],
    anchors: SemanticAnchorSet,
    state: RefinementState,
    params: AlignmentParams,
    candidates: tuple[int, ...],
    fusion: FusionSpec,
) -> tuple[ad.Var, ad.Var, ad.Var]:
    """Pseudo-label cross-entropy through refine -> fuse -> classify."""
    scale = ad.Var(state.scale)
    bias = ad.Var(state.bias)
    raw = ad.add(ad.mul(scale, anchors.values), bias)
    refined = ad.l2_normalize(raw, axis=-1)                      # (C, Gr, d)
    cand_rows = [anchors.class_index(c) for c in candidates]
    protos = ad.index(refined, (np.asarray(cand_rows), 0))        # (|cand|, d)
    if _QUERY_GRAD:
        queries = ad.vmean(refined, axis=0)                       # (Gr, d)
    else:
        queries = ad.stop_gradient(ad.vmean(refined, axis=0))     # (Gr, d)

    losses = []
    for entry in batch:
        if fusion.mode == "static":
            fused = ad.lift(static_fuse(entry.feature_map, fusion.partition))
        else:
            g = entry.feature_map.values
            h = params.w_q.shape[1]
            q = ad.matmul(queries, ad.lift(params.w_q))
            k = g @ params.w_k
            logits = ad.mul(ad.matmul(q, ad.lift(k.T)), 1.0 / np.sqrt(h))
            attn = ad.softmax(logits, axis=-1)
            fused = ad.matmul(attn, ad.lift(g))
        hidden = ad.relu(ad.add(ad.matmul(fused, ad.lift(params.mlp_w1)), ad.lift(params.mlp_b1)))
        out = ad.add(ad.matmul(hidden, ad.lift(params.mlp_w2)), ad.lift(params.mlp_b2))
        v = ad.index(ad.l2_normalize(out, axis=-1), 0)            # (d,)
        sims = ad.matmul(protos, ad.reshape(v, (-1, 1)))          # (|cand|, 1)
        logit_vec = ad.mul(ad.reshape(sims, (len(candidates),)), 1.0 / params.tau)
        lse = ad.logsumexp(logit_vec, axis=0)
        pos = ad.index(logit_vec, candidates.index(entry.pseudo_label))
        losses.append(ad.sub(lse, pos))
    loss = ad.vmean(ad.vstack(losses))
    return loss, scale, bias


def adapt_step(
    batch: list[BankEntry],
    anchors: SemanticAnchorSet,
    state: RefinementState,
    params: AlignmentParams,
    candidates: set[int] | list[int] | tuple[int, ...],
    fusion: FusionSpec = FusionSpec(),
) -> float:
    """One gradient step on (scale, bias) at the scheduled rate.

    The loss is the mean negative log-probability of each stored sample's
    pseudo-label, recomputed end to end with the current state; alignment
    parameters are untouched.
    """
    if not batch:
        raise ValueError("empty adaptation batch")
    cand = tuple(sorted(candidates))
    loss, scale, bias = _adaptation_graph(batch, anchors, state, params, cand, fusion)
    value = float(loss.value)
    if not np.isfinite(value):
        raise ValueError("non-finite adaptation loss")
    ad.backward(loss)
    g_scale = scale.grad if scale.grad is not None else np.zeros_like(state.scale)
    g_bias = bias.grad if bias.grad is not None else np.zeros_like(state.bias)
    lr = state.current_lr()
    if state.optimizer == "adam":
        if state.adam_m is None:
            state.adam_m = {"scale": np.zeros_like(state.scale), "bias": np.zeros_like(state.bias)}
            state.adam_v = {"scale": np.zeros_like(state.scale), "bias": np.zeros_like(state.bias)}
        t = state.step_count + 1
        for key, g in (("scale", g_scale), ("bias", g_bias)):
            p = getattr(state, key)
            state.adam_m[key] = ADAM_BETA1 * state.adam_m[key] + (1 - ADAM_BETA1) * g
            state.adam_v[key] = ADAM_BETA2 * state.adam_v[key] + (1 - ADAM_BETA2) * g * g
            mhat = state.adam_m[key] / (1 - ADAM_BETA1 ** t)
            vhat = state.adam_v[key] / (1 - ADAM_BETA2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    else:
        state.scale -= lr * g_scale
        state.bias -= lr * g_bias
    state.step_count += 1
    return value


def adaptation_loss_value(
    batch: list[BankEntry],
    anchors: SemanticAnchorSet,
    state: RefinementState,
    params: AlignmentParams,
    candidates: set[int] | list[int] | tuple[int, ...],
    fusion: FusionSpec = FusionSpec(),
) -> float:
    """Forward-only adaptation loss (no update), for verification."""
    cand = tuple(sorted(candidates))
    loss, _, _ = _adaptation_graph(batch, anchors, state, params, cand, fusion)
    return float(loss.value)


# ---------------------------------------------------------------------------
# streaming loop


@dataclass
class StreamConfig:
    protocol: str = "zsl"          # "zsl" | "gzsl"
    tta: str = "full"              # "off" | "nobank" | "full"
    bank_capacity: int = 16
    conf_threshold: float = 0.1
    b_min: int | None = None       # default: max(|candidates|, 8)
    adapt_lr: float = 0.01
    schedule: str = "cosine"
    adapt_batch_size: int = 64
    optimizer: str = "sgd"
    steps_per_sample: int = 1
    insert_policy: str = "all"     # "all" | "seen_only"
    delta: float | None = None     # entropy gate threshold (gzsl)
    seed: int = 0

    def __post_init__(self):
        if self.protocol not in ("zsl", "gzsl"):
            raise ValueError(f"unknown protocol: {self.protocol}")
        if self.tta not in ("off", "nobank", "full"):
            raise ValueError(f"unknown tta mode: {self.tta}")
        if self.insert_policy not in ("all", "seen_only"):
            raise ValueError(f"unknown insert policy: {self.insert_policy}")


@dataclass(frozen=True)
class StreamRecord:
    sample_id: str
    true_class: int
    predicted_class: int
    confidence: float
    entropy: float
    feature: np.ndarray  # global projected embedding used for the prediction


@dataclass
class StreamResult:
    records: list[StreamRecord]
    final_state: RefinementState
    bank_sizes: dict[int, int]
    adapt_losses: list[float]


def _gated_prediction(
    v: np.ndarray,
    refined: SemanticAnchorSet,
    split: ClassSplit,
    delta: float,
    tau: float,
) -> Prediction:
    """Entropy triage over the union set, then domain-restricted classification."""
    union = classify_embedding(v, refined, split.all_classes(), tau)
    domain = split.seen if union.entropy < delta else split.unseen
    return classify_embedding(v, refined, domain, tau)


def run_stream(
    stream: list[VisualFeatureMap],
    anchors: SemanticAnchorSet,
    params: AlignmentParams,
    split: ClassSplit,
    cfg: StreamConfig,
    fusion: FusionSpec = FusionSpec(),
) -> StreamResult:
    """Sequential inference over `stream` with optional online refinement.

    Order of operations per sample follows the online protocol: refine
    anchors with the current state, predict, optionally store the
    pseudo-label, then take at most one adaptation step.
    """
    if cfg.protocol == "gzsl":
        if not split.seen or not split.unseen:
            raise ValueError("gzsl requires nonempty seen and unseen splits")
        if cfg.delta is None:
            raise ValueError("gzsl streaming requires an entropy threshold delta")
        candidates = tuple(sorted(split.all_classes()))
    else:
        candidates = tuple(sorted(split.unseen))
        if not candidates:
            raise ValueError("zsl requires a nonempty unseen split")

    horizon = len(stream) if cfg.schedule == "cosine" else None
    state = init_refinement_state(
        anchors,
        lr=cfg.adapt_lr,
        schedule=ScheduleConfig(kind=cfg.schedule, horizon=horizon),
        optimizer=cfg.optimizer,
    )
    bank = MemoryBank(capacity=cfg.bank_capacity, conf_threshold=cfg.conf_threshold)
    b_min = cfg.b_min if cfg.b_min is not None else max(len(candidates), 8)
    rng = rng_for(cfg.seed, "stream")

    records: list[StreamRecord] = []
    adapt_losses: list[float] = []
    for fmap in stream:
        refined = refine_anchors(anchors, state)
        v = embed_sample(fmap, refined, params, fusion)
        if cfg.protocol == "gzsl":
            pred = _gated_prediction(v, refined, split, cfg.delta, params.tau)
        else:
            pred = classify_embedding(v, refined, candidates, params.tau)
        records.append(StreamRecord(
            sample_id=fmap.sample_id,
            true_class=fmap.class_id,
            predicted_class=pred.label,
            confidence=pred.confidence,
            entropy=pred.entropy,
            feature=v,
        ))
        if cfg.tta == "off":
            continue
        confident = pred.confidence > cfg.conf_threshold
        insertable = confident and (
            cfg.insert_policy == "all" or pred.label in split.seen
        )
        if cfg.tta == "full":
            if insertable:
                bank.insert(fmap, pred.label, pred.confidence)
            if bank.total_size() >= b_min:
                batch = bank.sample_balanced(
                    min(bank.total_size(), cfg.adapt_batch_size), rng
                )
                for _ in range(cfg.steps_per_sample):
                    adapt_losses.append(
                        adapt_step(batch, anchors, state, params, candidates, fusion)
                    )
        elif cfg.tta == "nobank" and insertable:
            batch = [BankEntry(fmap, pred.label, pred.confidence, -1)]
            for _ in range(cfg.steps_per_sample):
                adapt_losses.append(
                    adapt_step(batch, anchors, state, params, candidates, fusion)
                )
    return StreamResult(records, state, bank.class_sizes(), adapt_losses)


