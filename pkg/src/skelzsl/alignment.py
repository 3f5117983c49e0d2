"""Visual-semantic alignment: attention fusion, contrastive losses, training.

The attention path treats per-granularity text anchors as queries over a
sample's spatio-temporal node features; the fused rows are projected into
the text space with a small MLP and pulled toward their class anchors with
a symmetric contrastive objective whose granularity weights are learned.
Exact gradients come from the internal reverse-mode tape in ``autodiff``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .anchors import SemanticAnchorSet, assemble_anchor_set
from .seeding import rng_for
from .tensor_io import ClassSplit, ValidatedDataset, load_tensor, save_tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Fixed spatial grouping for 25-joint skeletons: head / hands / torso / legs.
DEFAULT_25_JOINT_GROUPS = (
    ("head", (0, 1, 2, 3)),
    ("hands", (4, 5, 6, 7, 8, 9, 10, 11, 21, 22, 23, 24)),
    ("torso", (12, 16, 20)),
    ("legs", (13, 14, 15, 17, 18, 19)),
)


@dataclass(frozen=True)
class VisualFeatureMap:
    """One sample's (S, n) spatio-temporal node features."""

    values: np.ndarray
    sample_id: str
    class_id: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"feature map must be (S, n) with S,n >= 1, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError(f"non-finite feature map for sample {self.sample_id}")
        object.__setattr__(self, "values", v)


@dataclass
class AlignmentParams:
    """Trainable alignment parameters (query/key projections, MLP, weights)."""

    w_q: np.ndarray  # (d, h)
    w_k: np.ndarray  # (n, h)
    mlp_w1: np.ndarray  # (n, H)
    mlp_b1: np.ndarray  # (H,)
    mlp_w2: np.ndarray  # (H, d)
    mlp_b2: np.ndarray  # (d,)
    alpha_raw: np.ndarray  # (Gr,)
    tau: float

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")

    def alpha(self) -> np.ndarray:
        """Granularity weights: normalized softplus, strictly positive, sum 1."""
        s = np.logaddexp(0.0, self.alpha_raw)
        return s / s.sum()

    def copy(self) -> "AlignmentParams":
        return AlignmentParams(
            self.w_q.copy(), self.w_k.copy(), self.mlp_w1.copy(), self.mlp_b1.copy(),
            self.mlp_w2.copy(), self.mlp_b2.copy(), self.alpha_raw.copy(), self.tau,
        )

    def trainables(self) -> dict[str, np.ndarray]:
        return {
            "w_q": self.w_q, "w_k": self.w_k,
            "mlp_w1": self.mlp_w1, "mlp_b1": self.mlp_b1,
            "mlp_w2": self.mlp_w2, "mlp_b2": self.mlp_b2,
            "alpha_raw": self.alpha_raw,
        }


@dataclass(frozen=True)
class GradientSet:
    w_q: np.ndarray
    w_k: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    alpha_raw: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in (
            "w_q", "w_k", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "alpha_raw")}


@dataclass(frozen=True)
class FusionOutput:
    attention: np.ndarray  # (Gr, S), rows on the probability simplex
    fused: np.ndarray      # (Gr, n)
    projected: np.ndarray  # (Gr, d), unit-norm rows


def init_alignment_params(
    d: int, n: int, gr: int,
    hidden_attention: int = 150,
    hidden_mlp: int = 512,
    tau: float = 0.07,
    rng: np.random.Generator | None = None,
) -> AlignmentParams:
    rng = rng or np.random.default_rng(0)
    return AlignmentParams(
        w_q=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, hidden_attention)),
        w_k=rng.normal(0.0, 1.0 / np.sqrt(n), size=(n, hidden_attention)),
        mlp_w1=rng.normal(0.0, np.sqrt(2.0 / n), size=(n, hidden_mlp)),
        mlp_b1=np.full(hidden_mlp, 0.01),  # keeps relu rows alive at init
        mlp_w2=rng.normal(0.0, np.sqrt(2.0 / hidden_mlp), size=(hidden_mlp, d)),
        mlp_b2=rng.normal(0.0, 0.01, size=d),
        alpha_raw=np.zeros(gr),
        tau=tau,
    )


# ---------------------------------------------------------------------------
# fusion


@dataclass(frozen=True)
class StaticPartition:
    """Fixed joint groups plus equal temporal thirds for the static baseline."""

    joints: int
    groups: tuple[tuple[str, tuple[int, ...]], ...]
    phases: int

    def __post_init__(self):
        if self.joints < 1 or self.phases < 1:
            raise ValueError("joints and phases must be positive")
        covered: set[int] = set()
        for label, members in self.groups:
            if not members:
                raise ValueError(f"empty group {label!r}")
            for j in members:
                if not 0 <= j < self.joints:
                    raise ValueError(f"joint index {j} out of range for J={self.joints}")
                if j in covered:
                    raise ValueError(f"joint {j} assigned to more than one group")
                covered.add(j)
        for j in range(self.joints):
            if j not in covered:
                raise ValueError(f"uncovered joint {j} of {self.joints}")

    @property
    def num_granularities(self) -> int:
        return 1 + len(self.groups) + self.phases


def contiguous_partition(joints: int, parts: int, phases: int) -> StaticPartition:
    """Evenly split joint indices into `parts` contiguous groups."""
    if parts > joints:
        raise ValueError("more parts than joints")
    bounds = np.linspace(0, joints, parts + 1).astype(int)
    groups = tuple(
        (f"part_{p + 1}", tuple(range(bounds[p], bounds[p + 1])))
        for p in range(parts)
    )
    return StaticPartition(joints=joints, groups=groups, phases=phases)


@dataclass(frozen=True)
class FusionSpec:
    """How per-granularity visual rows are produced: attention or fixed means.

    mode 'adaptive' uses cross-modal attention; 'static' averages fixed
    joint groups and temporal thirds; 'global' is the adaptive path on a
    global-only (Gr=1) anchor set.
    """

    mode: str = "adaptive"
    partition: StaticPartition | None = None

    def __post_init__(self):
        if self.mode not in ("adaptive", "static", "global"):
            raise ValueError(f"unknown fusion mode: {self.mode}")
        if self.mode == "static" and self.partition is None:
            raise ValueError("static fusion requires a partition")


def attention_fuse(
    queries: np.ndarray, fmap: VisualFeatureMap, params: AlignmentParams
) -> FusionOutput:
    """Scaled dot-product attention of anchor queries over the node features."""
    queries = np.asarray(queries, dtype=np.float64)
    g = fmap.values
    d, h = params.w_q.shape
    if queries.ndim != 2 or queries.shape[1] != d:
        raise ValueError(f"queries shape {queries.shape} incompatible with W_Q {params.w_q.shape}")
    if g.shape[1] != params.w_k.shape[0]:
        raise ValueError(f"feature dim {g.shape[1]} incompatible with W_K {params.w_k.shape}")
    q = queries @ params.w_q
    k = g @ params.w_k
    logits = (q @ k.T) / np.sqrt(h)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    attention = e / e.sum(axis=1, keepdims=True)
    fused = attention @ g
    projected = project_rows(fused, params)
    return FusionOutput(attention=attention, fused=fused, projected=projected)


def project_rows(fused: np.ndarray, params: AlignmentParams) -> np.ndarray:
    """MLP-project fused rows into the text space and L2-normalize them."""
    hidden = np.maximum(fused @ params.mlp_w1 + params.mlp_b1, 0.0)
    out = hidden @ params.mlp_w2 + params.mlp_b2
    norms = np.linalg.norm(out, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("zero-norm projected row")
    return out / norms


def static_fuse(fmap: VisualFeatureMap, partition: StaticPartition) -> np.ndarray:
    """Mean-pool node features per fixed body-part group and temporal third."""
    g = fmap.values
    s = g.shape[0]
    j = partition.joints
    if s % j != 0:
        raise ValueError(f"node count {s} not divisible by {j} joints")
    frames = s // j
    z = partition.phases
    base = frames // z
    if base == 0:
        raise ValueError(f"{frames} frames cannot fill {z} temporal segments")
    nodes = g.reshape(frames, j, g.shape[1])  # node (t, joint) is row t*J + joint
    rows = [g.mean(axis=0)]
    for _, members in partition.groups:
        rows.append(nodes[:, list(members), :].mean(axis=(0, 1)))
    for k in range(z):
        lo = k * base
        hi = (k + 1) * base if k < z - 1 else frames
        rows.append(nodes[lo:hi].mean(axis=(0, 1)))
    return np.stack(rows, axis=0)


def fuse_rows(
    fmap: VisualFeatureMap,
    queries: np.ndarray,
    params: AlignmentParams,
    fusion: FusionSpec,
) -> np.ndarray:
    """Per-granularity projected rows under the configured fusion mode."""
    if fusion.mode == "static":
        return project_rows(static_fuse(fmap, fusion.partition), params)
    return attention_fuse(queries, fmap, params).projected


def project_sample(
    fmap: VisualFeatureMap,
    anchors: SemanticAnchorSet,
    params: AlignmentParams,
    fusion: FusionSpec = FusionSpec(),
) -> np.ndarray:
    """Inference-path global embedding of one sample.

    Adaptive queries are the class-agnostic per-granularity means of the
    (possibly refined) anchor tensor, so one embedding serves all classes.
    """
    rows = fuse_rows(fmap, anchors.mean_queries(), params, fusion)
    return rows[0]


# ---------------------------------------------------------------------------
# losses


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def contrastive_loss(
    projected: np.ndarray,
    class_id: int,
    granularity: int,
    anchors: SemanticAnchorSet,
    batch: list[tuple[np.ndarray, int]],
    split: ClassSplit,
    tau: float,
) -> float:
    """Symmetric contrastive loss of one projected row against its anchor.

    Negatives are the other seen-class anchors at the same granularity and
    the other batch members' projected rows; both denominators include the
    positive pair.
    """
    if class_id not in split.seen:
        raise ValueError(f"class {class_id} not in the seen split")
    if not batch:
        raise ValueError("empty batch")
    if not any(w_cid == class_id and np.array_equal(w_vec, projected) for w_vec, w_cid in batch):
        raise ValueError("batch must include the sample itself")
    seen_sorted = sorted(split.seen)
    f_pos = anchors.values[anchors.class_index(class_id), granularity]
    pos = _cosine(projected, f_pos) / tau
    class_logits = np.array([
        _cosine(projected, anchors.values[anchors.class_index(o), granularity])
        for o in seen_sorted
    ]) / tau
    batch_logits = np.array([_cosine(w_vec, f_pos) for w_vec, _ in batch]) / tau
    lse1 = _logsumexp(class_logits)
    lse2 = _logsumexp(batch_logits)
    return 0.5 * (lse1 - pos) + 0.5 * (lse2 - pos)


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def total_loss(
    sample: VisualFeatureMap,
    anchors: SemanticAnchorSet,
    params: AlignmentParams,
    batch: list[VisualFeatureMap],
    split: ClassSplit,
    fusion: FusionSpec = FusionSpec(),
) -> float:
    """Granularity-weighted contrastive loss of one sample within a batch."""
    queries = anchors.mean_queries()
    projected = {
        w.sample_id: fuse_rows(w, queries, params, fusion) for w in batch
    }
    if sample.sample_id not in projected:
        raise ValueError("batch must include the sample itself")
    alpha = params.alpha()
    gr = anchors.num_granularities
    loss = 0.0
    for i in range(gr):
        batch_i = [(projected[w.sample_id][i], w.class_id) for w in batch]
        loss += alpha[i] * contrastive_loss(
            projected[sample.sample_id][i], sample.class_id, i,
            anchors, batch_i, split, params.tau,
        )
    return loss


# ---------------------------------------------------------------------------
# training graph and exact gradients


def _graph_projected(
    gvals: np.ndarray,
    queries: np.ndarray | ad.Var,
    pv: dict[str, ad.Var],
    fusion: FusionSpec,
    fmap: VisualFeatureMap | None = None,
) -> ad.Var:
    """(Gr, d) unit-norm projected rows as autodiff nodes."""
    if fusion.mode == "static":
        fused = ad.lift(static_fuse(fmap, fusion.partition))
    else:
        h = pv["w_q"].value.shape[1]
        q = ad.matmul(queries, pv["w_q"])
        k = ad.matmul(gvals, pv["w_k"])
        logits = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(h))
        attn = ad.softmax(logits, axis=-1)
        fused = ad.matmul(attn, gvals)
    hidden = ad.relu(ad.add(ad.matmul(fused, pv["mlp_w1"]), pv["mlp_b1"]))
    out = ad.add(ad.matmul(hidden, pv["mlp_w2"]), pv["mlp_b2"])
    return ad.l2_normalize(out, axis=-1)


def _build_training_loss(
    batch: list[VisualFeatureMap],
    anchors: SemanticAnchorSet,
    params: AlignmentParams,
    split: ClassSplit,
    fusion: FusionSpec,
) -> tuple[ad.Var, dict[str, ad.Var]]:
    if not batch:
        raise ValueError("empty batch")
    for w in batch:
        if w.class_id not in split.seen:
            raise ValueError(f"sample {w.sample_id} has non-seen class {w.class_id}")
    pv = {k: ad.Var(v) for k, v in params.trainables().items()}
    gr = anchors.num_granularities
    tau = params.tau
    seen_sorted = sorted(split.seen)
    seen_anchor = anchors.values[[anchors.class_index(o) for o in seen_sorted]]  # (Cs,Gr,d)
    target_anchor = np.stack([anchors.for_class(w.class_id) for w in batch])     # (B,Gr,d)

    # class-agnostic queries: identical pooling at training and inference,
    # which is what lets validation scores track the deployed classifier
    queries = anchors.mean_queries()
    projected = [
        _graph_projected(w.values, queries, pv, fusion, w) for w in batch
    ]
    per_gran = []
    for i in range(gr):
        v_i = ad.vstack([ad.index(p, i) for p in projected])          # (B, d)
        class_logits = ad.mul(ad.matmul(v_i, seen_anchor[:, i, :].T), 1.0 / tau)
        batch_logits = ad.mul(ad.matmul(v_i, target_anchor[:, i, :].T), 1.0 / tau)
        pos = ad.take_diag(batch_logits)
        lse_class = ad.logsumexp(class_logits, axis=1)
        lse_batch = ad.logsumexp(batch_logits, axis=0)
        per_gran.append(ad.add(ad.mul(ad.sub(lse_class, pos), 0.5),
                               ad.mul(ad.sub(lse_batch, pos), 0.5)))
    losses = ad.vstack(per_gran)                                       # (Gr, B)
    sp = ad.softplus(pv["alpha_raw"])
    alpha = ad.div(sp, ad.vsum(sp))
    weighted = ad.vsum(ad.mul(losses, ad.reshape(alpha, (gr, 1))), axis=0)
    return ad.vmean(weighted), pv


def batch_loss_value(
    batch: list[VisualFeatureMap],
    anchors: SemanticAnchorSet,
    params: AlignmentParams,
    split: ClassSplit,
    fusion: FusionSpec = FusionSpec(),
) -> float:
    """Mean granularity-weighted loss over a batch (forward only)."""
    loss, _ = _build_training_loss(batch, anchors, params, split, fusion)
    return float(loss.value)


def compute_gradients(
    batch: list[VisualFeatureMap],
    anchors: SemanticAnchorSet,
    params: AlignmentParams,
    split: ClassSplit,
    fusion: FusionSpec = FusionSpec(),
) -> tuple[float, GradientSet]:
    """Exact gradients of the mean batch loss for every trainable tensor."""
    loss, pv = _build_training_loss(batch, anchors, params, split, fusion)
    ad.backward(loss)
    grads = {
        k: (v.grad if v.grad is not None else np.zeros_like(v.value))
        for k, v in pv.items()
    }
    return float(loss.value), GradientSet(**grads)


# ---------------------------------------------------------------------------
# optimizer and training loop


class AdamState:
    """Per-tensor Adam moments; steps mutate the parameter arrays in place."""

    def __init__(self, shapes: dict[str, tuple[int, ...]]):
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        for k, p in tensors.items():
            g = grads[k]
            self.m[k] = ADAM_BETA1 * self.m[k] + (1 - ADAM_BETA1) * g
            self.v[k] = ADAM_BETA2 * self.v[k] + (1 - ADAM_BETA2) * g * g
            mhat = self.m[k] / (1 - ADAM_BETA1 ** self.t)
            vhat = self.v[k] / (1 - ADAM_BETA2 ** self.t)
            p -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 300
    patience: int = 20
    val_fraction: float = 0.1
    seed: int = 0
    hidden_attention: int = 150
    hidden_mlp: int = 512
    tau: float = 0.07
    fusion: FusionSpec = field(default_factory=FusionSpec)


@dataclass
class TrainResult:
    params: AlignmentParams
    best_val_accuracy: float
    epochs_run: int
    val_history: list[float]
    anchors: SemanticAnchorSet


def seen_accuracy(
    samples: list[VisualFeatureMap],
    anchors: SemanticAnchorSet,
    params: AlignmentParams,
    candidates: list[int],
    fusion: FusionSpec,
) -> float:
    """Top-1 accuracy classifying against the global anchor prototypes."""
    cand = sorted(candidates)
    protos = anchors.values[[anchors.class_index(c) for c in cand], 0, :]
    hits = 0
    for s in samples:
        v = project_sample(s, anchors, params, fusion)
        sims = protos @ v
        if cand[int(np.argmax(sims))] == s.class_id:
            hits += 1
    return hits / len(samples)


def load_seen_samples(dataset: ValidatedDataset) -> list[VisualFeatureMap]:
    m = dataset.manifest
    return [
        VisualFeatureMap(dataset.features(r.sample_id), r.sample_id, r.class_id)
        for r in m.sample_records
        if r.class_id in m.split.seen
    ]


def train(dataset: ValidatedDataset, cfg: TrainConfig) -> TrainResult:
    """Fit alignment parameters on the seen classes with early stopping.

    Deterministic given cfg.seed: one named substream drives the validation
    split, the parameter init and the per-epoch shuffles.
    """
    manifest = dataset.manifest
    anchors = assemble_anchor_set(dataset.anchor_tensor(), manifest)
    if cfg.fusion.mode == "global":
        anchors = anchors.global_only()
    split = manifest.split
    samples = load_seen_samples(dataset)
    if not samples:
        raise ValueError("no seen-class samples to train on")

    rng = rng_for(cfg.seed, "train")
    order = rng.permutation(len(samples))
    n_val = int(round(cfg.val_fraction * len(samples)))
    n_val = min(max(n_val, 0), len(samples) - 1)
    val = [samples[i] for i in order[:n_val]]
    train_set = [samples[i] for i in order[n_val:]]
    if not val:
        val = train_set

    dims = manifest.dims
    params = init_alignment_params(
        d=dims["d"], n=dims["n"], gr=anchors.num_granularities,
        hidden_attention=cfg.hidden_attention, hidden_mlp=cfg.hidden_mlp,
        tau=cfg.tau, rng=rng,
    )
    opt = AdamState({k: v.shape for k, v in params.trainables().items()})
    seen_sorted = sorted(split.seen)
    batch_size = min(cfg.batch_size, len(train_set))

    best = -1.0
    best_params = params.copy()
    bad_epochs = 0
    history: list[float] = []
    epochs_run = 0
    for epoch in range(cfg.max_epochs):
        epochs_run = epoch + 1
        perm = rng.permutation(len(train_set))
        for b_idx, start in enumerate(range(0, len(train_set), batch_size)):
            batch = [train_set[i] for i in perm[start:start + batch_size]]
            loss, grads = compute_gradients(batch, anchors, params, split, cfg.fusion)
            if not np.isfinite(loss):
                raise ValueError(f"non-finite loss at epoch {epoch}, batch {b_idx}")
            opt.step(params.trainables(), grads.as_dict(), cfg.lr)
        acc = seen_accuracy(val, anchors, params, seen_sorted, cfg.fusion)
        history.append(acc)
        if acc >= best:
            # ties refresh the snapshot (a later, more-settled optimum) but
            # only strict improvement resets the patience counter
            best_params = params.copy()
        if acc > best:
            best = acc
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
    return TrainResult(best_params, best, epochs_run, history, anchors)


# ---------------------------------------------------------------------------
# parameter serialization (DPT1 tensors + JSON manifest)

_PARAM_FILES = {
    "w_q": "w_q.dpt", "w_k": "w_k.dpt",
    "mlp_w1": "mlp_w1.dpt", "mlp_b1": "mlp_b1.dpt",
    "mlp_w2": "mlp_w2.dpt", "mlp_b2": "mlp_b2.dpt",
    "alpha_raw": "alpha_raw.dpt",
}


def fusion_to_json(fusion: FusionSpec) -> dict:
    doc: dict = {"mode": fusion.mode}
    if fusion.partition is not None:
        doc["partition"] = {
            "joints": fusion.partition.joints,
            "groups": [[label, list(members)] for label, members in fusion.partition.groups],
            "phases": fusion.partition.phases,
        }
    return doc


def fusion_from_json(doc: dict) -> FusionSpec:
    part = None
    if doc.get("partition"):
        pd = doc["partition"]
        part = StaticPartition(
            joints=int(pd["joints"]),
            groups=tuple((str(l), tuple(int(j) for j in g)) for l, g in pd["groups"]),
            phases=int(pd["phases"]),
        )
    return FusionSpec(mode=doc.get("mode", "adaptive"), partition=part)


def save_alignment_params(params: AlignmentParams, out_dir: str | Path,
                          fusion: FusionSpec = FusionSpec()) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for key, fname in _PARAM_FILES.items():
        save_tensor(getattr(params, key), out / fname)
    doc = {
        "tau": params.tau,
        "tensors": dict(_PARAM_FILES),
        "fusion": fusion_to_json(fusion),
    }
    path = out / "params.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_alignment_params(params_dir: str | Path) -> tuple[AlignmentParams, FusionSpec]:
    d = Path(params_dir)
    doc = json.loads((d / "params.json").read_text())
    tensors = {k: np.array(load_tensor(d / f), dtype=np.float64) for k, f in doc["tensors"].items()}
    params = AlignmentParams(tau=float(doc["tau"]), **tensors)
    return params, fusion_from_json(doc.get("fusion", {}))
