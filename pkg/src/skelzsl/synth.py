"""Deterministic synthetic benchmark with controllable test-time shift.

Class anchors are placed on a cone around a shared direction (the opening
angle controls class separation), per-class node features are shared linear
maps of the anchors plus Gaussian noise, and unseen-class evaluation
features are rotated in a seeded 2-plane to create the train/test gap the
refinement loop is meant to close.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .seeding import rng_for
from .tensor_io import save_tensor


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 8
    unseen_classes: int = 2
    d: int = 16
    n: int = 12
    joints: int = 6
    frames: int = 4
    parts: int = 4
    phases: int = 3
    train_samples_per_class: int = 48
    val_samples_per_class: int = 8
    test_samples_per_class: int = 60
    anchor_separation: float = 1.35  # minimum pairwise anchor angle, radians
    class_jitter: float = 0.45  # per-sample latent spread inside the anchor subspace
    feature_noise: float = 0.02
    shift_angle: float = 0.0  # radians, applied to unseen eval features
    imbalance_ratio: float = 1.0  # heaviest/lightest unseen test class counts
    unseen_pair_angle: float | None = None  # target angle between unseen classes
    unseen_jitter_scale: float = 1.0  # latent spread multiplier for unseen classes
    twin_unseen: bool = False  # unseen classes share one latent direction
    unseen_offmanifold_noise: float = 0.0  # off-subspace latent noise, unseen only
    seed: int = 0

    def __post_init__(self):
        if self.unseen_classes >= self.classes:
            raise ValueError("unseen_classes must be smaller than classes")
        counts = (self.classes, self.unseen_classes, self.d, self.n, self.joints,
                  self.frames, self.parts, self.phases,
                  self.train_samples_per_class, self.val_samples_per_class,
                  self.test_samples_per_class)
        if any(c < 1 for c in counts):
            raise ValueError("all counts must be at least 1")
        if min(self.anchor_separation, self.feature_noise, self.class_jitter) < 0:
            raise ValueError("separation, noise and jitter must be nonnegative")
        if self.imbalance_ratio < 1.0:
            raise ValueError("imbalance_ratio must be >= 1")
        if self.unseen_pair_angle is not None and not 0 < self.unseen_pair_angle <= np.pi:
            raise ValueError("unseen_pair_angle must lie in (0, pi]")
        if self.unseen_jitter_scale < 0:
            raise ValueError("unseen_jitter_scale must be nonnegative")
        if self.unseen_offmanifold_noise < 0:
            raise ValueError("unseen_offmanifold_noise must be nonnegative")
        if self.parts > self.joints:
            raise ValueError("more parts than joints")
        if self.phases > self.frames:
            raise ValueError("more phases than frames")

    @property
    def s_nodes(self) -> int:
        return self.joints * self.frames

    @property
    def num_granularities(self) -> int:
        return self.parts + self.phases + 1


@dataclass(frozen=True)
class SynthPaths:
    root: Path
    train_manifest: Path
    val_manifest: Path
    test_manifest: Path


def preset_train_config(seed: int = 0):
    """Desk-scale training recipe matched to the preset benchmarks.

    The library defaults mirror a full-scale recipe (tiny learning rate,
    hundreds of samples per step); a few-hundred-sample benchmark needs a
    faster rate, smaller batches and a softer temperature to converge and
    to leave the streaming loss enough gradient to adapt with.
    """
    from .alignment import TrainConfig

    return TrainConfig(
        lr=3e-3, batch_size=16, max_epochs=160, patience=160,
        hidden_attention=32, hidden_mlp=64, tau=0.3,
        val_fraction=0.15, seed=seed,
    )


def preset_stream_config(seed: int = 0, **overrides):
    """Streaming recipe matched to the preset benchmarks."""
    from .refinement import StreamConfig

    base = dict(adapt_lr=0.05, adapt_batch_size=16, conf_threshold=0.65,
                b_min=16, seed=seed)
    base.update(overrides)
    return StreamConfig(**base)


def synth_presets() -> dict[str, SynthConfig]:
    """Named benchmark scenarios; names are a stable API."""
    easy = SynthConfig()
    shifted = SynthConfig(feature_noise=0.05, shift_angle=0.85)
    imbalanced = SynthConfig(
        feature_noise=0.05, shift_angle=0.85, imbalance_ratio=10.0,
    )
    return {"easy": easy, "shifted": shifted, "imbalanced": imbalanced}


def _orthonormal_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """Gram-Schmidt over seeded Gaussian draws; raises if dim < count."""
    if count > dim:
        raise ValueError(
            f"infeasible separation: need {count} orthogonal directions in d={dim}"
        )
    basis = np.zeros((count, dim))
    got = 0
    while got < count:
        cand = rng.normal(size=dim)
        for b in basis[:got]:
            cand -= (cand @ b) * b
        norm = np.linalg.norm(cand)
        if norm > 1e-8:
            basis[got] = cand / norm
            got += 1
    return basis


# unseen directions mix two seen parents with a weight drawn from this range
_MIX_RANGE = (0.35, 0.65)


@dataclass(frozen=True)
class _Generator:
    """Latent class geometry shared by anchors and sample features."""

    directions: np.ndarray  # (C, d) unit class directions driving the features
    anchor_directions: np.ndarray  # (C, d) directions the text anchors encode
    rotations: np.ndarray   # (Gr, d, d) orthogonal, rotations[0] = identity
    basis: np.ndarray       # (k, d) orthonormal rows of the class subspace

    def anchors(self) -> np.ndarray:
        return np.einsum("gde,ce->cgd", self.rotations, self.anchor_directions)

    def granularity_tuple(self, latent: np.ndarray) -> np.ndarray:
        """Per-granularity embedding of one latent direction: (Gr, d)."""
        return np.einsum("gde,e->gd", self.rotations, latent)


def _draw_generator(cfg: SynthConfig, rng: np.random.Generator) -> _Generator:
    """Class directions with min pairwise angle = separation.

    All directions live in a subspace spanned by no more directions than
    there are seen classes, so an alignment trained on seen data excites
    every direction an unseen anchor can point to. Placement is rejection
    sampling inside that subspace; exhausting the retry budget reports the
    separation as infeasible. Per-granularity anchors are fixed rotations
    of one per-class direction, which keeps the feature-to-anchor relation
    a single linear map across classes.
    """
    theta = cfg.anchor_separation
    gr = cfg.num_granularities
    seen = cfg.classes - cfg.unseen_classes
    k = min(cfg.d, max(2, seen))
    max_tries = 2000
    basis = _orthonormal_rows(rng, k, cfg.d)
    if theta == 0:
        z = rng.normal(size=k) @ basis
        z = z / np.linalg.norm(z)
        directions = np.tile(z, (cfg.classes, 1))
        rotations = np.zeros((gr, cfg.d, cfg.d))
        rotations[0] = np.eye(cfg.d)
        for i in range(1, gr):
            gauss = rng.normal(size=(cfg.d, cfg.d))
            q, r = np.linalg.qr(gauss)
            q *= np.sign(np.diag(r))
            rotations[i] = q
        return _Generator(directions, directions.copy(), rotations, basis)
    # Seen directions are rejection-sampled at the full separation;
    # unseen directions are positive mixtures of two seen classes
    # (inside the seen hull, at half separation), mirroring how unseen
    # actions recombine seen motion primitives.
    chosen = []
    for c in range(seen):
        for _ in range(max_tries):
            z = rng.normal(size=k) @ basis
            z /= np.linalg.norm(z)
            if all(np.arccos(np.clip(z @ prev, -1, 1)) >= theta for prev in chosen):
                chosen.append(z)
                break
        else:
            raise ValueError(
                f"infeasible separation {theta} for {cfg.classes} classes in d={cfg.d}"
            )
    # A fixed pair angle models fine-grained sibling classes (for gate
    # and balance studies): siblings sit near the hull centroid, far
    # from every individual seen anchor, and close to each other.
    # Otherwise unseen classes are two-parent mixtures spread at
    # 0.8 * separation.
    if cfg.unseen_pair_angle is not None:
        pair_lo = 0.55 * cfg.unseen_pair_angle
        pair_hi = min(1.5 * cfg.unseen_pair_angle, np.pi)
        seen_floor = 0.8 * theta
    else:
        pair_lo, pair_hi = 0.8 * theta, np.pi
        seen_floor = theta / 2
    for outer in range(40):
        unseen_dirs: list[np.ndarray] = []
        for c in range(cfg.classes - seen):
            for _ in range(max_tries):
                if cfg.unseen_pair_angle is not None and unseen_dirs:
                    # later siblings sit on a cone around the first one
                    ang = cfg.unseen_pair_angle
                    u = rng.normal(size=k) @ basis
                    u -= (u @ unseen_dirs[0]) * unseen_dirs[0]
                    u /= np.linalg.norm(u)
                    z = np.cos(ang) * unseen_dirs[0] + np.sin(ang) * u
                elif cfg.unseen_pair_angle is not None:
                    lam = rng.dirichlet(np.ones(seen))
                    z = lam @ np.stack(chosen[:seen])
                else:
                    a, b = rng.choice(seen, size=2, replace=False)
                    w = rng.uniform(*_MIX_RANGE)
                    z = w * chosen[a] + (1 - w) * chosen[b]
                z /= np.linalg.norm(z)
                seen_angles = [
                    np.arccos(np.clip(z @ prev, -1, 1)) for prev in chosen[:seen]
                ]
                pair_angles = [
                    np.arccos(np.clip(z @ prev, -1, 1)) for prev in unseen_dirs
                ]
                if all(ang >= seen_floor for ang in seen_angles) and all(
                    pair_lo <= ang <= pair_hi for ang in pair_angles
                ):
                    unseen_dirs.append(z)
                    break
            else:
                break
        if len(unseen_dirs) == cfg.classes - seen:
            chosen.extend(unseen_dirs)
            break
    else:
        raise ValueError(
            f"infeasible separation {theta} for {cfg.classes} classes in d={cfg.d}"
        )
    directions = np.stack(chosen)
    anchor_directions = directions.copy()
    if cfg.twin_unseen and theta > 0:
        # Twin unseen classes: identical feature generators, anchors split
        # by offsets orthogonal to the class subspace. No classifier score
        # computed from the features can separate the twins, so their
        # union-set probability mass must tie across the twin anchors.
        n_unseen = cfg.classes - seen
        directions[seen:] = directions[seen]
        pair = cfg.unseen_pair_angle if cfg.unseen_pair_angle is not None else 0.25
        half = np.arccos(np.sqrt(np.clip(np.cos(pair), 0.0, 1.0)))
        offsets = []
        for _ in range(n_unseen):
            q = rng.normal(size=cfg.d)
            q -= basis.T @ (basis @ q)
            for prev in offsets:
                q -= (q @ prev) * prev
            q /= np.linalg.norm(q)
            offsets.append(q)
        for j in range(n_unseen):
            anchor_directions[seen + j] = (
                np.cos(half) * directions[seen] + np.sin(half) * offsets[j]
            )
    rotations = np.zeros((gr, cfg.d, cfg.d))
    rotations[0] = np.eye(cfg.d)
    for i in range(1, gr):
        gauss = rng.normal(size=(cfg.d, cfg.d))
        q, r = np.linalg.qr(gauss)
        q *= np.sign(np.diag(r))
        rotations[i] = q
    return _Generator(directions, anchor_directions, rotations, basis)


def _plane_rotation(
    rng: np.random.Generator,
    angle: float,
    axis: np.ndarray,
    within: np.ndarray | None = None,
):
    """Rotation by `angle` in a plane holding `axis` and a random direction.

    Putting the separation axis of the unseen classes inside the plane
    guarantees the rotation tilts exactly the directions a frozen
    classifier relies on, by an amount that grows with the angle. When
    `within` (orthonormal rows) is given, the companion direction is drawn
    inside that subspace so the rotation never leaves it.
    """
    dim = axis.shape[0]
    norm = np.linalg.norm(axis)
    if norm == 0:  # collapsed anchors: no separation axis, use a random one
        axis = rng.normal(size=dim) if within is None else rng.normal(size=within.shape[0]) @ within
        norm = np.linalg.norm(axis)
    a = axis / norm
    b = rng.normal(size=dim) if within is None else rng.normal(size=within.shape[0]) @ within
    b -= (b @ a) * a
    b /= np.linalg.norm(b)

    def rotate(x: np.ndarray) -> np.ndarray:
        xa = x @ a
        xb = x @ b
        return (
            x
            + (np.cos(angle) - 1.0) * (np.outer(xa, a) + np.outer(xb, b))
            + np.sin(angle) * (np.outer(xa, b) - np.outer(xb, a))
        )

    return rotate


def _node_structure(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Granularity indices (part, phase) per node; node s = frame*J + joint."""
    part_bounds = np.linspace(0, cfg.joints, cfg.parts + 1).astype(int)
    joint_part = np.zeros(cfg.joints, dtype=int)
    for p in range(cfg.parts):
        joint_part[part_bounds[p]:part_bounds[p + 1]] = p
    base = cfg.frames // cfg.phases
    frame_phase = np.minimum(np.arange(cfg.frames) // base, cfg.phases - 1)
    node_part = np.tile(joint_part, cfg.frames)
    node_phase = np.repeat(frame_phase, cfg.joints)
    return node_part, node_phase


def _unseen_test_counts(cfg: SynthConfig) -> dict[int, int]:
    unseen = list(range(cfg.classes - cfg.unseen_classes, cfg.classes))
    if cfg.imbalance_ratio == 1.0 or len(unseen) == 1:
        return {c: cfg.test_samples_per_class for c in unseen}
    low = max(1, int(round(cfg.test_samples_per_class / cfg.imbalance_ratio)))
    counts = np.linspace(cfg.test_samples_per_class, low, len(unseen))
    return {c: int(round(k)) for c, k in zip(unseen, counts)}


def synth_generate(cfg: SynthConfig, out_dir: str | Path) -> SynthPaths:
    """Write anchors, per-sample features and the three split manifests."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "features").mkdir(exist_ok=True)
    rng = rng_for(cfg.seed, "synth")

    gr = cfg.num_granularities
    gen = _draw_generator(cfg, rng)
    anchors = gen.anchors()
    maps = rng.normal(0.0, 1.0 / np.sqrt(cfg.d), size=(gr, cfg.d, cfg.n))
    node_part, node_phase = _node_structure(cfg)
    # the shift rotates the unseen feature generators in latent space, in a
    # plane containing the separation axis of two unseen classes, so the
    # frozen classifier's evidence tilts by a controlled amount while the
    # shifted clusters stay inside the trained manifold
    unseen_ids = list(range(cfg.classes - cfg.unseen_classes, cfg.classes))
    if len(unseen_ids) >= 2:
        pick = rng.choice(len(unseen_ids), size=2, replace=False)
        axis = gen.directions[unseen_ids[pick[0]]] - gen.directions[unseen_ids[pick[1]]]
    else:
        axis = gen.directions[unseen_ids[0]]
    rotate_latent = _plane_rotation(rng, cfg.shift_angle, axis, within=gen.basis)
    latent_dim = gen.basis.shape[0]

    unseen_ids_set = set(unseen_ids)

    def sample_features(class_id: int, shifted: bool) -> np.ndarray:
        # per-sample latent spread inside the class subspace keeps the
        # feature manifold densely covered, which is what lets a trained
        # projection generalize to unseen class directions; unseen classes
        # can spread wider, modelling their larger semantic-visual gap
        jitter = cfg.class_jitter
        if class_id in unseen_ids_set:
            jitter *= cfg.unseen_jitter_scale
        latent = gen.directions[class_id] + (
            jitter / np.sqrt(latent_dim)
        ) * (rng.normal(size=latent_dim) @ gen.basis)
        if class_id in unseen_ids_set and cfg.unseen_offmanifold_noise > 0:
            # novel-action evidence partially off the seen manifold: the
            # alignment was never trained there, which is exactly the
            # uncertainty signature the entropy gate keys on
            off = rng.normal(size=cfg.d)
            off -= gen.basis.T @ (gen.basis @ off)
            denom = np.linalg.norm(off)
            if denom > 0:
                latent = latent + cfg.unseen_offmanifold_noise * off / denom
        if shifted:
            latent = rotate_latent(latent[None, :])[0]
        tuple_gd = gen.granularity_tuple(latent)  # (Gr, d)
        rows = np.tile(tuple_gd[0] @ maps[0], (cfg.s_nodes, 1))
        for s in range(cfg.s_nodes):
            rows[s] += tuple_gd[1 + node_part[s]] @ maps[1 + node_part[s]]
            rows[s] += tuple_gd[1 + cfg.parts + node_phase[s]] @ maps[
                1 + cfg.parts + node_phase[s]]
        return rows + cfg.feature_noise * rng.normal(size=(cfg.s_nodes, cfg.n))

    seen = list(range(cfg.classes - cfg.unseen_classes))
    unseen = list(range(cfg.classes - cfg.unseen_classes, cfg.classes))
    unseen_counts = _unseen_test_counts(cfg)

    samples: dict[str, list[dict]] = {"train": [], "val": [], "test": []}

    def emit(role: str, class_id: int, index: int, shifted: bool) -> None:
        sid = f"{role}_c{class_id:02d}_{index:03d}"
        feats = sample_features(class_id, shifted)
        fname = f"features/{sid}.dpt"
        save_tensor(feats, root / fname)
        samples[role].append({"id": sid, "class": class_id, "features": fname})

    for c in seen:
        for k in range(cfg.train_samples_per_class):
            emit("train", c, k, shifted=False)
    for c in seen:
        for k in range(cfg.val_samples_per_class):
            emit("val", c, k, shifted=False)
    for c in unseen:
        for k in range(cfg.val_samples_per_class):
            emit("val", c, k, shifted=cfg.shift_angle != 0.0)
    for c in seen:
        for k in range(cfg.test_samples_per_class):
            emit("test", c, k, shifted=False)
    for c in unseen:
        for k in range(unseen_counts[c]):
            emit("test", c, k, shifted=cfg.shift_angle != 0.0)

    save_tensor(anchors, root / "anchors.dpt")
    labels = (
        ["global"]
        + [f"bp_{i}" for i in range(1, cfg.parts + 1)]
        + [f"ti_{i}" for i in range(1, cfg.phases + 1)]
    )
    classes = [
        {
            "id": c,
            "name": f"action_{c:02d}",
            "descriptions": [f"synthetic action {c:02d}, {lab} motif" for lab in labels],
        }
        for c in range(cfg.classes)
    ]
    base = {
        "classes": classes,
        "split": {"seen": seen, "unseen": unseen},
        "granularities": labels,
        "anchors": "anchors.dpt",
        "dims": {"C": cfg.classes, "Gr": gr, "d": cfg.d, "S": cfg.s_nodes, "n": cfg.n},
    }
    paths = {}
    for role in ("train", "val", "test"):
        doc = dict(base)
        doc["samples"] = samples[role]
        path = root / f"manifest_{role}.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        paths[role] = path
    (root / "synth_config.json").write_text(
        json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n"
    )
    return SynthPaths(root, paths["train"], paths["val"], paths["test"])
