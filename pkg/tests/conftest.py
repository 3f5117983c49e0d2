import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from skelzsl.alignment import VisualFeatureMap, init_alignment_params
from skelzsl.anchors import SemanticAnchorSet


def random_anchor_set(rng, c, gr, d, class_ids=None):
    raw = rng.normal(size=(c, gr, d))
    values = raw / np.linalg.norm(raw, axis=-1, keepdims=True)
    values.setflags(write=False)
    labels = ["global"] + [f"bp_{i}" for i in range(1, gr)]
    return SemanticAnchorSet(
        values=values,
        class_ids=tuple(class_ids) if class_ids is not None else tuple(range(c)),
        granularity_labels=tuple(labels[:gr]),
    )


def random_instance(rng, c=4, gr=3, d=6, n=5, h=4, s=7, hidden=5, tau=1.0, batch=3):
    """Small random problem instance shared by oracle and gradient tests."""
    anchors = random_anchor_set(rng, c, gr, d)
    params = init_alignment_params(
        d=d, n=n, gr=gr, hidden_attention=h, hidden_mlp=hidden, tau=tau, rng=rng
    )
    params.alpha_raw[:] = rng.normal(scale=0.5, size=gr)
    samples = [
        VisualFeatureMap(rng.normal(size=(s, n)), f"s{i}", int(rng.integers(0, max(1, c - 1))))
        for i in range(batch)
    ]
    return anchors, params, samples


@pytest.fixture
def rng():
    return np.random.default_rng(0)
