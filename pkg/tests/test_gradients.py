import numpy as np
import pytest

from conftest import random_anchor_set, random_instance
from skelzsl.alignment import (
    FusionSpec,
    attention_fuse,
    batch_loss_value,
    compute_gradients,
)
from skelzsl.anchors import SemanticAnchorSet
from skelzsl.refinement import (
    BankEntry,
    RefinementState,
    ScheduleConfig,
    adapt_step,
    adaptation_loss_value,
    init_refinement_state,
)
from skelzsl.tensor_io import ClassSplit

EPS = 1e-4
REL_TOL = 1e-4


def relative_errors(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return np.abs(analytic - numeric) / denom


def assert_grads_close(analytic, numeric, label):
    rel = relative_errors(analytic, numeric)
    tolerable = (rel < REL_TOL) | (np.abs(analytic - numeric) < 1e-7)
    assert tolerable.all(), (
        f"{label}: worst rel err {rel.max():.2e} at {np.unravel_index(rel.argmax(), rel.shape)}"
    )


def relu_margin_ok(params, anchors, samples, margin):
    """Finite differences are only a valid oracle away from relu kinks."""
    queries = anchors.mean_queries()
    for s in samples:
        fo = attention_fuse(queries, s, params)
        pre = fo.fused @ params.mlp_w1 + params.mlp_b1
        if np.abs(pre).min() < margin:
            return False
    return True


def draw_clean_instance(seed, **kw):
    """Random instance redrawn until every relu pre-activation clears a margin."""
    for attempt in range(50):
        rng = np.random.default_rng([seed, attempt])
        anchors, params, samples = random_instance(rng, **kw)
        scale = 1.0 + float(np.abs(samples[0].values).max())
        if relu_margin_ok(params, anchors, samples, margin=20 * EPS * scale):
            return anchors, params, samples
    raise AssertionError("could not find a kink-free instance")


def finite_diff_training(batch, anchors, params, split, fusion=FusionSpec()):
    grads = {}
    for name, arr in params.trainables().items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + EPS
            lp = batch_loss_value(batch, anchors, params, split, fusion)
            arr[idx] = orig - EPS
            lm = batch_loss_value(batch, anchors, params, split, fusion)
            arr[idx] = orig
            g[idx] = (lp - lm) / (2 * EPS)
        grads[name] = g
    return grads


@pytest.mark.parametrize("seed", range(6))
def test_training_gradients_match_finite_differences(seed):
    anchors, params, samples = draw_clean_instance(seed)
    split = ClassSplit(frozenset(range(4)), frozenset())
    _, grads = compute_gradients(samples, anchors, params, split)
    numeric = finite_diff_training(samples, anchors, params, split)
    for name, num in numeric.items():
        assert_grads_close(getattr(grads, name), num, name)


def test_gradient_zero_for_identical_anchors_singleton_batch():
    # with every anchor identical, the class-negative term is constant and a
    # singleton batch makes the in-batch term vanish, so the loss cannot
    # depend on any parameter
    rng = np.random.default_rng(3)
    vec = rng.normal(size=6)
    vec /= np.linalg.norm(vec)
    values = np.tile(vec, (4, 3, 1))
    values.setflags(write=False)
    anchors = SemanticAnchorSet(values, (0, 1, 2, 3), ("global", "bp_1", "bp_2"))
    _, params, samples = random_instance(rng, c=4, gr=3, d=6)
    split = ClassSplit(frozenset(range(4)), frozenset())
    batch = samples[:1]
    _, grads = compute_gradients(batch, anchors, params, split)
    assert np.abs(grads.w_q).max() < 1e-8
    assert np.abs(grads.w_k).max() < 1e-8
    assert np.abs(grads.mlp_w1).max() < 1e-8


def test_zero_learning_rate_step_changes_nothing():
    anchors, params, samples = draw_clean_instance(99)
    split = ClassSplit(frozenset(range(4)), frozenset())
    before = {k: v.copy() for k, v in params.trainables().items()}
    loss0, grads = compute_gradients(samples, anchors, params, split)
    from skelzsl.alignment import AdamState

    opt = AdamState({k: v.shape for k, v in params.trainables().items()})
    opt.step(params.trainables(), grads.as_dict(), lr=0.0)
    for k, v in params.trainables().items():
        np.testing.assert_array_equal(v, before[k])
    assert batch_loss_value(samples, anchors, params, split) == pytest.approx(loss0)


def finite_diff_adaptation(batch, anchors, state, params, candidates):
    grads = {}
    for name in ("scale", "bias"):
        arr = getattr(state, name)
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + EPS
            lp = adaptation_loss_value(batch, anchors, state, params, candidates)
            arr[idx] = orig - EPS
            lm = adaptation_loss_value(batch, anchors, state, params, candidates)
            arr[idx] = orig
            g[idx] = (lp - lm) / (2 * EPS)
        grads[name] = g
    return grads


@pytest.mark.parametrize("seed", range(4))
def test_adaptation_gradients_match_finite_differences(seed):
    anchors, params, samples = draw_clean_instance(seed + 50, c=3, gr=2, d=5, n=4, s=5)
    state = init_refinement_state(anchors, lr=0.0, schedule=ScheduleConfig("constant"))
    rng = np.random.default_rng(seed)
    state.scale += rng.normal(scale=0.1, size=state.scale.shape)
    state.bias += rng.normal(scale=0.1, size=state.bias.shape)
    candidates = (0, 1, 2)
    batch = [BankEntry(s, int(rng.integers(0, 3)), 0.9, i) for i, s in enumerate(samples)]

    import skelzsl.autodiff as ad
    from skelzsl.refinement import _adaptation_graph

    loss, v_scale, v_bias = _adaptation_graph(batch, anchors, state, params,
                                              candidates, FusionSpec())
    ad.backward(loss)
    numeric = finite_diff_adaptation(batch, anchors, state, params, candidates)
    assert_grads_close(v_scale.grad, numeric["scale"], "scale")
    assert_grads_close(v_bias.grad, numeric["bias"], "bias")


def test_adapt_step_zero_rate_keeps_state():
    anchors, params, samples = draw_clean_instance(77, c=3, gr=2, d=5, n=4, s=5)
    state = init_refinement_state(anchors, lr=0.0, schedule=ScheduleConfig("constant"))
    batch = [BankEntry(samples[0], 0, 0.9, 0)]
    scale_before = state.scale.copy()
    bias_before = state.bias.copy()
    loss = adapt_step(batch, anchors, state, params, (0, 1, 2))
    assert np.isfinite(loss)
    np.testing.assert_array_equal(state.scale, scale_before)
    np.testing.assert_array_equal(state.bias, bias_before)
    assert state.step_count == 1
