import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelzsl.anchors import assemble_anchor_set, build_prompt, granularity_view
from skelzsl.tensor_io import ClassRecord, ClassSplit, DatasetManifest


def make_manifest(c=3, gr_labels=("global", "bp_1", "bp_2", "ti_1"), d=5):
    return DatasetManifest(
        class_records=tuple(
            ClassRecord(i, f"class{i}", tuple(f"c{i} {l}" for l in gr_labels))
            for i in range(c)
        ),
        split=ClassSplit(frozenset({0}), frozenset(range(1, c))),
        granularity_labels=tuple(gr_labels),
        anchor_file="anchors.dpt",
        sample_records=(),
        dims={"C": c, "Gr": len(gr_labels), "d": d, "S": 4, "n": 3},
        root=None,
    )


def test_prompt_template():
    assert build_prompt("Raise arm.") == "a video of Raise arm."


def test_prompt_trims_whitespace():
    assert build_prompt("  swing arm  ") == "a video of swing arm"


def test_prompt_rejects_empty():
    with pytest.raises(ValueError, match="empty description"):
        build_prompt("   ")


def test_assemble_normalizes_rows():
    m = make_manifest()
    rng = np.random.default_rng(0)
    raw = rng.normal(size=(3, 4, 5)) * 3.0
    a = assemble_anchor_set(raw, m)
    norms = np.linalg.norm(a.values, axis=-1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)


def test_assemble_three_four_five():
    m = make_manifest()
    raw = np.ones((3, 4, 5))
    raw[0, 0] = [3.0, 4.0, 0.0, 0.0, 0.0]
    a = assemble_anchor_set(raw, m)
    np.testing.assert_allclose(a.values[0, 0], [0.6, 0.8, 0, 0, 0], atol=1e-12)


def test_assemble_idempotent():
    m = make_manifest()
    raw = np.random.default_rng(1).normal(size=(3, 4, 5))
    once = assemble_anchor_set(raw, m)
    twice = assemble_anchor_set(once.values, m)
    np.testing.assert_allclose(once.values, twice.values, atol=1e-7)


def test_assemble_reports_zero_row():
    m = make_manifest()
    raw = np.ones((3, 4, 5))
    raw[2, 3] = 0.0
    with pytest.raises(ValueError, match=r"class 2.*ti_1"):
        assemble_anchor_set(raw, m)


def test_assemble_rejects_shape_mismatch():
    m = make_manifest()
    with pytest.raises(ValueError, match="shape"):
        assemble_anchor_set(np.ones((3, 4, 6)), m)


def test_granularity_view_indices():
    m = make_manifest()
    raw = np.random.default_rng(2).normal(size=(3, 4, 5))
    a = assemble_anchor_set(raw, m)
    np.testing.assert_array_equal(granularity_view(a, "global"), a.values[:, 0, :])
    np.testing.assert_array_equal(granularity_view(a, "bp_2"), a.values[:, 2, :])
    with pytest.raises(KeyError, match="bp_9"):
        granularity_view(a, "bp_9")


def test_values_are_read_only():
    m = make_manifest()
    a = assemble_anchor_set(np.ones((3, 4, 5)), m)
    with pytest.raises(ValueError):
        a.values[0, 0, 0] = 2.0


def test_global_only_slice():
    m = make_manifest()
    a = assemble_anchor_set(np.random.default_rng(3).normal(size=(3, 4, 5)), m)
    g = a.global_only()
    assert g.values.shape == (3, 1, 5)
    assert g.granularity_labels == ("global",)
    np.testing.assert_array_equal(g.values[:, 0, :], a.values[:, 0, :])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_norms_within_tolerance_property(seed):
    m = make_manifest()
    raw = np.random.default_rng(seed).normal(size=(3, 4, 5))
    if (np.linalg.norm(raw, axis=-1) == 0).any():
        return
    a = assemble_anchor_set(raw, m)
    norms = np.linalg.norm(a.values, axis=-1)
    assert ((norms >= 1 - 1e-5) & (norms <= 1 + 1e-5)).all()
