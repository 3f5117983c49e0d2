"""Zero-shot skeleton-action alignment with streaming test-time refinement.

The library operates on precomputed feature tensors: multi-granularity text
anchors (C x Gr x d) and per-sample spatio-temporal node features (S x n).
It provides cross-modal attention alignment with a symmetric contrastive
objective, an online anchor-refinement loop stabilized by a class-balanced
memory bank, entropy-gated generalized zero-shot classification, and a
deterministic synthetic benchmark.
"""

from .alignment import (
    AlignmentParams,
    FusionOutput,
    FusionSpec,
    GradientSet,
    StaticPartition,
    TrainConfig,
    TrainResult,
    VisualFeatureMap,
    attention_fuse,
    compute_gradients,
    contiguous_partition,
    contrastive_loss,
    init_alignment_params,
    load_alignment_params,
    save_alignment_params,
    static_fuse,
    total_loss,
    train,
)
from .anchors import (
    SemanticAnchorSet,
    assemble_anchor_set,
    build_prompt,
    granularity_view,
)
from .gzsl import GateConfig, calibrate_delta, entropy, triage_and_classify
from .metrics import (
    MetricsReport,
    build_report,
    classwise_delta,
    confusion_matrix,
    gzsl_metrics,
    top1_accuracy,
)
from .refinement import (
    BankEntry,
    MemoryBank,
    Prediction,
    RefinementState,
    ScheduleConfig,
    StreamConfig,
    StreamResult,
    adapt_step,
    init_refinement_state,
    predict,
    refine_anchors,
    run_stream,
)
from .synth import SynthConfig, synth_generate, synth_presets
from .tensor_io import (
    ClassSplit,
    DatasetManifest,
    ManifestError,
    TensorFormatError,
    ValidatedDataset,
    load_manifest,
    load_tensor,
    save_tensor,
    validate_dataset,
)

__version__ = "0.1.0"
