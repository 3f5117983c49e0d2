"""Run the full fusion x adaptation x protocol grid on a small benchmark.

    python demos/05_ablation_grid.py
"""

import dataclasses
import tempfile
from pathlib import Path

from skelzsl import SynthConfig, TrainConfig, load_manifest, synth_generate, validate_dataset
from skelzsl.ablation import AblationConfig, rows_to_csv, run_ablation_suite
from skelzsl.alignment import contiguous_partition
from skelzsl.gzsl import GateConfig
from skelzsl.refinement import StreamConfig

workdir = Path(tempfile.mkdtemp(prefix="skelzsl_demo_"))
cfg = SynthConfig(classes=8, unseen_classes=2, shift_angle=0.85,
                  feature_noise=0.05, seed=0)
paths = synth_generate(cfg, workdir)

acfg = AblationConfig(
    train=TrainConfig(lr=3e-3, batch_size=16, max_epochs=80, patience=80,
                      hidden_attention=32, hidden_mlp=64, tau=0.3,
                      val_fraction=0.15),
    stream=StreamConfig(adapt_lr=0.1, adapt_batch_size=8,
                        conf_threshold=0.65, b_min=16),
    gate=GateConfig(),
    partition=contiguous_partition(cfg.joints, cfg.parts, cfg.phases),
    seed=0,
)
rows = run_ablation_suite(
    validate_dataset(load_manifest(paths.train_manifest)),
    validate_dataset(load_manifest(paths.val_manifest)),
    validate_dataset(load_manifest(paths.test_manifest)),
    acfg,
)
print(rows_to_csv(rows))
print("rows:", len(rows), "(3 fusion strategies x 3 adaptation modes x 2 protocols)")
