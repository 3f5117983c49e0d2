"""Command-line surface: synth / train / run / ablate / inspect.

Every command is deterministic given (config, seed). Exit codes: 0 success,
2 usage, 3 unsafe overwrite, 4 protocol violation, 5 data corruption,
1 anything else.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .ablation import AblationConfig, default_partition, load_stream_samples, rows_to_csv, run_ablation_suite
from .alignment import (
    FusionSpec,
    StaticPartition,
    TrainConfig,
    contiguous_partition,
    load_alignment_params,
    save_alignment_params,
    train,
)
from .anchors import assemble_anchor_set
from .gzsl import GateConfig, calibrate_delta
from .metrics import build_report
from .refinement import StreamConfig, run_stream
from .synth import SynthConfig, synth_generate, synth_presets
from .tensor_io import (
    ManifestError,
    TensorFormatError,
    load_manifest,
    load_tensor,
    validate_dataset,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_OVERWRITE = 3
EXIT_PROTOCOL = 4
EXIT_CORRUPT = 5

CONFIG_SECTIONS = {"seed", "out", "train", "stream", "gate", "synth", "paths"}


class UsageError(ValueError):
    pass


class OverwriteError(RuntimeError):
    pass


class ProtocolError(ValueError):
    pass


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(doc) - CONFIG_SECTIONS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return doc


def _section(cfg: dict, name: str, allowed: set[str]) -> dict:
    sec = cfg.get(name, {})
    unknown = set(sec) - allowed
    if unknown:
        raise UsageError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    return dict(sec)


def _ensure_out_dir(out: str, force: bool) -> Path:
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not force:
        raise OverwriteError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


TRAIN_KEYS = {
    "lr", "batch_size", "max_epochs", "patience", "val_fraction",
    "hidden_attention", "hidden_mlp", "tau", "partition_mode", "partition",
}
STREAM_KEYS = {
    "tta", "conf_threshold", "bank_capacity", "b_min", "adapt_lr", "schedule",
    "adapt_batch_size", "optimizer", "steps_per_sample", "insert_policy",
}
GATE_KEYS = {"delta", "grid", "quantile_count"}
SYNTH_KEYS = {f.name for f in dataclasses.fields(SynthConfig)} | {"preset"}
PATH_KEYS = {"data", "params", "val_data", "train_data", "test_data", "joints"}


def _partition_from(doc: dict | None) -> StaticPartition | None:
    if not doc:
        return None
    if "groups" in doc:
        groups = tuple((str(l), tuple(int(j) for j in g)) for l, g in doc["groups"])
        return StaticPartition(int(doc["joints"]), groups, int(doc["phases"]))
    return contiguous_partition(int(doc["joints"]), int(doc["parts"]), int(doc["phases"]))


def _build_train_config(cfg: dict, args) -> TrainConfig:
    sec = _section(cfg, "train", TRAIN_KEYS)
    mode = getattr(args, "partition", None) or sec.get("partition_mode", "adaptive")
    partition = _partition_from(sec.get("partition"))
    if mode == "static" and partition is None:
        raise UsageError("static partition mode requires train.partition in the config")
    fusion = FusionSpec(mode=mode, partition=partition if mode == "static" else None)
    tc = TrainConfig(fusion=fusion, seed=_seed_of(cfg, args))
    for key in ("lr", "batch_size", "max_epochs", "patience", "val_fraction",
                "hidden_attention", "hidden_mlp", "tau"):
        if key in sec:
            setattr(tc, key, type(getattr(tc, key))(sec[key]))
    if getattr(args, "max_epochs", None) is not None:
        tc.max_epochs = args.max_epochs
    if getattr(args, "lr", None) is not None:
        tc.lr = args.lr
    return tc


def _build_stream_config(cfg: dict, args) -> StreamConfig:
    sec = _section(cfg, "stream", STREAM_KEYS)
    sc = StreamConfig(seed=_seed_of(cfg, args))
    for key in STREAM_KEYS:
        if key in sec:
            setattr(sc, key, sec[key])
    if getattr(args, "tta", None) is not None:
        sc.tta = args.tta
    if getattr(args, "conf_threshold", None) is not None:
        sc.conf_threshold = args.conf_threshold
    if getattr(args, "bank_capacity", None) is not None:
        sc.bank_capacity = args.bank_capacity
    if getattr(args, "bmin", None) is not None:
        sc.b_min = args.bmin
    sc.__post_init__()
    return sc


def _seed_of(cfg: dict, args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(cfg.get("seed", 0))


def _effective(obj) -> dict:
    if dataclasses.is_dataclass(obj):
        return {
            k: _effective(v) for k, v in dataclasses.asdict(obj).items()
        }
    if isinstance(obj, dict):
        return {str(k): _effective(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_effective(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    sec = _section(cfg, "synth", SYNTH_KEYS)
    preset = args.preset or sec.pop("preset", None)
    if preset is not None:
        presets = synth_presets()
        if preset not in presets:
            raise UsageError(f"unknown preset {preset!r}; choose from {sorted(presets)}")
        base = dataclasses.asdict(presets[preset])
    else:
        base = dataclasses.asdict(SynthConfig())
    base.update(sec)
    base["seed"] = _seed_of(cfg, args)
    scfg = SynthConfig(**base)
    out = _ensure_out_dir(args.out, args.force)
    paths = synth_generate(scfg, out)
    print(paths.train_manifest)
    print(paths.val_manifest)
    print(paths.test_manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    tcfg = _build_train_config(cfg, args)
    dataset = validate_dataset(load_manifest(args.data))
    out = _ensure_out_dir(args.out, args.force)
    result = train(dataset, tcfg)
    save_alignment_params(result.params, out, tcfg.fusion)
    _write_json(out / "train_report.json", {
        "best_val_accuracy": round(result.best_val_accuracy, 4),
        "epochs_run": result.epochs_run,
        "effective_config": _effective(tcfg),
    })
    print(f"validation top-1: {result.best_val_accuracy:.4f}")
    return EXIT_OK


def _predictions_csv(records) -> str:
    lines = ["sample_id,true_class,predicted_class,confidence,entropy"]
    for r in records:
        lines.append(
            f"{r.sample_id},{r.true_class},{r.predicted_class},{r.confidence!r},{r.entropy!r}"
        )
    return "\n".join(lines) + "\n"


def _features_csv(records) -> str:
    if not records:
        return "sample_id,true_class,predicted_class\n"
    dim = len(records[0].feature)
    header = "sample_id,true_class,predicted_class," + ",".join(
        f"f{i}" for i in range(dim)
    )
    lines = [header]
    for r in records:
        vals = ",".join(repr(float(x)) for x in r.feature)
        lines.append(f"{r.sample_id},{r.true_class},{r.predicted_class},{vals}")
    return "\n".join(lines) + "\n"


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    scfg = _build_stream_config(cfg, args)
    scfg.protocol = args.protocol
    paths_sec = _section(cfg, "paths", PATH_KEYS)
    data = args.data or paths_sec.get("data")
    params_dir = args.params or paths_sec.get("params")
    if not data or not params_dir:
        raise UsageError("run requires --data and --params")
    dataset = validate_dataset(load_manifest(data))
    manifest = dataset.manifest
    split = manifest.split
    if args.protocol == "gzsl" and (not split.seen or not split.unseen):
        raise ProtocolError("gzsl requires nonempty seen and unseen splits")

    params, fusion = load_alignment_params(params_dir)
    anchors = assemble_anchor_set(dataset.anchor_tensor(), manifest)
    if fusion.mode == "global":
        anchors = anchors.global_only()

    out = _ensure_out_dir(args.out, args.force)
    gate_sec = _section(cfg, "gate", GATE_KEYS)
    calibration_rows = None
    if args.protocol == "gzsl":
        if args.delta is not None:
            scfg.delta = args.delta
        elif gate_sec.get("delta") is not None:
            scfg.delta = float(gate_sec["delta"])
        else:
            val_path = args.val_data or paths_sec.get("val_data")
            if not val_path:
                raise UsageError("gzsl needs --delta or a validation manifest (--val-data)")
            val_ds = validate_dataset(load_manifest(val_path))
            val_stream = load_stream_samples(val_ds, "gzsl")
            gcfg = GateConfig(
                grid=tuple(gate_sec["grid"]) if gate_sec.get("grid") else None,
                quantile_count=int(gate_sec.get("quantile_count", 33)),
            )
            scfg.delta, calibration_rows = calibrate_delta(
                val_stream, anchors, params, split, gcfg, fusion
            )

    stream = load_stream_samples(dataset, args.protocol)
    result = run_stream(stream, anchors, params, split, scfg, fusion)
    preds = [r.predicted_class for r in result.records]
    labels = [r.true_class for r in result.records]
    order = sorted(split.unseen if args.protocol == "zsl" else split.all_classes())
    report = build_report(preds, labels, order, split if args.protocol == "gzsl" else None)

    (out / "predictions.csv").write_text(_predictions_csv(result.records))
    (out / "features.csv").write_text(_features_csv(result.records))
    if calibration_rows is not None:
        lines = ["delta,S,U,H"]
        for row in calibration_rows:
            lines.append(
                f"{row.delta!r},{row.seen_acc!r},{row.unseen_acc!r},{row.harmonic!r}"
            )
        (out / "calibration.csv").write_text("\n".join(lines) + "\n")
    _write_json(out / "report.json", {
        "protocol": args.protocol,
        "metrics": report.to_json_dict(),
        "bank_sizes": {str(k): v for k, v in result.bank_sizes.items()},
        "adapt_steps": len(result.adapt_losses),
        "delta": scfg.delta,
        "effective_config": _effective(scfg),
    })
    print(f"top-1: {report.top1:.4f}")
    if report.harmonic is not None:
        print(f"S={report.seen_acc:.4f} U={report.unseen_acc:.4f} H={report.harmonic:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    paths_sec = _section(cfg, "paths", PATH_KEYS)
    train_path = args.train_data or paths_sec.get("train_data")
    val_path = args.val_data or paths_sec.get("val_data")
    test_path = args.test_data or paths_sec.get("test_data")
    if not (train_path and val_path and test_path):
        raise UsageError("ablate requires --train-data, --val-data and --test-data")
    train_ds = validate_dataset(load_manifest(train_path))
    val_ds = validate_dataset(load_manifest(val_path))
    test_ds = validate_dataset(load_manifest(test_path))

    tcfg = _build_train_config(cfg, args)
    scfg = _build_stream_config(cfg, args)
    gate_sec = _section(cfg, "gate", GATE_KEYS)
    gcfg = GateConfig(
        delta=args.delta if args.delta is not None else gate_sec.get("delta"),
        grid=tuple(gate_sec["grid"]) if gate_sec.get("grid") else None,
        quantile_count=int(gate_sec.get("quantile_count", 33)),
    )
    joints = args.joints or paths_sec.get("joints")
    if joints is None:
        sidecar = Path(train_path).parent / "synth_config.json"
        if sidecar.exists():
            joints = json.loads(sidecar.read_text())["joints"]
    if joints is None:
        raise UsageError("ablate needs --joints (or a synth_config.json sidecar)")
    partition = default_partition(train_ds, int(joints))

    acfg = AblationConfig(
        train=tcfg, stream=scfg, gate=gcfg, partition=partition,
        seed=_seed_of(cfg, args),
    )
    out = _ensure_out_dir(args.out, args.force)
    rows = run_ablation_suite(train_ds, val_ds, test_ds, acfg)
    (out / "ablation.csv").write_text(rows_to_csv(rows))
    _write_json(out / "ablation_config.json", {"effective_config": _effective(acfg)})
    print(out / "ablation.csv")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    head = path.read_bytes()[:4]
    if head == b"DPT1":
        arr = load_tensor(path)
        shape = "x".join(str(e) for e in arr.shape)
        print(
            f"dpt1 {arr.dtype.name} shape={shape} "
            f"min={arr.min():.6g} max={arr.max():.6g} mean={arr.mean():.6g}"
        )
        return EXIT_OK
    try:
        manifest = load_manifest(path)
    except ManifestError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError):
        raise TensorFormatError("bad magic") from None
    print(
        f"manifest classes={len(manifest.class_records)} "
        f"seen={len(manifest.split.seen)} unseen={len(manifest.split.unseen)} "
        f"granularities={len(manifest.granularity_labels)} "
        f"samples={len(manifest.sample_records)}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skelzsl",
        description="Zero-shot alignment and streaming refinement over feature tensors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file (flags take precedence)")
        p.add_argument("--seed", type=int, default=None, help="experiment seed (default 0)")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")

    p = sub.add_parser("synth", help="generate a synthetic benchmark tree")
    add_common(p)
    p.add_argument("--preset", help="named scenario: easy | shifted | imbalanced")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit alignment parameters on the seen classes")
    add_common(p)
    p.add_argument("--data", required=True, help="training manifest JSON")
    p.add_argument("--out", required=True, help="directory for trained parameters")
    p.add_argument("--partition", choices=["global", "static", "adaptive"],
                   help="fusion strategy (default adaptive)")
    p.add_argument("--max-epochs", type=int, default=None, help="epoch cap (default 300)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 1e-4)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="stream a dataset through the classifier")
    add_common(p)
    p.add_argument("--data", help="evaluation manifest JSON")
    p.add_argument("--params", help="trained parameter directory")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--protocol", choices=["zsl", "gzsl"], default="zsl",
                   help="candidate-set policy (default zsl)")
    p.add_argument("--tta", choices=["off", "nobank", "full"], default=None,
                   help="adaptation mode (default full)")
    p.add_argument("--conf-threshold", type=float, default=None,
                   help="pseudo-label confidence gate (default 0.1)")
    p.add_argument("--bank-capacity", type=int, default=None,
                   help="memory bank per-class capacity (default 16)")
    p.add_argument("--bmin", type=int, default=None,
                   help="bank size needed before adapting (default max(|candidates|, 8))")
    p.add_argument("--delta", type=float, default=None,
                   help="entropy gate threshold for gzsl (default: calibrated)")
    p.add_argument("--val-data", help="validation manifest for gate calibration")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run the fusion x adaptation x protocol grid")
    add_common(p)
    p.add_argument("--train-data", help="training manifest JSON")
    p.add_argument("--val-data", help="validation manifest JSON")
    p.add_argument("--test-data", help="evaluation manifest JSON")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--delta", type=float, default=None,
                   help="entropy gate threshold (default: calibrated)")
    p.add_argument("--joints", type=int, default=None,
                   help="joint count for the static partition")
    p.add_argument("--max-epochs", type=int, default=None, help="epoch cap (default 300)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 1e-4)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="summarize a tensor file or manifest")
    p.add_argument("path", help="DPT1 tensor or manifest JSON")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OverwriteError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_OVERWRITE
    except ProtocolError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (TensorFormatError, ManifestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except Exception as e:  # noqa: BLE001 - uniform exit-code mapping
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
