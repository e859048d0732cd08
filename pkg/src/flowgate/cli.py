"""Command-line operator surface.

Subcommands chain the pipeline end to end from one JSON config:

    synth-data  render the synthetic motion/static dataset tree
    preprocess  cut segments, compute flow, extract ROIs, store pairs
    train       supervised training from scratch
    pretrain    self-supervised pretraining of the auxiliary model
    finetune    transfer pretrained groups, then supervised training
    eval        evaluate a checkpoint and emit the metrics artifacts
    count       print parameter and multiply-accumulate counts
    report      regenerate plots from stored metrics

Every run validates its config up front, writes a resolved copy into the
output directory for provenance, and logs JSON lines to stderr.  Exit
codes: 0 success, 1 configuration/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import flowroi, metrics as metrics_mod, train as train_mod
from .config import ConfigInvalid, ExperimentConfig, apply_overrides, validate_config
from .errors import FlowgateError
from .model import build_fgn, count_macs, count_params
from .train import StoreDataset, TransferPolicy
from .vicreg import ExpanderConfig, build_ssl_model

_COMMANDS = (
    "synth-data",
    "preprocess",
    "pretrain",
    "train",
    "finetune",
    "eval",
    "count",
    "report",
)

_CLASS_KINDS = ("motion", "static")


class UnknownCommand(FlowgateError):
    pass


def _log(event: str, **fields) -> None:
    print(json.dumps({"event": event, **fields}, sort_keys=True), file=sys.stderr)


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved_config(cfg: ExperimentConfig, out: Path) -> None:
    (out / "config.resolved.json").write_text(
        json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"
    )


def _parse_common(argv: list[str], command: str) -> tuple[ExperimentConfig, argparse.Namespace]:
    parser = argparse.ArgumentParser(prog=f"flowgate {command}", add_help=True)
    parser.add_argument("--config", required=True, help="experiment JSON config")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a scalar config field",
    )
    if command == "eval":
        parser.add_argument(
            "--checkpoint", default="train/checkpoint", help="checkpoint dir, relative to --out"
        )
    if command == "finetune":
        parser.add_argument(
            "--pretrained", default="pretrain/checkpoint", help="SSL checkpoint, relative to --out"
        )
    if command == "report":
        parser.add_argument("--run", default="eval", help="run subdir with metrics to re-plot")
    args = parser.parse_args(argv)
    config_path = Path(args.config)
    if not config_path.exists():
        raise ConfigInvalid(f"config file not found: {config_path}")
    try:
        raw = json.loads(config_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{config_path}: invalid JSON ({exc})") from exc
    if args.set:
        raw = apply_overrides(raw, args.set)
    cfg = validate_config(raw)
    if args.out:
        cfg.output_dir = args.out
    return cfg, args


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------


def cmd_synth_data(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    _write_resolved_config(cfg, out)
    root = _resolve(out, cfg.data.root)
    spec = cfg.data.synthetic
    counts = {"train": spec.n_train_clips, "val": spec.n_val_clips}
    start = time.perf_counter()
    for split_i, split in enumerate(("train", "val")):
        for class_i, kind in enumerate(_CLASS_KINDS):
            class_dir = root / split / kind
            class_dir.mkdir(parents=True, exist_ok=True)
            for clip_i in range(counts[split]):
                seed = int(
                    np.random.SeedSequence(
                        [cfg.seed, 0x531D, split_i, class_i, clip_i]
                    ).generate_state(1)[0]
                )
                clip_spec = data_mod.SyntheticClipSpec(
                    kind=kind,
                    duration_s=spec.duration_s,
                    fps=spec.fps,
                    frame_size=cfg.data.frame_size,
                )
                frames = data_mod.generate_synthetic_clip(clip_spec, seed)
                data_mod.write_tensor_clip(
                    class_dir / f"clip_{clip_i:04d}.jt", frames, spec.fps
                )
    _log("synth-data", root=str(root), seconds=round(time.perf_counter() - start, 2))
    return 0


def _preprocess_into(
    cfg: ExperimentConfig, store_dir: Path, apply_roi: bool
) -> data_mod.SegmentStore:
    index = data_mod.load_dataset(_resolve(_out_dir(cfg), cfg.data.root))
    store = data_mod.SegmentStore.create(store_dir)
    caps = {"train": cfg.data.max_train_segments, "val": cfg.data.max_val_segments}
    for split in ("train", "val"):
        entries = index.split_entries(split)
        cap = caps[split]
        seg_count = 0
        for entry_i, (clip_path, _, class_id) in enumerate(entries):
            if cap is not None and seg_count >= cap:
                break
            frames, fps = data_mod.read_clip(clip_path)
            frames = data_mod.resize_frames(frames, cfg.data.frame_size)
            segments = data_mod.sample_segments(
                frames, fps, cfg.sampling, source_id=str(clip_path.name)
            )
            for seg_i, raw in enumerate(segments):
                if cap is not None and seg_count >= cap:
                    break
                rng = np.random.default_rng(
                    np.random.SeedSequence([cfg.seed, 0x9E11, entry_i, seg_i])
                )
                pair = flowroi.build_segment_pair(
                    raw,
                    rng,
                    params=cfg.data.farneback,
                    apply_roi=apply_roi,
                    label=class_id,
                )
                store.write(split, pair)
                seg_count += 1
        _log("preprocess", split=split, segments=seg_count, roi=apply_roi)
    store.flush()
    return store


def cmd_preprocess(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    _write_resolved_config(cfg, out)
    _preprocess_into(cfg, _resolve(out, cfg.data.segments_dir), cfg.data.apply_roi)
    return 0


def _open_primary_store(cfg: ExperimentConfig) -> data_mod.SegmentStore:
    return data_mod.SegmentStore.open(_resolve(_out_dir(cfg), cfg.data.segments_dir))


def _open_ssl_store(cfg: ExperimentConfig) -> data_mod.SegmentStore:
    if cfg.vicreg.apply_roi == cfg.data.apply_roi:
        return _open_primary_store(cfg)
    ssl_dir = _resolve(_out_dir(cfg), cfg.data.segments_dir + "_ssl")
    if (ssl_dir / "index.json").exists():
        return data_mod.SegmentStore.open(ssl_dir)
    return _preprocess_into(cfg, ssl_dir, cfg.vicreg.apply_roi)


def _run_supervised(cfg: ExperimentConfig, run_name: str, model=None) -> int:
    out = _out_dir(cfg)
    _write_resolved_config(cfg, out)
    store = _open_primary_store(cfg)
    train_data = StoreDataset(store, "train")
    val_data = StoreDataset(store, "val")
    if model is None:
        model = build_fgn(cfg.model, seed=cfg.seed)
    start = time.perf_counter()
    model, history = train_mod.train_supervised(
        model, train_data, val_data, cfg.train, augment_cfg=cfg.augment
    )
    run_dir = out / run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    history.write(run_dir / "history.jsonl")
    train_mod.save_checkpoint(
        model, run_dir / "checkpoint", metadata={"run": run_name, "seed": cfg.seed}
    )
    val_loss, val_metrics, labels, scores = train_mod.evaluate_supervised(
        model, val_data, cfg.train
    )
    if model.config.num_classes == 1:
        report = metrics_mod.metrics(labels, scores, threshold=cfg.eval.threshold)
        metrics_mod.emit_report(report, run_dir)
        final_accuracy = report.accuracy
    else:
        summary = {"val_loss": val_loss, **val_metrics}
        (run_dir / "metrics.json").write_text(
            json.dumps(summary, sort_keys=True, indent=2) + "\n"
        )
        final_accuracy = summary["accuracy"]
    _log(
        run_name,
        epochs=len(history.records),
        best_epoch=history.best_epoch,
        stop_reason=history.stop_reason,
        val_accuracy=round(final_accuracy, 4),
        seconds=round(time.perf_counter() - start, 2),
    )
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    return _run_supervised(cfg, "train")


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    _write_resolved_config(cfg, out)
    store = _open_ssl_store(cfg)
    dataset = StoreDataset(store, "train")
    fgn = build_fgn(cfg.model, seed=cfg.seed)
    width = fgn.feature_width(keep_temporal_pool=cfg.vicreg.keep_temporal_pool)
    ssl_model = build_ssl_model(
        fgn,
        ExpanderConfig(input_dim=width, hidden_dims=cfg.vicreg.expander_hidden),
        keep_temporal_pool=cfg.vicreg.keep_temporal_pool,
        seed=cfg.seed,
    )
    from dataclasses import replace

    overrides: dict = {"loss": "vicreg"}
    if cfg.vicreg.batch_size is not None:
        overrides["batch_size"] = cfg.vicreg.batch_size
    if cfg.vicreg.lr is not None:
        overrides["lr"] = cfg.vicreg.lr
    train_cfg = replace(cfg.train, **overrides)
    start = time.perf_counter()
    ssl_model, history = train_mod.pretrain_vicreg(
        ssl_model,
        dataset,
        train_cfg,
        weights=cfg.vicreg.weights,
        augment_cfg=cfg.augment,
        max_iterations=cfg.vicreg.max_iterations,
        log_interval=cfg.vicreg.log_interval,
        clip_grad_norm=cfg.vicreg.clip_grad_norm,
    )
    run_dir = out / "pretrain"
    run_dir.mkdir(parents=True, exist_ok=True)
    history.write(run_dir / "history.jsonl")
    train_mod.save_checkpoint(
        ssl_model, run_dir / "checkpoint", metadata={"run": "pretrain", "seed": cfg.seed}
    )
    last = history.records[-1]["loss"]["total"] if history.records else float("nan")
    _log(
        "pretrain",
        iterations=history.records[-1]["iteration"] if history.records else 0,
        final_loss=round(last, 4),
        collapse_detected=history.collapse_detected,
        seconds=round(time.perf_counter() - start, 2),
    )
    return 0


def cmd_finetune(cfg: ExperimentConfig, pretrained: str) -> int:
    out = _out_dir(cfg)
    ckpt = train_mod.load_checkpoint(_resolve(out, pretrained))
    model = build_fgn(cfg.model, seed=cfg.seed)
    policy = TransferPolicy(include=frozenset(cfg.transfer_include))
    report = train_mod.transfer_weights(model, ckpt, policy)
    _log("transfer", copied=len(report.copied), skipped=len(report.skipped))
    return _run_supervised(cfg, "finetune", model=model)


def cmd_eval(cfg: ExperimentConfig, checkpoint: str) -> int:
    out = _out_dir(cfg)
    _write_resolved_config(cfg, out)
    ckpt = train_mod.load_checkpoint(_resolve(out, checkpoint))
    model = build_fgn(cfg.model, seed=cfg.seed)
    ckpt.restore(model)
    store = _open_primary_store(cfg)
    dataset = StoreDataset(store, cfg.eval.split)
    val_loss, val_metrics, labels, scores = train_mod.evaluate_supervised(
        model, dataset, cfg.train
    )
    run_dir = out / "eval"
    if model.config.num_classes == 1:
        report = metrics_mod.metrics(labels, scores, threshold=cfg.eval.threshold)
        metrics_mod.emit_report(report, run_dir)
        _log("eval", split=cfg.eval.split, accuracy=round(report.accuracy, 4))
    else:
        run_dir.mkdir(parents=True, exist_ok=True)
        summary = {"val_loss": val_loss, **val_metrics}
        (run_dir / "metrics.json").write_text(
            json.dumps(summary, sort_keys=True, indent=2) + "\n"
        )
        _log("eval", split=cfg.eval.split, accuracy=round(summary["accuracy"], 4))
    return 0


def cmd_count(cfg: ExperimentConfig) -> int:
    model = build_fgn(cfg.model, seed=cfg.seed)
    params = count_params(model)
    macs = count_macs(model)
    summary = {
        "params": params,
        "macs": macs,
        "macs_mul_add_counted_separately": count_macs(model, ops_per_mac=2),
        "feature_width_no_temporal_pool": model.feature_width(keep_temporal_pool=False),
        "feature_width_pooled": model.feature_width(keep_temporal_pool=True),
    }
    print(json.dumps(summary, sort_keys=True, indent=2))
    return 0


def cmd_report(cfg: ExperimentConfig, run: str) -> int:
    out = _out_dir(cfg)
    run_dir = _resolve(out, run)
    metrics_path = run_dir / "metrics.json"
    roc_path = run_dir / "roc.csv"
    if not metrics_path.exists():
        raise ConfigInvalid(f"{metrics_path}: nothing to report")
    flat = json.loads(metrics_path.read_text())
    roc = []
    if roc_path.exists():
        with open(roc_path) as fh:
            reader = csv.reader(fh)
            next(reader)
            roc = [(float(a), float(b)) for a, b in reader]
    report = metrics_mod.MetricsReport(
        accuracy=flat["accuracy"],
        f1=flat["f1"],
        tnr=flat["tnr"],
        tpr=flat["tpr"],
        auc=flat["auc"],
        threshold=flat["threshold"],
        confusion=metrics_mod.ConfusionMatrix(
            tp=flat["tp"], fp=flat["fp"], tn=flat["tn"], fn=flat["fn"]
        ),
        roc=roc or [(0.0, 0.0), (1.0, 1.0)],
    )
    metrics_mod.emit_report(report, run_dir)
    _log("report", run=str(run_dir))
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def run(argv: list[str]) -> int:
    """Dispatch one subcommand; returns the process exit code."""
    if not argv or argv[0] in ("-h", "--help"):
        print(__doc__)
        return 0 if argv else 1
    command, rest = argv[0], argv[1:]
    try:
        if command not in _COMMANDS:
            raise UnknownCommand(
                f"unknown command {command!r}; expected one of {', '.join(_COMMANDS)}"
            )
        cfg, args = _parse_common(rest, command)
        if command == "synth-data":
            return cmd_synth_data(cfg)
        if command == "preprocess":
            return cmd_preprocess(cfg)
        if command == "train":
            return cmd_train(cfg)
        if command == "pretrain":
            return cmd_pretrain(cfg)
        if command == "finetune":
            return cmd_finetune(cfg, args.pretrained)
        if command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if command == "count":
            return cmd_count(cfg)
        if command == "report":
            return cmd_report(cfg, args.run)
        raise UnknownCommand(command)
    except (ConfigInvalid, UnknownCommand, FileNotFoundError) as exc:
        _log("error", kind=type(exc).__name__, message=str(exc))
        return 1
    except SystemExit as exc:
        # argparse --help or usage errors
        code = exc.code if isinstance(exc.code, int) else 1
        return 0 if code == 0 else 1
    except FlowgateError as exc:
        _log("error", kind=type(exc).__name__, message=str(exc))
        return 2
    except Exception as exc:  # pragma: no cover - last-resort guard
        _log("error", kind=type(exc).__name__, message=str(exc))
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
