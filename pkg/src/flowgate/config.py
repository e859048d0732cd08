"""Experiment configuration: one JSON document drives every subcommand.

The document has fixed sections (data, sampling, augment, model, vicreg,
train, eval) plus a seed and an output directory.  Validation is strict:
unknown fields and wrong types are rejected with the offending field path
so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .augment import AugmentConfig
from .data import SamplingConfig
from .errors import FlowgateError
from .flowroi import FarnebackParams
from .model import FgnConfig
from .train import TrainConfig
from .vicreg import VicregWeights


class ConfigInvalid(FlowgateError):
    """Configuration failed validation; the message names the field path."""


def _err(path: str, message: str) -> ConfigInvalid:
    return ConfigInvalid(f"{path}: {message}")


class _Section:
    """Typed, unknown-key-rejecting view over one config sub-dict."""

    def __init__(self, raw: Any, path: str):
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise _err(path, f"expected an object, got {type(raw).__name__}")
        self.raw = dict(raw)
        self.path = path

    def take(self, key: str, kind, default):
        value = self.raw.pop(key, default)
        if value is None:
            return None
        path = f"{self.path}.{key}"
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is int and isinstance(value, bool):
            raise _err(path, "expected an integer, got a boolean")
        if kind in (int, float, str, bool) and not isinstance(value, kind):
            raise _err(path, f"expected {kind.__name__}, got {type(value).__name__}")
        if kind is tuple:
            if not isinstance(value, (list, tuple)):
                raise _err(path, f"expected a list, got {type(value).__name__}")
            value = tuple(value)
        return value

    def subsection(self, key: str) -> "_Section":
        return _Section(self.raw.pop(key, None), f"{self.path}.{key}")

    def finish(self) -> None:
        if self.raw:
            stray = sorted(self.raw)[0]
            raise _err(f"{self.path}.{stray}", "unknown field")


@dataclass(frozen=True)
class SyntheticSpec:
    n_train_clips: int = 50
    n_val_clips: int = 13
    duration_s: float = 5.0
    fps: float = 30.0


@dataclass(frozen=True)
class DataSection:
    root: str = "dataset"
    segments_dir: str = "segments"
    frame_size: int = 224
    apply_roi: bool = True
    max_train_segments: int | None = None
    max_val_segments: int | None = None
    synthetic: SyntheticSpec = SyntheticSpec()
    farneback: FarnebackParams = FarnebackParams()


@dataclass(frozen=True)
class VicregSection:
    weights: VicregWeights = VicregWeights()
    expander_hidden: tuple[int, ...] = (8192, 8192, 8192)
    keep_temporal_pool: bool = False
    max_iterations: int | None = None
    log_interval: int = 10
    batch_size: int | None = None  # overrides train.batch_size for SSL
    lr: float | None = None  # overrides train.lr for SSL
    apply_roi: bool = False  # SSL views start from uncropped frames
    clip_grad_norm: float | None = 5.0


@dataclass(frozen=True)
class EvalSection:
    threshold: float = 0.5
    split: str = "val"


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: FgnConfig = field(default_factory=FgnConfig)
    vicreg: VicregSection = field(default_factory=VicregSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    transfer_include: tuple[str, ...] = ("rgb", "flow")

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": asdict(self.data),
            "sampling": asdict(self.sampling),
            "augment": asdict(self.augment),
            "model": asdict(self.model),
            "vicreg": asdict(self.vicreg),
            "train": asdict(self.train),
            "eval": asdict(self.eval),
            "transfer_include": list(self.transfer_include),
        }


def _build_data(section: _Section) -> DataSection:
    synth = section.subsection("synthetic")
    synthetic = SyntheticSpec(
        n_train_clips=synth.take("n_train_clips", int, 50),
        n_val_clips=synth.take("n_val_clips", int, 13),
        duration_s=synth.take("duration_s", float, 5.0),
        fps=synth.take("fps", float, 30.0),
    )
    synth.finish()
    far = section.subsection("farneback")
    farneback = FarnebackParams(
        pyr_scale=far.take("pyr_scale", float, 0.5),
        levels=far.take("levels", int, 3),
        winsize=far.take("winsize", int, 15),
        iterations=far.take("iterations", int, 3),
        poly_n=far.take("poly_n", int, 5),
        poly_sigma=far.take("poly_sigma", float, 1.2),
    )
    far.finish()
    out = DataSection(
        root=section.take("root", str, "dataset"),
        segments_dir=section.take("segments_dir", str, "segments"),
        frame_size=section.take("frame_size", int, 224),
        apply_roi=section.take("apply_roi", bool, True),
        max_train_segments=section.take("max_train_segments", int, None),
        max_val_segments=section.take("max_val_segments", int, None),
        synthetic=synthetic,
        farneback=farneback,
    )
    section.finish()
    return out


def _build_sampling(section: _Section) -> SamplingConfig:
    cfg = SamplingConfig(
        n_frames=section.take("n_frames", int, 16),
        target_fps=section.take("target_fps", float, 7.5),
        stride=section.take("stride", int, None),
    )
    section.finish()
    return cfg


def _build_augment(section: _Section) -> AugmentConfig:
    cfg = AugmentConfig(
        jitter_range=section.take("jitter_range", float, 0.2),
        jitter_prob=section.take("jitter_prob", float, 0.5),
        flip_prob=section.take("flip_prob", float, 0.5),
        zoom_scale=section.take("zoom_scale", tuple, (0.08, 0.1)),
        zoom_aspect=section.take("zoom_aspect", tuple, (0.75, 4.0 / 3.0)),
        flip_negates_flow_x=section.take("flip_negates_flow_x", bool, True),
    )
    section.finish()
    return cfg


def _build_model(section: _Section, sampling: SamplingConfig, frame_size: int) -> FgnConfig:
    defaults = FgnConfig()
    cfg = FgnConfig(
        n_frames=sampling.n_frames,
        frame_size=frame_size,
        rgb_channels=section.take("rgb_channels", tuple, defaults.rgb_channels),
        flow_channels=section.take("flow_channels", tuple, defaults.flow_channels),
        branch_pools=tuple(
            tuple(p) for p in section.take("branch_pools", tuple, defaults.branch_pools)
        ),
        merge_channels=section.take("merge_channels", tuple, defaults.merge_channels),
        merge_pool=tuple(section.take("merge_pool", tuple, defaults.merge_pool)),
        spatial_dropout_p=section.take("spatial_dropout_p", float, 0.2),
        classifier_dropout_p=section.take("classifier_dropout_p", float, 0.2),
        fc_dims=section.take("fc_dims", tuple, defaults.fc_dims),
        num_classes=section.take("num_classes", int, 1),
    )
    section.finish()
    return cfg


def _build_vicreg(section: _Section) -> VicregSection:
    w = section.subsection("weights")
    weights = VicregWeights(
        lam=w.take("lam", float, 25.0),
        mu=w.take("mu", float, 25.0),
        nu=w.take("nu", float, 1.0),
        gamma=w.take("gamma", float, 1.0),
        eps=w.take("eps", float, 1e-4),
    )
    w.finish()
    cfg = VicregSection(
        weights=weights,
        expander_hidden=section.take("expander_hidden", tuple, (8192, 8192, 8192)),
        keep_temporal_pool=section.take("keep_temporal_pool", bool, False),
        max_iterations=section.take("max_iterations", int, None),
        log_interval=section.take("log_interval", int, 10),
        batch_size=section.take("batch_size", int, None),
        lr=section.take("lr", float, None),
        apply_roi=section.take("apply_roi", bool, False),
        clip_grad_norm=section.take("clip_grad_norm", float, 5.0),
    )
    section.finish()
    return cfg


def _build_train(section: _Section) -> TrainConfig:
    try:
        cfg = TrainConfig(
            batch_size=section.take("batch_size", int, 32),
            epochs=section.take("epochs", int, 30),
            patience=section.take("patience", int, 15),
            lr=section.take("lr", float, 0.01),
            momentum=section.take("momentum", float, 0.9),
            weight_decay=section.take("weight_decay", float, 1e-6),
            eta_min=section.take("eta_min", float, 0.001),
            t_max=section.take("t_max", int, 30),
            loss=section.take("loss", str, "bce"),
            seed=section.take("seed", int, 0),
            precision=section.take("precision", str, "full"),
            workers=section.take("workers", int, 0),
        )
    except ValueError as exc:
        raise _err(section.path, str(exc)) from exc
    section.finish()
    return cfg


def _build_eval(section: _Section) -> EvalSection:
    cfg = EvalSection(
        threshold=section.take("threshold", float, 0.5),
        split=section.take("split", str, "val"),
    )
    section.finish()
    if cfg.split not in ("train", "val"):
        raise _err(f"{section.path}.split", "must be train or val")
    return cfg


def validate_config(raw: dict) -> ExperimentConfig:
    """Build a typed experiment config, rejecting unknown or ill-typed fields."""
    top = _Section(raw, "config")
    seed = top.take("seed", int, 0)
    output_dir = top.take("output_dir", str, "runs/default")
    data_sec = top.subsection("data")
    sampling = _build_sampling(top.subsection("sampling"))
    augment = _build_augment(top.subsection("augment"))
    data = _build_data(data_sec)
    try:
        model = _build_model(top.subsection("model"), sampling, data.frame_size)
        model.validate()
    except FlowgateError as exc:
        if isinstance(exc, ConfigInvalid):
            raise
        raise _err("config.model", str(exc)) from exc
    vicreg = _build_vicreg(top.subsection("vicreg"))
    train = _build_train(top.subsection("train"))
    eval_sec = _build_eval(top.subsection("eval"))
    transfer = top.take("transfer_include", tuple, ("rgb", "flow"))
    top.finish()
    for group in transfer:
        if group not in ("rgb", "flow", "merge"):
            raise _err("config.transfer_include", f"unknown group {group!r}")
    return ExperimentConfig(
        seed=seed,
        output_dir=output_dir,
        data=data,
        sampling=sampling,
        augment=augment,
        model=model,
        vicreg=vicreg,
        train=train,
        eval=eval_sec,
        transfer_include=tuple(transfer),
    )


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigInvalid(f"{path}: top level must be an object")
    return validate_config(raw)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` scalar overrides to a raw config dict."""
    out = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigInvalid(f"override {item!r} must look like section.key=value")
        dotted, text = item.split("=", 1)
        keys = dotted.split(".")
        node = out
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigInvalid(f"override {dotted!r} crosses a non-object field")
        leaf = keys[-1]
        current = node.get(leaf)
        if isinstance(current, (list, dict)):
            raise ConfigInvalid(f"override {dotted!r}: only scalar fields can be overridden")
        node[leaf] = _parse_scalar(text)
    return out


def _parse_scalar(text: str):
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("null", "none"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text
