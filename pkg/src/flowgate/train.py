"""Training regimes: supervised baseline, SSL pretraining, fine-tuning.

All three share one optimizer recipe (SGD with momentum, cosine-annealed
learning rate stepped per epoch, weight decay on conv/linear weights only)
and one checkpoint format (a directory of tensor containers plus a JSON
manifest).  Full-precision single-worker runs are bit-reproducible for a
fixed seed: every stochastic draw is keyed on (seed, epoch, sample index),
so the delivered sample sequence does not depend on prefetch workers.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from torch import nn

from . import metrics as metrics_mod
from .augment import AugmentConfig, augment_primary, make_ssl_views, standardize_pair
from .data import SegmentPair, TruncatedPayload, prefetch_map, read_tensor, write_tensor
from .errors import FlowgateError, ShapeMismatch
from .model import FgnModel
from .vicreg import VicregModel, VicregWeights, collapse_diagnostics, vicreg_loss


class OutOfRange(FlowgateError):
    """Scheduler queried outside [0, t_max]."""


class NonFiniteLoss(FlowgateError):
    """Training loss became NaN or infinite; diagnostics attached."""

    def __init__(self, message: str, diagnostics: dict | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class EmptyDataset(FlowgateError):
    """Trainer received no segments."""


class MissingGroup(FlowgateError):
    """Checkpoint lacks a parameter group the transfer policy requires."""


class CorruptManifest(FlowgateError):
    """Checkpoint manifest is unreadable or structurally invalid."""


class UnsupportedVersion(FlowgateError):
    """Checkpoint manifest format version is not understood."""


class TensorCountMismatch(FlowgateError):
    """Checkpoint tensor names do not match the target model."""


class CollapseDetected(UserWarning):
    """Embedding statistics indicate a collapse during SSL pretraining."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    patience: int = 15
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-6
    eta_min: float = 0.001
    t_max: int = 30
    loss: str = "bce"  # bce | cross_entropy | vicreg
    seed: int = 0
    precision: str = "full"  # full | mixed
    workers: int = 0

    def __post_init__(self) -> None:
        if self.patience > self.epochs:
            raise ValueError("patience must be <= epochs")
        if not self.lr > self.eta_min > 0:
            raise ValueError("need lr > eta_min > 0")
        if self.loss not in ("bce", "cross_entropy", "vicreg"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.precision not in ("full", "mixed"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class TransferPolicy:
    """Which pretrained groups initialize the supervised model.

    The expander is never transferable; ``strict`` turns a missing group
    into an error instead of a skip.
    """

    include: frozenset[str] = frozenset({"rgb", "flow"})
    strict: bool = True

    def __post_init__(self) -> None:
        allowed = {"rgb", "flow", "merge"}
        if not self.include:
            raise ValueError("transfer policy must include at least one group")
        if not set(self.include) <= allowed:
            raise ValueError(f"transferable groups are {sorted(allowed)}")


@dataclass
class TrainHistory:
    """Per-epoch records plus the stopping outcome.

    ``wall_time`` is recorded in memory but excluded from the canonical
    serialization so that identical runs produce identical JSON.
    """

    records: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""
    collapse_detected: bool = False

    _CANONICAL_DROP = ("wall_time",)

    def to_json_lines(self) -> str:
        lines = []
        for rec in self.records:
            clean = {k: v for k, v in rec.items() if k not in self._CANONICAL_DROP}
            lines.append(json.dumps(clean, sort_keys=True))
        lines.append(
            json.dumps(
                {
                    "best_epoch": self.best_epoch,
                    "stop_reason": self.stop_reason,
                    "collapse_detected": self.collapse_detected,
                },
                sort_keys=True,
            )
        )
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json_lines())


class SegmentDataset(Protocol):
    def __len__(self) -> int: ...

    def __getitem__(self, idx: int) -> SegmentPair: ...


class StoreDataset:
    """Adapter presenting one split of a SegmentStore as a dataset."""

    def __init__(self, store, split: str) -> None:
        self.store = store
        self.ids = store.ids(split)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, idx: int) -> SegmentPair:
        return self.store.load(self.ids[idx])


# ---------------------------------------------------------------------------
# Scheduler and optimizer
# ---------------------------------------------------------------------------


def cosine_lr(t: int, cfg: TrainConfig) -> float:
    """Cosine-annealed learning rate at epoch ``t``.

    lr(t) = eta_min + (lr - eta_min) * (1 + cos(pi t / t_max)) / 2,
    arranged so lr(0) == lr and lr(t_max) == eta_min hold exactly in
    floating point.
    """
    if not 0 <= t <= cfg.t_max:
        raise OutOfRange(f"t={t} outside [0, {cfg.t_max}]")
    w = (1.0 + math.cos(math.pi * t / cfg.t_max)) / 2.0
    return cfg.lr * w + cfg.eta_min * (1.0 - w)


def weight_decay_param_names(model: nn.Module) -> list[str]:
    """Names of parameters that receive weight decay: conv and linear weights.

    Biases and normalization parameters are excluded.
    """
    decay = []
    for module_name, module in model.named_modules():
        if isinstance(module, (nn.Conv3d, nn.Linear)):
            prefix = f"{module_name}." if module_name else ""
            decay.append(f"{prefix}weight")
    return decay


def build_sgd(model: nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    decay_names = set(weight_decay_param_names(model))
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        (decay if name in decay_names else no_decay).append(param)
    return torch.optim.SGD(
        [
            {"params": decay, "weight_decay": cfg.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=cfg.lr,
        momentum=cfg.momentum,
    )


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _sample_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def _autocast(cfg: TrainConfig):
    if cfg.precision == "mixed":
        return torch.autocast(device_type="cpu", dtype=torch.bfloat16)
    import contextlib

    return contextlib.nullcontext()


# ---------------------------------------------------------------------------
# Supervised training
# ---------------------------------------------------------------------------


def _batched(indices: np.ndarray, batch_size: int):
    for i in range(0, len(indices), batch_size):
        yield indices[i : i + batch_size]


def evaluate_supervised(
    model: FgnModel, data: SegmentDataset, cfg: TrainConfig
) -> tuple[float, dict, np.ndarray, np.ndarray]:
    """Validation loss plus threshold metrics; no augmentation, no shuffle."""
    model.eval()
    binary = model.config.num_classes == 1
    losses, all_scores, all_labels = [], [], []
    with torch.no_grad():
        for batch in _batched(np.arange(len(data)), cfg.batch_size):
            pairs = [data[int(i)] for i in batch]
            streams = [standardize_pair(p) for p in pairs]
            rgb = torch.from_numpy(np.stack([s[0] for s in streams]))
            flow = torch.from_numpy(np.stack([s[1] for s in streams]))
            labels = np.array([p.label for p in pairs])
            logits = model(rgb, flow)
            if binary:
                target = torch.from_numpy(labels.astype(np.float32)).unsqueeze(1)
                loss = nn.functional.binary_cross_entropy_with_logits(logits, target)
                scores = torch.sigmoid(logits.squeeze(1))
            else:
                target = torch.from_numpy(labels.astype(np.int64))
                loss = nn.functional.cross_entropy(logits, target)
                scores = torch.softmax(logits, dim=1)
            losses.append(float(loss) * len(pairs))
            all_scores.append(scores.numpy())
            all_labels.append(labels)
    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    val_loss = float(sum(losses) / len(labels))
    if binary:
        rep = metrics_mod.metrics(labels, scores)
        val_metrics = {
            "accuracy": rep.accuracy,
            "f1": rep.f1,
            "tnr": rep.tnr,
            "tpr": rep.tpr,
            "auc": rep.auc,
        }
    else:
        val_metrics = {"accuracy": metrics_mod.topk_accuracy(labels, scores, k=1)}
        if scores.shape[1] >= 5:
            val_metrics["top5"] = metrics_mod.topk_accuracy(labels, scores, k=5)
    return val_loss, val_metrics, labels, scores


def train_supervised(
    model: FgnModel,
    train_data: SegmentDataset,
    val_data: SegmentDataset,
    cfg: TrainConfig,
    augment_cfg: AugmentConfig | None = None,
) -> tuple[FgnModel, TrainHistory]:
    """SGD training with per-epoch cosine annealing and early stopping.

    Early stopping monitors validation loss (min mode); the returned model
    carries the best-validation parameters, never the last epoch's.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise EmptyDataset("supervised training needs non-empty train and val sets")
    augment_cfg = augment_cfg or AugmentConfig(mode="primary")
    binary = model.config.num_classes == 1
    torch.manual_seed(cfg.seed)
    optimizer = build_sgd(model, cfg)
    history = TrainHistory()
    best_loss = math.inf
    best_state: dict | None = None
    epochs_since_best = 0

    def prepare(args: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, int]:
        epoch_i, idx = args
        pair = train_data[idx]
        rng = _sample_rng(cfg.seed, epoch_i, idx)
        rgb, flow = augment_primary(pair, rng, augment_cfg)
        return rgb, flow, int(pair.label)

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = cosine_lr(min(epoch, cfg.t_max), cfg)
        _set_lr(optimizer, lr)
        model.train()
        order = _sample_rng(cfg.seed, epoch, 0xD47A).permutation(len(train_data))
        epoch_loss, seen = 0.0, 0
        for batch_idx in _batched(order, cfg.batch_size):
            items = list(
                prefetch_map(prepare, [(epoch, int(i)) for i in batch_idx], cfg.workers)
            )
            rgb = torch.from_numpy(np.stack([it[0] for it in items]))
            flow = torch.from_numpy(np.stack([it[1] for it in items]))
            labels = np.array([it[2] for it in items])
            with _autocast(cfg):
                logits = model(rgb, flow)
                if binary:
                    target = torch.from_numpy(labels.astype(np.float32)).unsqueeze(1)
                    loss = nn.functional.binary_cross_entropy_with_logits(logits, target)
                else:
                    target = torch.from_numpy(labels.astype(np.int64))
                    loss = nn.functional.cross_entropy(logits, target)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch}",
                    diagnostics={"epoch": epoch, "lr": lr, "seen": seen},
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(items)
            seen += len(items)
        val_loss, val_metrics, _, _ = evaluate_supervised(model, val_data, cfg)
        history.records.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / seen,
                "val_loss": val_loss,
                "val_metrics": val_metrics,
                "lr": lr,
                "wall_time": time.perf_counter() - start,
            }
        )
        if val_loss < best_loss:
            best_loss = val_loss
            history.best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                history.stop_reason = "early_stop"
                break
    if not history.stop_reason:
        history.stop_reason = "completed"
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history


# ---------------------------------------------------------------------------
# VICReg pretraining
# ---------------------------------------------------------------------------


def pretrain_vicreg(
    model: VicregModel,
    data: SegmentDataset,
    cfg: TrainConfig,
    weights: VicregWeights = VicregWeights(),
    augment_cfg: AugmentConfig | None = None,
    max_iterations: int | None = None,
    log_interval: int = 10,
    collapse_std: float = 0.01,
    collapse_patience: int = 3,
    clip_grad_norm: float | None = 5.0,
) -> tuple[VicregModel, TrainHistory]:
    """Minimize the three-term loss over paired stream views.

    Gradients are clipped to a global norm of ``clip_grad_norm`` before
    each step (None disables).  The three-term objective produces very
    large early gradients under plain SGD with momentum, and without the
    clip the run either diverges or escapes into a collapsed solution;
    the clip plays the role the trust-ratio optimizers serve in larger
    joint-embedding setups.

    Collapse is monitored every ``log_interval`` iterations: when the mean
    per-dimension std of Z stays below ``collapse_std`` for
    ``collapse_patience`` consecutive checks, a ``CollapseDetected``
    warning fires (training continues).  Early stopping monitors the
    epoch-mean loss when the run is epoch-bounded.
    """
    if len(data) == 0:
        raise EmptyDataset("pretraining needs a non-empty dataset")
    if cfg.batch_size < 2:
        raise ValueError("pretraining needs batch_size >= 2 for batch statistics")
    augment_cfg = augment_cfg or AugmentConfig(mode="ssl")
    torch.manual_seed(cfg.seed)
    optimizer = build_sgd(model, cfg)
    history = TrainHistory()
    iteration = 0
    low_std_streak = 0
    best_loss = math.inf
    epochs_since_best = 0

    def prepare(args: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        epoch_i, idx = args
        rng = _sample_rng(cfg.seed, 0x55E1, epoch_i, idx)
        return make_ssl_views(data[idx], rng, augment_cfg)

    done = False
    for epoch in range(cfg.epochs):
        lr = cosine_lr(min(epoch, cfg.t_max), cfg)
        _set_lr(optimizer, lr)
        model.train()
        order = _sample_rng(cfg.seed, 0x55E1, epoch, 0xD47A).permutation(len(data))
        epoch_losses = []
        for batch_idx in _batched(order, cfg.batch_size):
            if len(batch_idx) < 2:
                continue
            views = list(
                prefetch_map(prepare, [(epoch, int(i)) for i in batch_idx], cfg.workers)
            )
            x = torch.from_numpy(np.stack([v[0] for v in views]))
            x_prime = torch.from_numpy(np.stack([v[1] for v in views]))
            with _autocast(cfg):
                z, z_prime = model(x, x_prime)
                breakdown = vicreg_loss(z, z_prime, weights)
            if not torch.isfinite(breakdown.total):
                raise NonFiniteLoss(
                    f"non-finite SSL loss at iteration {iteration}",
                    diagnostics={"iteration": iteration, "lr": lr},
                )
            optimizer.zero_grad()
            breakdown.total.backward()
            if clip_grad_norm is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), clip_grad_norm)
            optimizer.step()
            iteration += 1
            epoch_losses.append(float(breakdown.total.detach()))
            if iteration % log_interval == 0 or iteration == 1:
                diag = collapse_diagnostics(z.detach(), max_dims=1024)
                if diag.std_mean < collapse_std:
                    low_std_streak += 1
                    if low_std_streak >= collapse_patience and not history.collapse_detected:
                        history.collapse_detected = True
                        warnings.warn(
                            f"embedding std {diag.std_mean:.2e} below {collapse_std} "
                            f"for {low_std_streak} consecutive checks",
                            CollapseDetected,
                        )
                else:
                    low_std_streak = 0
                history.records.append(
                    {
                        "iteration": iteration,
                        "epoch": epoch,
                        "loss": breakdown.as_dict(),
                        "diagnostics": diag.as_dict(),
                        "lr": lr,
                    }
                )
            if max_iterations is not None and iteration >= max_iterations:
                done = True
                break
        if epoch_losses:
            mean_loss = float(np.mean(epoch_losses))
            if mean_loss < best_loss:
                best_loss = mean_loss
                history.best_epoch = epoch
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= cfg.patience:
                    history.stop_reason = "early_stop"
                    done = True
        if done:
            break
    if not history.stop_reason:
        history.stop_reason = "completed" if max_iterations is None else "iteration_cap"
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1
_SAVABLE_DTYPES = {torch.float32: "float32", torch.int64: "int64"}


def _model_config_dict(model: nn.Module) -> dict:
    out: dict = {"model_type": type(model).__name__}
    if hasattr(model, "config"):
        out["config"] = asdict(model.config)
    if hasattr(model, "expander_config"):
        out["expander_config"] = asdict(model.expander_config)
        out["keep_temporal_pool"] = model.keep_temporal_pool
    return out


def save_checkpoint(model: nn.Module, path: str | Path, metadata: dict | None = None) -> Path:
    """Write every state tensor plus a manifest, atomically.

    Tensors are stored as float32 containers; int64 buffers (batch-norm
    step counters) are cast losslessly for the value ranges involved and
    their original dtype is recorded for restore.
    """
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    tensors, dtypes = {}, {}
    for i, (name, value) in enumerate(model.state_dict().items()):
        if value.dtype not in _SAVABLE_DTYPES:
            raise ValueError(f"{name}: unsupported checkpoint dtype {value.dtype}")
        dtypes[name] = _SAVABLE_DTYPES[value.dtype]
        filename = f"t{i:04d}.jt"
        tensors[name] = filename
        write_tensor(tmp / filename, value.detach().cpu().to(torch.float32).numpy())
    groups: dict[str, list[str]] = {}
    for name in tensors:
        groups.setdefault(name.split(".", 1)[0], []).append(name)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model": _model_config_dict(model),
        "tensors": tensors,
        "dtypes": dtypes,
        "groups": groups,
        "metadata": metadata or {},
    }
    (tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)
    return path


@dataclass
class Checkpoint:
    """Handle over a saved checkpoint directory; tensors load lazily."""

    root: Path
    manifest: dict

    @property
    def groups(self) -> dict[str, list[str]]:
        return self.manifest["groups"]

    @property
    def tensor_names(self) -> list[str]:
        return list(self.manifest["tensors"])

    def tensor(self, name: str) -> torch.Tensor:
        try:
            filename = self.manifest["tensors"][name]
        except KeyError:
            raise TensorCountMismatch(f"checkpoint has no tensor {name!r}") from None
        try:
            arr = read_tensor(self.root / filename)
        except TruncatedPayload as exc:
            raise TruncatedPayload(f"{name}: {exc}") from exc
        t = torch.from_numpy(arr)
        if self.manifest["dtypes"].get(name) == "int64":
            t = t.to(torch.int64)
        return t

    def restore(self, model: nn.Module) -> None:
        """Load every tensor into ``model``; name sets must match exactly."""
        want = set(model.state_dict())
        have = set(self.manifest["tensors"])
        if want != have:
            missing = sorted(want - have)
            extra = sorted(have - want)
            raise TensorCountMismatch(f"missing={missing[:5]} extra={extra[:5]}")
        state = {}
        for name, current in model.state_dict().items():
            t = self.tensor(name)
            if tuple(t.shape) != tuple(current.shape):
                raise ShapeMismatch(
                    f"{name}: checkpoint {tuple(t.shape)} vs model {tuple(current.shape)}"
                )
            state[name] = t
        model.load_state_dict(state)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Validate the manifest and return a lazy handle."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CorruptManifest(f"{root}: no manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptManifest(f"{root}: {exc}") from exc
    for key in ("format_version", "tensors", "dtypes", "groups"):
        if key not in manifest:
            raise CorruptManifest(f"{root}: manifest missing {key!r}")
    if manifest["format_version"] != CHECKPOINT_VERSION:
        raise UnsupportedVersion(
            f"{root}: manifest version {manifest['format_version']}"
        )
    return Checkpoint(root=root, manifest=manifest)


@dataclass
class TransferReport:
    copied: list[str]
    skipped: list[str]


def transfer_weights(
    target: FgnModel, ckpt: Checkpoint, policy: TransferPolicy = TransferPolicy()
) -> TransferReport:
    """Copy pretrained groups into a fresh model by tensor name.

    Groups outside ``policy.include`` keep the target's initialization;
    the expander is never copied.  ``MissingGroup`` fires in strict mode
    when the checkpoint lacks an included group; shape conflicts raise
    ``ShapeMismatch``.
    """
    state = target.state_dict()
    copied, skipped = [], []
    for group in sorted(policy.include):
        names = ckpt.groups.get(group)
        if not names:
            if policy.strict:
                raise MissingGroup(f"checkpoint has no group {group!r}")
            skipped.append(group)
            continue
        for name in names:
            if name not in state:
                skipped.append(name)
                continue
            t = ckpt.tensor(name)
            if tuple(t.shape) != tuple(state[name].shape):
                raise ShapeMismatch(
                    f"{name}: checkpoint {tuple(t.shape)} vs target {tuple(state[name].shape)}"
                )
            state[name] = t
            copied.append(name)
    target.load_state_dict(state)
    return TransferReport(copied=copied, skipped=skipped)
