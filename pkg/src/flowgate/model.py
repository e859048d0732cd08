"""The efficient flow-gated two-stream network.

Two 3D-convolutional branches (RGB and optical flow) run in parallel; the
flow branch ends in a sigmoid whose output multiplicatively gates the RGB
features.  The gated features pass through a merging block of further conv
stages, a temporal max pooling, and a small fully connected classifier.

Each conv stage factorizes its kernel into a spatial (1x3x3) and a
temporal (3x1x1) convolution.  Pooling kernels are clamped to the input
size so the same architecture runs at reduced frame sizes for smoke tests.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from .errors import FlowgateError, ShapeMismatch


class BadConfig(FlowgateError):
    """Model configuration violates an architectural constraint."""


Pool3 = tuple[int, int, int]

_DEFAULT_BRANCH_POOLS: tuple[Pool3, ...] = ((1, 2, 2), (1, 2, 2), (1, 2, 2), (2, 2, 2))


@dataclass(frozen=True)
class FgnConfig:
    """Architecture hyperparameters.

    The default layout lands at 273,793 parameters.  The last branch stage
    pools temporally (2x2x2) so the gate output keeps a temporal dimension
    of ``n_frames / 2``; the merging block preserves it with 1x2x2 pools
    until the final temporal max pooling collapses it to
    ``temporal_maxpool_out``.  ``legacy()`` reproduces the pre-efficiency
    arrangement: 64 frames, purely spatial branch pools, and 2x2x2 merge
    pools.
    """

    n_frames: int = 16
    frame_size: int = 224
    rgb_channels: tuple[int, ...] = (16, 16, 32, 32)
    flow_channels: tuple[int, ...] = (16, 16, 32, 32)
    branch_pools: tuple[Pool3, ...] = _DEFAULT_BRANCH_POOLS
    merge_channels: tuple[int, ...] = (64, 64, 128)
    merge_pool: Pool3 = (1, 2, 2)
    temporal_maxpool_out: int = 1
    spatial_dropout_p: float = 0.2
    spatial_dropout_stages: int = 2
    classifier_dropout_p: float = 0.2
    fc_dims: tuple[int, ...] = (128, 32, 8)
    num_classes: int = 1

    def validate(self) -> None:
        if self.n_frames < 1 or self.frame_size < 8:
            raise BadConfig("n_frames must be >= 1 and frame_size >= 8")
        if len(self.rgb_channels) != len(self.flow_channels):
            raise BadConfig("rgb and flow branches must have equal stage counts")
        if self.rgb_channels and len(self.branch_pools) != len(self.rgb_channels):
            raise BadConfig("branch_pools must match the branch stage count")
        if self.rgb_channels and self.rgb_channels[-1] != self.flow_channels[-1]:
            raise BadConfig("branch outputs must match for the gate multiply")
        if self.merge_pool[0] not in (1, 2):
            raise BadConfig("merge_pool temporal component must be 1 or 2")
        for p in (self.spatial_dropout_p, self.classifier_dropout_p):
            if not 0.0 <= p < 1.0:
                raise BadConfig("dropout probabilities must lie in [0, 1)")
        if self.num_classes < 0:
            raise BadConfig("num_classes must be >= 0")
        if self.temporal_maxpool_out != 1:
            raise BadConfig("only temporal_maxpool_out == 1 is supported")

    @classmethod
    def legacy(cls) -> "FgnConfig":
        """The original heavyweight arrangement, used for cost accounting."""
        return cls(
            n_frames=64,
            branch_pools=((1, 2, 2),) * 4,
            merge_pool=(2, 2, 2),
        )

    @classmethod
    def debug_empty(cls) -> "FgnConfig":
        """A parameterless shell, useful only for accounting tests."""
        return cls(
            rgb_channels=(),
            flow_channels=(),
            branch_pools=(),
            merge_channels=(),
            fc_dims=(),
            num_classes=0,
        )

    def with_frames(self, n_frames: int, frame_size: int | None = None) -> "FgnConfig":
        return replace(
            self,
            n_frames=n_frames,
            frame_size=self.frame_size if frame_size is None else frame_size,
        )


def _clamped_kernel(pool: Pool3, shape: tuple[int, int, int]) -> Pool3:
    return tuple(min(p, s) for p, s in zip(pool, shape))  # type: ignore[return-value]


class ClampedMaxPool3d(nn.Module):
    """Max pooling whose kernel never exceeds the input size."""

    def __init__(self, pool: Pool3) -> None:
        super().__init__()
        self.pool = pool

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        k = _clamped_kernel(self.pool, x.shape[2:])
        if all(v == 1 for v in k):
            return x
        return F.max_pool3d(x, k)

    def extra_repr(self) -> str:
        return f"pool={self.pool}"


class ConvStage(nn.Module):
    """Factorized 3D conv stage: 1x3x3 then 3x1x1, norm, pooling.

    ``terminal`` stages defer their activation to the caller (the branch
    output must be the activation itself so the gate multiply composes
    exactly); interior stages apply ReLU between the convs and the norm.
    """

    def __init__(
        self,
        cin: int,
        cout: int,
        pool: Pool3,
        dropout_p: float = 0.0,
        terminal: bool = False,
    ) -> None:
        super().__init__()
        self.conv_spatial = nn.Conv3d(cin, cout, (1, 3, 3), padding=(0, 1, 1))
        self.conv_temporal = nn.Conv3d(cout, cout, (3, 1, 1), padding=(1, 0, 0))
        self.norm = nn.BatchNorm3d(cout)
        self.pool = ClampedMaxPool3d(pool)
        self.dropout = nn.Dropout3d(dropout_p) if dropout_p > 0 else None
        self.terminal = terminal

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.conv_temporal(self.conv_spatial(x))
        if self.terminal:
            return self.pool(self.norm(x))
        x = self.norm(F.relu(x))
        if self.dropout is not None:
            x = self.dropout(x)
        return self.pool(x)


class Branch(nn.Module):
    """One encoder branch; returns pre-activation features.

    The caller applies the terminating activation (ReLU for RGB, sigmoid
    for flow) so instrumentation and the gate identity stay exact.
    """

    def __init__(self, cin: int, cfg: FgnConfig, channels: tuple[int, ...]) -> None:
        super().__init__()
        stages = []
        prev = cin
        for i, cout in enumerate(channels):
            stages.append(
                ConvStage(
                    prev,
                    cout,
                    cfg.branch_pools[i],
                    dropout_p=cfg.spatial_dropout_p if i < cfg.spatial_dropout_stages else 0.0,
                    terminal=i == len(channels) - 1,
                )
            )
            prev = cout
        self.stages = nn.Sequential(*stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)


class MergeBlock(nn.Module):
    """Conv stages applied to the gated features, before temporal pooling."""

    def __init__(self, cin: int, cfg: FgnConfig) -> None:
        super().__init__()
        stages = []
        prev = cin
        for cout in cfg.merge_channels:
            stages.append(ConvStage(prev, cout, cfg.merge_pool))
            prev = cout
        self.stages = nn.Sequential(*stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(x)


class Classifier(nn.Module):
    def __init__(self, in_features: int, cfg: FgnConfig) -> None:
        super().__init__()
        layers: list[nn.Module] = [nn.Flatten()]
        prev = in_features
        for width in cfg.fc_dims:
            layers += [nn.Linear(prev, width), nn.ReLU(), nn.Dropout(cfg.classifier_dropout_p)]
            prev = width
        if cfg.num_classes > 0:
            layers.append(nn.Linear(prev, cfg.num_classes))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def temporal_max_pool(x: torch.Tensor) -> torch.Tensor:
    """Collapse the temporal axis of (B, C, T, H, W) by max."""
    return torch.amax(x, dim=2, keepdim=True)


class FgnModel(nn.Module):
    """Flow-gated two-stream network.

    Parameter names form four stable groups (``rgb``, ``flow``, ``merge``,
    ``classifier``) that checkpointing and weight transfer address by
    prefix.
    """

    def __init__(self, cfg: FgnConfig) -> None:
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.rgb = Branch(3, cfg, cfg.rgb_channels)
        self.flow = Branch(2, cfg, cfg.flow_channels)
        merge_in = cfg.rgb_channels[-1] if cfg.rgb_channels else 0
        self.merge = MergeBlock(merge_in, cfg)
        self.classifier = Classifier(self.feature_width(keep_temporal_pool=True), cfg)

    # -- shape bookkeeping -------------------------------------------------

    def _branch_out_shape(self) -> tuple[int, int, int, int]:
        cfg = self.config
        t, h, w = cfg.n_frames, cfg.frame_size, cfg.frame_size
        for pool in cfg.branch_pools:
            k = _clamped_kernel(pool, (t, h, w))
            t, h, w = t // k[0], h // k[1], w // k[2]
        c = cfg.rgb_channels[-1] if cfg.rgb_channels else 0
        return c, t, h, w

    def merged_shape(self) -> tuple[int, int, int, int]:
        """(C, T, H, W) of the merging-block output before temporal pooling."""
        cfg = self.config
        c, t, h, w = self._branch_out_shape()
        for cout in cfg.merge_channels:
            k = _clamped_kernel(cfg.merge_pool, (t, h, w))
            t, h, w = t // k[0], h // k[1], w // k[2]
            c = cout
        return c, t, h, w

    def feature_width(self, keep_temporal_pool: bool = False) -> int:
        c, t, h, w = self.merged_shape()
        if keep_temporal_pool:
            t = min(t, self.config.temporal_maxpool_out)
        return c * t * h * w

    # -- forward passes ------------------------------------------------------

    def _check_inputs(self, rgb: torch.Tensor, flow: torch.Tensor) -> None:
        cfg = self.config
        expect_rgb = (3, cfg.n_frames, cfg.frame_size, cfg.frame_size)
        expect_flow = (2,) + expect_rgb[1:]
        if rgb.ndim != 5 or tuple(rgb.shape[1:]) != expect_rgb:
            raise ShapeMismatch(f"rgb shape {tuple(rgb.shape)} != (B,) + {expect_rgb}")
        if flow.ndim != 5 or tuple(flow.shape[1:]) != expect_flow:
            raise ShapeMismatch(f"flow shape {tuple(flow.shape)} != (B,) + {expect_flow}")
        if rgb.shape[0] != flow.shape[0]:
            raise ShapeMismatch("rgb and flow batch sizes differ")

    def gate_merge(
        self,
        rgb: torch.Tensor,
        flow: torch.Tensor,
        gate_logit_override: torch.Tensor | float | None = None,
        capture: dict | None = None,
    ) -> torch.Tensor:
        """Gated fusion: merged = relu(rgb_pre) * sigmoid(flow_pre).

        ``gate_logit_override`` replaces the flow branch's pre-sigmoid
        activations (a test hook for forcing the gate open or closed);
        ``capture`` receives the intermediate operands when provided.
        """
        self._check_inputs(rgb, flow)
        rgb_features = F.relu(self.rgb(rgb))
        flow_pre = self.flow(flow)
        if gate_logit_override is not None:
            if not torch.is_tensor(gate_logit_override):
                gate_logit_override = torch.full_like(flow_pre, float(gate_logit_override))
            flow_pre = gate_logit_override
        gate = torch.sigmoid(flow_pre)
        merged = rgb_features * gate
        if capture is not None:
            capture.update(
                rgb_features=rgb_features,
                flow_pre_sigmoid=flow_pre,
                gate=gate,
                merged=merged,
            )
        return merged

    def forward(
        self,
        rgb: torch.Tensor,
        flow: torch.Tensor,
        gate_logit_override: torch.Tensor | float | None = None,
        capture: dict | None = None,
    ) -> torch.Tensor:
        """Logits of shape (B, num_classes); binary mode emits one logit.

        The sigmoid/softmax link lives in the loss, not here.
        """
        merged = self.gate_merge(rgb, flow, gate_logit_override, capture)
        y = self.merge(merged)
        pooled = temporal_max_pool(y)
        if capture is not None:
            capture.update(merged_features=y, merged_pooled=pooled)
        return self.classifier(pooled)

    def forward_features(
        self, rgb: torch.Tensor, flow: torch.Tensor, keep_temporal_pool: bool = False
    ) -> torch.Tensor:
        """Flattened merging-block output, the representation tap.

        Skipping the temporal max pooling (the default) keeps the temporal
        axis and widens the feature vector eightfold under the default
        configuration (1024 instead of 128).
        """
        merged = self.gate_merge(rgb, flow)
        y = self.merge(merged)
        if keep_temporal_pool:
            y = temporal_max_pool(y)
        return y.flatten(1)


def _init_parameters(model: nn.Module) -> None:
    # Signal-preserving init: the default conv init shrinks activations
    # stage over stage, which leaves eval-mode batch norm (running stats
    # still at unit variance) washing out sample differences early in
    # training.
    for module in model.modules():
        if isinstance(module, nn.Conv3d):
            nn.init.kaiming_normal_(module.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(module.bias)


def build_fgn(cfg: FgnConfig, seed: int = 0) -> FgnModel:
    """Construct a model with deterministic initialization for a seed."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = FgnModel(cfg)
        _init_parameters(model)
    return model


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------


def count_params(model: nn.Module) -> int:
    """Exact number of learnable parameter elements."""
    return sum(p.numel() for p in model.parameters())


def parameter_groups(model: FgnModel) -> dict[str, list[str]]:
    """Stable name groups used by checkpoints and weight transfer."""
    groups: dict[str, list[str]] = {}
    for name in model.state_dict():
        groups.setdefault(name.split(".", 1)[0], []).append(name)
    return groups


def count_macs(
    model: FgnModel,
    n_frames: int | None = None,
    frame_size: int | None = None,
    batch_size: int = 1,
    ops_per_mac: int = 1,
) -> int:
    """Multiply-accumulate count for one sample's forward pass.

    Convolutions and linear layers are counted; normalization, activation,
    pooling, and the gate multiply are ignored.  ``ops_per_mac=1`` counts a
    fused multiply-add as one operation; ``ops_per_mac=2`` counts the
    multiply and the accumulate separately (the FLOPs-style convention some
    published figures use).  The count is measured by instrumenting an
    actual forward pass, so it reflects the code, not a formula.
    """
    cfg = model.config
    n = cfg.n_frames if n_frames is None else n_frames
    s = cfg.frame_size if frame_size is None else frame_size
    target = model
    if cfg.n_frames != n or cfg.frame_size != s:
        # Weights are irrelevant to the count; rebuild at the probed size
        # so the classifier input width stays consistent.  fork_rng keeps
        # the probe construction from disturbing the caller's RNG state.
        with torch.random.fork_rng():
            target = FgnModel(replace(cfg, n_frames=n, frame_size=s))
    total = 0

    def conv_hook(module: nn.Conv3d, inputs, output) -> None:
        nonlocal total
        kernel = int(torch.tensor(module.kernel_size).prod())
        per_pos = (module.in_channels // module.groups) * kernel
        total += output.numel() * per_pos

    def linear_hook(module: nn.Linear, inputs, output) -> None:
        nonlocal total
        total += output.numel() * module.in_features

    handles = []
    for mod in target.modules():
        if isinstance(mod, nn.Conv3d):
            handles.append(mod.register_forward_hook(conv_hook))
        elif isinstance(mod, nn.Linear):
            handles.append(mod.register_forward_hook(linear_hook))
    was_training = target.training
    target.eval()
    try:
        with torch.no_grad():
            rgb = torch.zeros(batch_size, 3, n, s, s)
            flow = torch.zeros(batch_size, 2, n, s, s)
            target(rgb, flow)
    finally:
        for h in handles:
            h.remove()
        target.train(was_training)
    return ops_per_mac * total // batch_size
