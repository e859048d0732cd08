"""Variance-invariance-covariance regularization for the two-stream model.

The self-supervised auxiliary model feeds an RGB view and a flow view
through their own encoders (distinct architectures, distinct weights),
then through a shared merging block with the temporal max pooling removed,
and finally through a shared expander.  The loss couples the two embedding
batches with three terms:

    total = lam * s(Z, Z') + mu * [v(Z) + v(Z')] + nu * [c(Z) + c(Z')]

where ``s`` is the mean squared pair distance, ``v`` a per-dimension
standard-deviation hinge, and ``c`` the mean squared off-diagonal of the
covariance matrix.  All terms are computed in float64; the covariance term
goes through the n-by-n Gram matrix, so embeddings of dimension 8192 never
materialize a d-by-d matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DimMismatch, FlowgateError, ShapeMismatch
from .model import FgnModel, temporal_max_pool


class BatchTooSmall(FlowgateError):
    """Variance and covariance need at least two samples."""


@dataclass(frozen=True)
class VicregWeights:
    """Loss weights plus the variance-hinge constants.

    ``gamma`` is the target standard deviation and ``eps`` the regularizer
    inside the square root; both follow the original formulation of the
    regularizer and are exposed for ablations.
    """

    lam: float = 25.0
    mu: float = 25.0
    nu: float = 1.0
    gamma: float = 1.0
    eps: float = 1e-4

    def __post_init__(self) -> None:
        if min(self.lam, self.mu, self.nu) < 0 or self.gamma <= 0 or self.eps <= 0:
            raise ValueError("weights must be non-negative, gamma and eps positive")


def _as_2d(z: torch.Tensor | np.ndarray, name: str = "Z") -> torch.Tensor:
    t = torch.as_tensor(z)
    if t.ndim != 2:
        raise ShapeMismatch(f"{name} must be (n, d), got {tuple(t.shape)}")
    return t.double()


def variance_term(z: torch.Tensor | np.ndarray, weights: VicregWeights = VicregWeights()) -> torch.Tensor:
    """Hinge on the per-dimension batch standard deviation.

    v(Z) = mean_j max(0, gamma - sqrt(Var_j + eps)) with the unbiased
    (n - 1) variance over the batch dimension.
    """
    zt = _as_2d(z)
    n = zt.shape[0]
    if n < 2:
        raise BatchTooSmall(f"variance needs n >= 2, got {n}")
    var = zt.var(dim=0, unbiased=True)
    std = torch.sqrt(var + weights.eps)
    return torch.clamp(weights.gamma - std, min=0.0).mean()


def invariance_term(z: torch.Tensor | np.ndarray, z_prime: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Mean squared Euclidean distance between paired embeddings."""
    zt, zp = _as_2d(z), _as_2d(z_prime, "Z'")
    if zt.shape != zp.shape:
        raise ShapeMismatch(f"shapes differ: {tuple(zt.shape)} vs {tuple(zp.shape)}")
    return ((zt - zp) ** 2).sum(dim=1).mean()


def covariance_term(z: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Mean squared off-diagonal entry of the batch covariance matrix.

    c(Z) = (1/d) * sum_{i != j} C_ij^2 with C = Zc^T Zc / (n - 1).
    Computed through the n-by-n Gram matrix:
    ||C||_F^2 = ||Zc Zc^T||_F^2 / (n - 1)^2.
    """
    zt = _as_2d(z)
    n, d = zt.shape
    if n < 2:
        raise BatchTooSmall(f"covariance needs n >= 2, got {n}")
    zc = zt - zt.mean(dim=0, keepdim=True)
    gram = zc @ zc.T
    frob_sq = (gram * gram).sum() / (n - 1) ** 2
    diag = (zc * zc).sum(dim=0) / (n - 1)
    return (frob_sq - (diag * diag).sum()) / d


@dataclass
class LossBreakdown:
    """The three loss components and their weighted total.

    Components are torch scalars and stay attached to the computation
    graph; ``as_dict`` detaches to plain floats for logging.
    """

    invariance: torch.Tensor
    variance: torch.Tensor
    covariance: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {
            "invariance": float(self.invariance.detach()),
            "variance": float(self.variance.detach()),
            "covariance": float(self.covariance.detach()),
            "total": float(self.total.detach()),
        }


def vicreg_loss(
    z: torch.Tensor | np.ndarray,
    z_prime: torch.Tensor | np.ndarray,
    weights: VicregWeights = VicregWeights(),
) -> LossBreakdown:
    """Full three-term loss over two embedding batches.

    Differentiable with respect to both batches; raises ``ShapeMismatch``
    or ``BatchTooSmall`` like the individual terms.
    """
    s = invariance_term(z, z_prime)
    v = variance_term(z, weights) + variance_term(z_prime, weights)
    c = covariance_term(z) + covariance_term(z_prime)
    total = weights.lam * s + weights.mu * v + weights.nu * c
    return LossBreakdown(invariance=s, variance=v, covariance=c, total=total)


# ---------------------------------------------------------------------------
# Auxiliary model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpanderConfig:
    """Projection head widths: three linear layers, norm + ReLU on the
    first two, a bare affine map last."""

    input_dim: int = 1024
    hidden_dims: tuple[int, ...] = (8192, 8192, 8192)

    def __post_init__(self) -> None:
        if self.input_dim < 1 or not self.hidden_dims:
            raise ValueError("expander needs a positive input dim and hidden layers")


def build_expander(cfg: ExpanderConfig) -> nn.Sequential:
    layers: list[nn.Module] = []
    prev = cfg.input_dim
    for i, width in enumerate(cfg.hidden_dims):
        layers.append(nn.Linear(prev, width))
        if i < len(cfg.hidden_dims) - 1:
            layers += [nn.BatchNorm1d(width), nn.ReLU()]
        prev = width
    return nn.Sequential(*layers)


class VicregModel(nn.Module):
    """Dual-encoder joint embedding model over one segment pair.

    The RGB and flow encoders are the primary model's branches (not
    weight-tied with each other); the merging block and the expander are
    shared between the two paths.  Keeping the submodule names ``rgb``,
    ``flow``, and ``merge`` identical to the primary model makes the
    pretrained weights name-compatible for transfer.
    """

    def __init__(
        self,
        fgn: FgnModel,
        expander_cfg: ExpanderConfig,
        keep_temporal_pool: bool = False,
    ) -> None:
        super().__init__()
        width = fgn.feature_width(keep_temporal_pool=keep_temporal_pool)
        if width != expander_cfg.input_dim:
            raise DimMismatch(
                f"expander input_dim {expander_cfg.input_dim} != representation width {width}"
            )
        self.config = fgn.config
        self.expander_config = expander_cfg
        self.keep_temporal_pool = keep_temporal_pool
        self.rgb = fgn.rgb
        self.flow = fgn.flow
        self.merge = fgn.merge
        self.expander = build_expander(expander_cfg)

    def _represent(self, features: torch.Tensor) -> torch.Tensor:
        y = self.merge(features)
        if self.keep_temporal_pool:
            y = temporal_max_pool(y)
        return y.flatten(1)

    def embed_rgb(self, x: torch.Tensor) -> torch.Tensor:
        return self.expander(self._represent(torch.relu(self.rgb(x))))

    def embed_flow(self, x: torch.Tensor) -> torch.Tensor:
        return self.expander(self._represent(torch.sigmoid(self.flow(x))))

    def forward(self, x: torch.Tensor, x_prime: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Embeddings (Z, Z') for an RGB view batch and a flow view batch."""
        return self.embed_rgb(x), self.embed_flow(x_prime)


def build_ssl_model(
    fgn: FgnModel,
    expander_cfg: ExpanderConfig | None = None,
    keep_temporal_pool: bool = False,
    seed: int = 0,
) -> VicregModel:
    """Wire the auxiliary model around an existing primary model.

    The branches and merging block are shared tensors with ``fgn``; only
    the expander is new, and its initialization is seeded so repeated
    builds are identical.  ``keep_temporal_pool=True`` is the narrow-
    bottleneck ablation (representation width 128 instead of 1024 under
    the default configuration).
    """
    if expander_cfg is None:
        expander_cfg = ExpanderConfig(
            input_dim=fgn.feature_width(keep_temporal_pool=keep_temporal_pool)
        )
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return VicregModel(fgn, expander_cfg, keep_temporal_pool=keep_temporal_pool)


# ---------------------------------------------------------------------------
# Collapse diagnostics
# ---------------------------------------------------------------------------


@dataclass
class CollapseDiagnostics:
    std_min: float
    std_mean: float
    std_max: float
    mean_offdiag_abs_cov: float
    rank: int

    def as_dict(self) -> dict[str, float | int]:
        return {
            "std_min": self.std_min,
            "std_mean": self.std_mean,
            "std_max": self.std_max,
            "mean_offdiag_abs_cov": self.mean_offdiag_abs_cov,
            "rank": self.rank,
        }


def collapse_diagnostics(
    z: torch.Tensor | np.ndarray, max_dims: int | None = None
) -> CollapseDiagnostics:
    """Summary statistics that expose embedding collapse.

    ``max_dims`` caps the dimensions used for the off-diagonal covariance
    average (an evenly strided subset), keeping the diagnostic cheap for
    wide embeddings.  Per-dimension stds and the rank estimate always use
    the full matrix.
    """
    with torch.no_grad():
        zt = _as_2d(z).cpu()
    arr = zt.numpy()
    n, d = arr.shape
    if n < 2:
        raise BatchTooSmall(f"diagnostics need n >= 2, got {n}")
    std = arr.std(axis=0, ddof=1)
    centered = arr - arr.mean(axis=0, keepdims=True)
    rank = int(np.linalg.matrix_rank(centered)) if np.any(centered) else 0
    cols = np.arange(d)
    if max_dims is not None and d > max_dims:
        cols = np.linspace(0, d - 1, max_dims).astype(np.int64)
    sub = centered[:, cols]
    cov = sub.T @ sub / (n - 1)
    k = cov.shape[0]
    off = np.abs(cov).sum() - np.abs(np.diag(cov)).sum()
    mean_off = float(off / (k * (k - 1))) if k > 1 else 0.0
    return CollapseDiagnostics(
        std_min=float(std.min()),
        std_mean=float(std.mean()),
        std_max=float(std.max()),
        mean_offdiag_abs_cov=mean_off,
        rank=rank,
    )
