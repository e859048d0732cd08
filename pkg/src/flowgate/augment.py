"""Stochastic view generation for training and self-supervised pretraining.

Every augmentation draws its randomness once per segment and applies the
same transform to all frames, preserving the temporal structure the 3D
convolutions rely on.  Parameter drawing is separated from application so
tests can pin parameters directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .data import SegmentPair
from .flowroi import LUMA_WEIGHTS, bicubic_resize


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation knobs for both the supervised and SSL pipelines.

    ``jitter_range`` bounds the photometric factors: brightness, contrast,
    and saturation multiply by values in ``[1 - r, 1 + r]`` and hue shifts
    additively by up to ``r`` in normalized hue units.  ``zoom_scale`` is
    the area fraction range of the aggressive SSL crop.  On a horizontal
    flip the flow x-channel is negated (a mirrored scene has mirrored
    x-displacements); ``flip_negates_flow_x`` toggles that.
    """

    jitter_range: float = 0.2
    jitter_prob: float = 0.5
    flip_prob: float = 0.5
    zoom_scale: tuple[float, float] = (0.08, 0.1)
    zoom_aspect: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    mode: str = "primary"
    flip_negates_flow_x: bool = True

    def __post_init__(self) -> None:
        for p in (self.jitter_prob, self.flip_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        lo, hi = self.zoom_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("zoom_scale must be a sub-interval of (0, 1]")
        if self.mode not in ("primary", "ssl"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class JitterParams:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0


def draw_jitter_params(rng: np.random.Generator, cfg: AugmentConfig) -> JitterParams | None:
    """One photometric draw per segment; None means the skip branch."""
    apply = rng.random() < cfg.jitter_prob
    r = cfg.jitter_range
    factors = rng.uniform(1.0 - r, 1.0 + r, 3)
    hue = rng.uniform(-r, r)
    if not apply:
        return None
    return JitterParams(
        brightness=float(factors[0]),
        contrast=float(factors[1]),
        saturation=float(factors[2]),
        hue=float(hue),
    )


def apply_jitter(rgb: np.ndarray, params: JitterParams) -> np.ndarray:
    """Apply brightness, contrast, saturation, then hue to a (3, N, H, W) segment.

    Contrast blends toward the segment's mean luma, saturation toward the
    per-pixel luma.  Values are clamped to [0, 1] before the hue rotation
    (the HSV conversion needs a valid gamut) and the output stays in [0, 1].
    """
    x = rgb.astype(np.float32, copy=True)
    x *= params.brightness
    luma = np.tensordot(LUMA_WEIGHTS, x, axes=1)
    x = (x - luma.mean()) * params.contrast + luma.mean()
    x = (x - luma[None]) * params.saturation + luma[None]
    x = np.clip(x, 0.0, 1.0)
    if params.hue != 0.0:
        hsv = rgb_to_hsv(x.transpose(1, 2, 3, 0))
        hsv[..., 0] = (hsv[..., 0] + params.hue) % 1.0
        x = hsv_to_rgb(hsv).transpose(3, 0, 1, 2).astype(np.float32)
    return np.clip(x, 0.0, 1.0)


def color_jitter(rgb: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    params = draw_jitter_params(rng, cfg)
    if params is None:
        return rgb.astype(np.float32, copy=True)
    return apply_jitter(rgb, params)


def hflip_rgb(rgb: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(rgb[..., ::-1])


def hflip_flow(flow: np.ndarray, negate_x: bool = True) -> np.ndarray:
    flipped = np.ascontiguousarray(flow[..., ::-1])
    if negate_x:
        flipped[0] = -flipped[0]
    return flipped


def random_flip_pair(
    rgb: np.ndarray, flow: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Flip both streams together with probability ``flip_prob``."""
    if rng.random() < cfg.flip_prob:
        return hflip_rgb(rgb), hflip_flow(flow, cfg.flip_negates_flow_x)
    return rgb, flow


def draw_zoom_params(
    rng: np.random.Generator, cfg: AugmentConfig, height: int, width: int
) -> tuple[int, int, int, int]:
    """Crop rectangle (y0, x0, crop_h, crop_w) for the zoom crop.

    Area fraction is uniform on ``zoom_scale``; aspect ratio is
    log-uniform on ``zoom_aspect``; the rectangle is placed uniformly
    inside the frame.
    """
    area = rng.uniform(*cfg.zoom_scale) * height * width
    log_lo, log_hi = np.log(cfg.zoom_aspect[0]), np.log(cfg.zoom_aspect[1])
    aspect = float(np.exp(rng.uniform(log_lo, log_hi)))
    crop_w = int(np.clip(round(np.sqrt(area * aspect)), 1, width))
    crop_h = int(np.clip(round(np.sqrt(area / aspect)), 1, height))
    x0 = int(rng.integers(0, width - crop_w + 1))
    y0 = int(rng.integers(0, height - crop_h + 1))
    return y0, x0, crop_h, crop_w


def zoom_crop(rgb: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Aggressive random crop applied identically to every frame.

    One small rectangle per segment is cut out and resized back to the
    full resolution with bicubic interpolation.
    """
    _, n, h, w = rgb.shape
    y0, x0, ch, cw = draw_zoom_params(rng, cfg, h, w)
    out = np.empty_like(rgb, dtype=np.float32)
    for i in range(n):
        for c in range(rgb.shape[0]):
            out[c, i] = bicubic_resize(rgb[c, i, y0 : y0 + ch, x0 : x0 + cw], h, w)
    return out


def standardize(segment: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Zero-mean, unit-variance normalization per channel over the segment.

    Moments are taken in float64 so a constant channel maps to exact zeros
    instead of eps-amplified rounding residue.
    """
    x = segment.astype(np.float64)
    axes = tuple(range(1, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    std = x.std(axis=axes, keepdims=True)
    return ((x - mean) / (std + eps)).astype(np.float32)


def make_ssl_views(
    pair: SegmentPair, rng: np.random.Generator, cfg: AugmentConfig | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Build the two self-supervised views of one segment pair.

    The RGB view gets the photometric jitter plus the zoom crop; the flow
    view is only flipped horizontally (with x-negation).  Both are
    standardized.  All draws come from ``rng`` in a fixed order, so one
    seed reproduces the views bit-exactly.
    """
    cfg = cfg or AugmentConfig(mode="ssl")
    x = color_jitter(pair.rgb, rng, cfg)
    x = zoom_crop(x, rng, cfg)
    x = standardize(x)
    flow = pair.flow
    if rng.random() < cfg.flip_prob:
        flow = hflip_flow(flow, cfg.flip_negates_flow_x)
    x_prime = standardize(flow)
    return x, x_prime


def augment_primary(
    pair: SegmentPair, rng: np.random.Generator, cfg: AugmentConfig | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Training-time augmentation for the supervised model.

    Photometric jitter on RGB, a joint horizontal flip of both streams,
    then per-stream standardization.  The RGB stream is never re-cropped;
    the ROI extraction upstream already decided the view.
    """
    cfg = cfg or AugmentConfig(mode="primary")
    rgb = color_jitter(pair.rgb, rng, cfg)
    rgb, flow = random_flip_pair(rgb, pair.flow, rng, cfg)
    return standardize(rgb), standardize(flow)


def standardize_pair(pair: SegmentPair) -> tuple[np.ndarray, np.ndarray]:
    """Evaluation-time path: standardization only, no stochastic transforms."""
    return standardize(pair.rgb), standardize(pair.flow)
