"""Dense optical flow, motion-intensity maps, and ROI extraction.

The preprocessing path for one raw segment is:

    frames -> Farneback flow per consecutive pair
           -> per-frame normalized magnitudes, summed into an intensity map
           -> probabilistic ROI center from the map's x/y marginals
           -> half-size patch around the center, bicubically upsampled

Flow computation is pluggable: every downstream operation takes plain
arrays, so tests can inject synthetic flow fields and never depend on
Farneback output quality.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import cv2
import numpy as np

from .data import RawSegment, SegmentPair
from .errors import DimMismatch, FlowgateError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class NoMotion(FlowgateError):
    """Intensity map is identically zero; caller should fall back to center."""


@dataclass(frozen=True)
class FarnebackParams:
    """Parameters for OpenCV's dense polynomial-expansion flow."""

    pyr_scale: float = 0.5
    levels: int = 3
    winsize: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.2

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.winsize % 2 == 0:
            raise ValueError("winsize must be odd")

    @property
    def border_margin(self) -> int:
        # Polynomial expansion is undefined near the image border; the
        # invalid margin grows with the pyramid downscale factor.
        return (self.poly_n // 2) * (2 ** (self.levels - 1))


@dataclass
class FlowField:
    """Dense displacement field, channel 0 = x, channel 1 = y, in pixels."""

    data: np.ndarray  # (2, H, W) float32

    def __post_init__(self) -> None:
        if self.data.ndim != 3 or self.data.shape[0] != 2:
            raise ValueError("flow field must have shape (2, H, W)")


@dataclass
class IntensityMap:
    """Non-negative motion-intensity field, thresholded at its own mean."""

    data: np.ndarray  # (H, W), entries are 0 or >= threshold
    threshold: float


@dataclass(frozen=True)
class RoiCenter:
    cx: float
    cy: float


def to_grayscale(frame: np.ndarray) -> np.ndarray:
    """Collapse an RGB frame (3, H, W) to luma; pass (H, W) through."""
    if frame.ndim == 2:
        return frame.astype(np.float32, copy=False)
    if frame.ndim == 3 and frame.shape[0] == 3:
        return np.tensordot(LUMA_WEIGHTS, frame.astype(np.float32, copy=False), axes=1)
    raise DimMismatch(f"expected (H, W) or (3, H, W) frame, got {frame.shape}")


def farneback_flow(
    prev: np.ndarray, nxt: np.ndarray, params: FarnebackParams = FarnebackParams()
) -> FlowField:
    """Dense flow between two frames via Farneback's algorithm.

    Inputs may be grayscale or RGB in [0, 1]; they are converted to luma
    and scaled to the 8-bit range OpenCV's tuning assumes.  The outermost
    ``params.border_margin`` pixels are replaced by edge replication of
    the valid interior, since the polynomial expansion is unreliable there.
    """
    g_prev = to_grayscale(prev)
    g_next = to_grayscale(nxt)
    if g_prev.shape != g_next.shape:
        raise DimMismatch(f"frame shapes differ: {g_prev.shape} vs {g_next.shape}")
    raw = cv2.calcOpticalFlowFarneback(
        g_prev * 255.0,
        g_next * 255.0,
        None,
        params.pyr_scale,
        params.levels,
        params.winsize,
        params.iterations,
        params.poly_n,
        params.poly_sigma,
        0,
    )
    flow = raw.transpose(2, 0, 1).astype(np.float32)
    m = params.border_margin
    if m > 0 and min(flow.shape[1:]) > 2 * m:
        inner = flow[:, m:-m, m:-m]
        flow = np.pad(inner, ((0, 0), (m, m), (m, m)), mode="edge")
    return FlowField(data=np.ascontiguousarray(flow))


def compute_flow_segment(
    raw: RawSegment, params: FarnebackParams = FarnebackParams()
) -> np.ndarray:
    """Flow tensor (2, N, H, W): slot i holds flow(frame_i, frame_{i+1})."""
    n = raw.n_frames
    h, w = raw.frames.shape[-2:]
    out = np.empty((2, n, h, w), dtype=np.float32)
    for i in range(n):
        out[:, i] = farneback_flow(raw.frames[i], raw.frames[i + 1], params).data
    return out


def motion_intensity_map(flow: np.ndarray, eps: float = 1e-8) -> IntensityMap:
    """Summed, denoised flow magnitudes thresholded at their mean.

    Per frame and per component the flow is normalized to zero mean and
    unit variance (eps-guarded), re-centered, and reduced to a magnitude
    image; magnitudes are summed over frames and entries below the mean of
    the summed map are zeroed.  The threshold is not recomputed after
    zeroing.
    """
    if flow.ndim != 4 or flow.shape[0] != 2:
        raise DimMismatch(f"expected flow (2, N, H, W), got {flow.shape}")
    flow64 = flow.astype(np.float64)
    n = flow.shape[1]
    mags = np.empty((n,) + flow.shape[-2:], dtype=np.float64)
    for i in range(n):
        frame = flow64[:, i]
        mean = frame.mean(axis=(1, 2), keepdims=True)
        std = frame.std(axis=(1, 2), keepdims=True)
        norm = (frame - mean) / (std + eps)
        norm = norm - norm.mean(axis=(1, 2), keepdims=True)
        mags[i] = np.sqrt(norm[0] ** 2 + norm[1] ** 2)
    # Per-pixel sort before summation makes the reduction a function of the
    # multiset of frames, so any frame permutation gives bit-identical maps.
    mags.sort(axis=0)
    total = mags.sum(axis=0)
    threshold = float(total.mean())
    total[total < threshold] = 0.0
    return IntensityMap(data=total.astype(np.float32), threshold=threshold)


def sample_roi_center(
    intensity: IntensityMap, rng: np.random.Generator, n_candidates: int = 10
) -> RoiCenter:
    """Average of candidate points drawn from the map's x/y marginals.

    The marginal densities are the normalized column and row sums of the
    intensity map; ``n_candidates`` (x, y) pairs are drawn independently
    from the two marginals and averaged.  Raises ``NoMotion`` on an
    identically zero map.
    """
    data = intensity.data.astype(np.float64)
    mass = data.sum()
    if mass <= 0.0:
        raise NoMotion("intensity map has no positive entries")
    px = data.sum(axis=0) / mass
    py = data.sum(axis=1) / mass
    xs = rng.choice(data.shape[1], size=n_candidates, p=px)
    ys = rng.choice(data.shape[0], size=n_candidates, p=py)
    return RoiCenter(cx=float(xs.mean()), cy=float(ys.mean()))


def center_fallback(height: int, width: int) -> RoiCenter:
    """Frame-center ROI used when a segment shows no motion at all."""
    return RoiCenter(cx=width / 2.0, cy=height / 2.0)


def bicubic_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Catmull-Rom bicubic resize of one (H, W) image."""
    return cv2.resize(
        image.astype(np.float32, copy=False), (out_w, out_h), interpolation=cv2.INTER_CUBIC
    )


def extract_roi(rgb: np.ndarray, center: RoiCenter) -> np.ndarray:
    """Crop a half-size patch around ``center`` and upsample it back.

    The patch is clamped so it never leaves the frame; each frame is
    upsampled bicubically to the original resolution.  Output shape equals
    the input shape regardless of the center.
    """
    if rgb.ndim != 4 or rgb.shape[0] != 3:
        raise DimMismatch(f"expected rgb (3, N, H, W), got {rgb.shape}")
    _, n, h, w = rgb.shape
    ph, pw = h // 2, w // 2
    x0 = int(np.clip(round(center.cx - pw / 2), 0, w - pw))
    y0 = int(np.clip(round(center.cy - ph / 2), 0, h - ph))
    out = np.empty_like(rgb)
    for i in range(n):
        for c in range(3):
            patch = rgb[c, i, y0 : y0 + ph, x0 : x0 + pw]
            out[c, i] = bicubic_resize(patch, h, w)
    return out


# ---------------------------------------------------------------------------
# Segment preprocessing
# ---------------------------------------------------------------------------

FlowFn = Callable[[RawSegment], np.ndarray]


def build_segment_pair(
    raw: RawSegment,
    rng: np.random.Generator,
    params: FarnebackParams = FarnebackParams(),
    apply_roi: bool = True,
    label: int | None = None,
    flow_fn: FlowFn | None = None,
) -> SegmentPair:
    """Run the full preprocessing path for one raw segment.

    ``flow_fn`` overrides Farneback for tests.  With ``apply_roi`` the RGB
    stream is replaced by the upsampled motion ROI; the flow stream is
    always kept at full frame.  A zero-motion segment silently falls back
    to the frame-center crop.
    """
    flow = flow_fn(raw) if flow_fn is not None else compute_flow_segment(raw, params)
    rgb = np.ascontiguousarray(raw.frames[:-1].transpose(1, 0, 2, 3))
    if apply_roi:
        intensity = motion_intensity_map(flow)
        try:
            center = sample_roi_center(intensity, rng)
        except NoMotion:
            center = center_fallback(*rgb.shape[-2:])
        rgb = extract_roi(rgb, center)
    return SegmentPair(
        rgb=rgb,
        flow=flow,
        label=label,
        source_id=raw.source_id,
        start_time=raw.start_time,
    )
