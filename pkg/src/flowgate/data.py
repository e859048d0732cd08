"""Video ingestion, segment sampling, synthetic clips, and tensor storage.

Clips are plain ``(frames, fps)`` pairs where ``frames`` is a float32 array
of shape ``(F, 3, H, W)`` with values in ``[0, 1]``.  Segments cut from a
clip keep one extra trailing frame so that every retained frame has a
consecutive partner for optical flow.

The binary tensor container defined here (magic ``JOSE``) is the on-disk
format for preprocessed segments and model checkpoints.  It is bit-exact:
``read_tensor(write_tensor(t)) == t`` for any finite float32 payload.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence, TypeVar

import cv2
import numpy as np

from .errors import FlowgateError

# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class VideoTooShort(FlowgateError):
    """Clip yields fewer resampled frames than one segment needs."""


class UnsupportedRate(FlowgateError):
    """Native frame rate is below the target sampling rate."""


class BadMagic(FlowgateError):
    """Tensor file does not start with the container magic."""


class UnsupportedVersion(FlowgateError):
    """Container or manifest version is not understood."""


class TruncatedPayload(FlowgateError):
    """Tensor payload length does not match the header shape."""


class EmptyDataset(FlowgateError):
    """Dataset root contains no usable entries."""


class UnknownLayout(FlowgateError):
    """Dataset root does not follow the split/class/clip layout."""


# ---------------------------------------------------------------------------
# Sampling configuration and segment types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingConfig:
    """Sliding-window segment sampling parameters.

    ``n_frames`` frames per segment are retained at ``target_fps``; one
    extra raw frame is kept so each retained frame has a consecutive
    successor for flow computation.  ``stride`` is measured in resampled
    frames between window starts and defaults to ``n_frames``
    (non-overlapping windows).
    """

    n_frames: int = 16
    target_fps: float = 7.5
    stride: int | None = None

    def __post_init__(self) -> None:
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.target_fps <= 0:
            raise ValueError("target_fps must be positive")
        if self.stride is not None and self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def raw_frames_per_segment(self) -> int:
        return self.n_frames + 1

    @property
    def effective_stride(self) -> int:
        return self.n_frames if self.stride is None else self.stride

    @property
    def temporal_footprint(self) -> float:
        """Wall-clock span of one segment in seconds."""
        return self.n_frames / self.target_fps


@dataclass
class RawSegment:
    """One window of ``n_frames + 1`` consecutive resampled frames."""

    frames: np.ndarray  # (n_frames + 1, 3, H, W) float32 in [0, 1]
    source_id: str
    start_time: float

    def __post_init__(self) -> None:
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError("frames must have shape (F, 3, H, W)")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0] - 1


@dataclass
class SegmentPair:
    """Aligned RGB and optical-flow segment, the unit the models consume."""

    rgb: np.ndarray  # (3, N, H, W) float32
    flow: np.ndarray  # (2, N, H, W) float32
    label: int | None = None
    source_id: str = ""
    start_time: float = 0.0

    def __post_init__(self) -> None:
        if self.rgb.shape[0] != 3 or self.flow.shape[0] != 2:
            raise ValueError("rgb must be (3, N, H, W) and flow (2, N, H, W)")
        if self.rgb.shape[1] != self.flow.shape[1]:
            raise ValueError("rgb and flow must share the temporal dimension")


def resample_indices(n_native: int, native_fps: float, target_fps: float) -> np.ndarray:
    """Source indices selected when resampling ``native_fps`` to ``target_fps``.

    Nearest-index selection without temporal interpolation: the resampled
    stream has ``floor(n_native * target_fps / native_fps)`` frames and
    frame ``k`` maps to source index ``round(k * native_fps / target_fps)``.
    """
    if native_fps < target_fps:
        raise UnsupportedRate(
            f"native fps {native_fps} is below target fps {target_fps}"
        )
    n_resampled = int(np.floor(n_native * target_fps / native_fps))
    ratio = native_fps / target_fps
    idx = np.floor(np.arange(n_resampled) * ratio + 0.5).astype(np.int64)
    return np.minimum(idx, n_native - 1)


def sample_segments(
    frames: np.ndarray, native_fps: float, cfg: SamplingConfig, source_id: str = ""
) -> list[RawSegment]:
    """Cut sliding-window segments from a decoded clip.

    Raises ``VideoTooShort`` when the resampled stream has fewer than
    ``n_frames + 1`` frames, and ``UnsupportedRate`` when the clip's
    native rate is below the target rate.
    """
    idx = resample_indices(frames.shape[0], native_fps, cfg.target_fps)
    need = cfg.raw_frames_per_segment
    if len(idx) < need:
        raise VideoTooShort(
            f"{len(idx)} resampled frames < {need} needed for one segment"
        )
    segments = []
    start = 0
    while start + need <= len(idx):
        window = frames[idx[start : start + need]]
        segments.append(
            RawSegment(
                frames=np.ascontiguousarray(window),
                source_id=source_id,
                start_time=start / cfg.target_fps,
            )
        )
        start += cfg.effective_stride
    return segments


def resize_frames(frames: np.ndarray, size: int) -> np.ndarray:
    """Resize every frame of a clip to ``size x size`` (area interpolation)."""
    if frames.shape[-1] == size and frames.shape[-2] == size:
        return frames
    out = np.empty(frames.shape[:2] + (size, size), dtype=np.float32)
    for i, frame in enumerate(frames):
        for c in range(frame.shape[0]):
            out[i, c] = cv2.resize(frame[c], (size, size), interpolation=cv2.INTER_AREA)
    return out


# ---------------------------------------------------------------------------
# Synthetic clips
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticClipSpec:
    """Parameters for the synthetic motion/static clip generator.

    ``kind`` is ``"motion"`` (one or two bright blobs drifting over a
    smooth textured background) or ``"static"`` (the same background with
    sub-pixel sensor jitter only).  Blob geometry scales with
    ``frame_size`` so the two classes stay separable at any resolution.
    """

    kind: str
    duration_s: float = 5.0
    fps: float = 30.0
    frame_size: int = 224
    blob_amp: float = 0.6
    blob_sigma_frac: float = 1.0 / 14.0
    blob_speed_frac: float = 1.0 / 28.0
    noise_sigma: float = 0.0005

    def __post_init__(self) -> None:
        if self.kind not in ("motion", "static"):
            raise ValueError(f"unknown clip kind {self.kind!r}")
        if self.duration_s * self.fps < 3:
            raise ValueError("clip too short")


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    cells = max(4, size // 16)
    coarse = rng.random((cells, cells)).astype(np.float32)
    bg = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    bg = 0.25 + 0.5 * np.clip(bg, 0.0, 1.0)
    tint = np.array([1.0, 0.95, 0.9], dtype=np.float32)
    return bg[None] * tint[:, None, None]


def _blob_image(size: int, cx: float, cy: float, sigma: float, amp: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    g = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma**2))
    tint = np.array([1.0, 0.75, 0.55], dtype=np.float32)
    return amp * g[None] * tint[:, None, None]


def generate_synthetic_clip(spec: SyntheticClipSpec, seed: int) -> np.ndarray:
    """Render a deterministic synthetic clip, shape ``(F, 3, H, W)``.

    The same ``(spec, seed)`` always produces bit-identical frames.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC11F]))
    size = spec.frame_size
    n = int(round(spec.duration_s * spec.fps))
    bg = _smooth_background(rng, size)
    frames = np.empty((n, 3, size, size), dtype=np.float32)

    if spec.kind == "static":
        for i in range(n):
            noise = rng.normal(0.0, spec.noise_sigma, (3, size, size)).astype(np.float32)
            frames[i] = np.clip(bg + noise, 0.0, 1.0)
        return frames

    n_blobs = int(rng.integers(1, 3))
    sigma = size * spec.blob_sigma_frac
    speed = size * spec.blob_speed_frac
    pos = rng.uniform(size * 0.3, size * 0.7, (n_blobs, 2)).astype(np.float32)
    theta = rng.uniform(0.0, 2.0 * np.pi, n_blobs)
    vel = (np.stack([np.cos(theta), np.sin(theta)], axis=1) * speed).astype(np.float32)
    lo, hi = sigma, size - 1.0 - sigma
    for i in range(n):
        frame = bg.copy()
        for b in range(n_blobs):
            frame = frame + _blob_image(size, pos[b, 0], pos[b, 1], sigma, spec.blob_amp)
            pos[b] += vel[b] + rng.normal(0.0, speed / 3.0, 2).astype(np.float32)
            for axis in range(2):
                if pos[b, axis] < lo:
                    pos[b, axis] = 2.0 * lo - pos[b, axis]
                    vel[b, axis] *= -1.0
                elif pos[b, axis] > hi:
                    pos[b, axis] = 2.0 * hi - pos[b, axis]
                    vel[b, axis] *= -1.0
        noise = rng.normal(0.0, spec.noise_sigma, (3, size, size)).astype(np.float32)
        frames[i] = np.clip(frame + noise, 0.0, 1.0)
    return frames


def mean_interframe_diff(frames: np.ndarray) -> float:
    """Mean absolute per-pixel difference between consecutive frames."""
    return float(np.abs(np.diff(frames, axis=0)).mean())


# ---------------------------------------------------------------------------
# Binary tensor container
# ---------------------------------------------------------------------------

TENSOR_MAGIC = b"JOSE"
TENSOR_VERSION = 1
_DTYPE_F32 = 0
_MAX_RANK = 8


def write_tensor(path: str | Path, tensor: np.ndarray) -> None:
    """Write a float32 tensor in the package's binary container format.

    Header: magic ``JOSE``, version u8, dtype u8 (0 = float32 LE), rank u8,
    then ``rank`` u32 LE shape entries; payload is row-major float32 LE.
    """
    # asarray keeps rank-0 tensors rank 0; tobytes(order="C") handles layout
    arr = np.asarray(tensor, dtype=np.float32)
    if arr.ndim > _MAX_RANK:
        raise ValueError(f"rank {arr.ndim} exceeds container limit {_MAX_RANK}")
    header = TENSOR_MAGIC + struct.pack("<BBB", TENSOR_VERSION, _DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor written by ``write_tensor``, bit-exactly.

    Raises ``BadMagic``, ``UnsupportedVersion``, or ``TruncatedPayload``
    (the latter also covers trailing garbage after the payload).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 7 or blob[:4] != TENSOR_MAGIC:
        raise BadMagic(f"{path}: not a tensor container")
    version, dtype_code, rank = struct.unpack("<BBB", blob[4:7])
    if version != TENSOR_VERSION:
        raise UnsupportedVersion(f"{path}: container version {version}")
    if dtype_code != _DTYPE_F32:
        raise UnsupportedVersion(f"{path}: unknown dtype code {dtype_code}")
    if rank > _MAX_RANK:
        raise TruncatedPayload(f"{path}: rank {rank} exceeds limit")
    offset = 7 + 4 * rank
    if len(blob) < offset:
        raise TruncatedPayload(f"{path}: header cut short")
    shape = struct.unpack(f"<{rank}I", blob[7:offset])
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = offset + 4 * count
    if len(blob) != expected:
        raise TruncatedPayload(
            f"{path}: payload is {len(blob) - offset} bytes, expected {4 * count}"
        )
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return data.reshape(shape).copy()


# ---------------------------------------------------------------------------
# Clip decoding (pluggable by file type)
# ---------------------------------------------------------------------------

_IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp"}
_VIDEO_EXTS = {".mp4", ".avi", ".mkv", ".mov", ".webm"}


def _read_frame_dir(path: Path) -> tuple[np.ndarray, float]:
    meta = {}
    meta_path = path / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in _IMAGE_EXTS)
    if not files:
        raise UnknownLayout(f"{path}: no image frames found")
    frames = []
    for f in files:
        img = cv2.imread(str(f), cv2.IMREAD_COLOR)
        if img is None:
            raise UnknownLayout(f"{f}: unreadable image")
        rgb = cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0
        frames.append(rgb.transpose(2, 0, 1))
    return np.stack(frames), float(meta.get("fps", 30.0))


def _read_tensor_clip(path: Path) -> tuple[np.ndarray, float]:
    frames = read_tensor(path)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise UnknownLayout(f"{path}: clip tensor must be (F, 3, H, W)")
    sidecar = path.with_suffix(".json")
    fps = 30.0
    if sidecar.exists():
        fps = float(json.loads(sidecar.read_text()).get("fps", 30.0))
    return frames, fps


def _read_video_file(path: Path) -> tuple[np.ndarray, float]:
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise UnknownLayout(f"{path}: cannot open video")
    fps = cap.get(cv2.CAP_PROP_FPS) or 30.0
    frames = []
    while True:
        ok, img = cap.read()
        if not ok:
            break
        rgb = cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0
        frames.append(rgb.transpose(2, 0, 1))
    cap.release()
    if not frames:
        raise UnknownLayout(f"{path}: video decoded to zero frames")
    return np.stack(frames), float(fps)


def read_clip(path: str | Path) -> tuple[np.ndarray, float]:
    """Decode a clip entry into ``(frames, native_fps)``.

    Accepts a directory of per-frame images (with optional ``meta.json``
    carrying fps), a ``.jt`` tensor container holding ``(F, 3, H, W)``, or
    a regular video file decoded through OpenCV.
    """
    p = Path(path)
    if p.is_dir():
        return _read_frame_dir(p)
    if p.suffix == ".jt":
        return _read_tensor_clip(p)
    if p.suffix.lower() in _VIDEO_EXTS:
        return _read_video_file(p)
    raise UnknownLayout(f"{p}: unsupported clip type")


def write_tensor_clip(path: str | Path, frames: np.ndarray, fps: float) -> None:
    """Store a clip as a tensor container plus a fps sidecar."""
    path = Path(path)
    write_tensor(path, frames)
    path.with_suffix(".json").write_text(json.dumps({"fps": fps}))


# ---------------------------------------------------------------------------
# Dataset index
# ---------------------------------------------------------------------------

_SPLITS = ("train", "val")


@dataclass
class DatasetIndex:
    """Deterministic listing of a ``root/split/ClassName/clip`` tree."""

    entries: list[tuple[Path, str, int]]  # (clip path, split, class id)
    class_names: list[str]

    def split_entries(self, split: str) -> list[tuple[Path, str, int]]:
        return [e for e in self.entries if e[1] == split]


def load_dataset(root: str | Path) -> DatasetIndex:
    """Index a dataset laid out as ``<root>/<split>/<ClassName>/<clip>``.

    Ordering is lexicographic by path and class ids follow sorted class
    names, so two loads of the same tree are identical.
    """
    root = Path(root)
    if not root.is_dir():
        raise EmptyDataset(f"{root}: not a directory")
    splits = sorted(p for p in root.iterdir() if p.is_dir() and p.name in _SPLITS)
    if not splits:
        stray = [p.name for p in root.iterdir()]
        if stray:
            raise UnknownLayout(
                f"{root}: expected train/ and val/ split directories, found {stray}"
            )
        raise EmptyDataset(f"{root}: empty dataset root")
    class_names = sorted({p.name for s in splits for p in s.iterdir() if p.is_dir()})
    if not class_names:
        raise EmptyDataset(f"{root}: no class directories under splits")
    class_ids = {name: i for i, name in enumerate(class_names)}
    entries = []
    for split_dir in splits:
        for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            clips = sorted(
                p
                for p in class_dir.iterdir()
                if p.is_dir() or p.suffix == ".jt" or p.suffix.lower() in _VIDEO_EXTS
            )
            for clip in clips:
                entries.append((clip, split_dir.name, class_ids[class_dir.name]))
    if not entries:
        raise EmptyDataset(f"{root}: no clips found")
    return DatasetIndex(entries=entries, class_names=class_names)


# ---------------------------------------------------------------------------
# Segment store: preprocessed pairs on disk
# ---------------------------------------------------------------------------


@dataclass
class SegmentStore:
    """Directory of preprocessed segment pairs.

    Each segment is a pair of tensor files (``<id>_rgb.jt``,
    ``<id>_flow.jt``) plus a JSON sidecar with source id, label, and start
    time.  ``index.json`` lists segment ids per split in write order.
    """

    root: Path
    index: dict[str, list[str]] = field(default_factory=lambda: {"train": [], "val": []})

    @classmethod
    def create(cls, root: str | Path) -> "SegmentStore":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        return cls(root=root)

    @classmethod
    def open(cls, root: str | Path) -> "SegmentStore":
        root = Path(root)
        index_path = root / "index.json"
        if not index_path.exists():
            raise EmptyDataset(f"{root}: no index.json")
        return cls(root=root, index=json.loads(index_path.read_text()))

    def write(self, split: str, pair: SegmentPair) -> str:
        seg_id = f"{split}_{len(self.index[split]):06d}"
        write_tensor(self.root / f"{seg_id}_rgb.jt", pair.rgb)
        write_tensor(self.root / f"{seg_id}_flow.jt", pair.flow)
        sidecar = {
            "source_id": pair.source_id,
            "label": pair.label,
            "start_time": pair.start_time,
        }
        (self.root / f"{seg_id}.json").write_text(json.dumps(sidecar, sort_keys=True))
        self.index[split].append(seg_id)
        return seg_id

    def flush(self) -> None:
        (self.root / "index.json").write_text(json.dumps(self.index, sort_keys=True))

    def ids(self, split: str) -> list[str]:
        return list(self.index.get(split, []))

    def load(self, seg_id: str) -> SegmentPair:
        rgb = read_tensor(self.root / f"{seg_id}_rgb.jt")
        flow = read_tensor(self.root / f"{seg_id}_flow.jt")
        meta = json.loads((self.root / f"{seg_id}.json").read_text())
        return SegmentPair(
            rgb=rgb,
            flow=flow,
            label=meta.get("label"),
            source_id=meta.get("source_id", ""),
            start_time=float(meta.get("start_time", 0.0)),
        )


# ---------------------------------------------------------------------------
# Order-preserving parallel map
# ---------------------------------------------------------------------------

T = TypeVar("T")
U = TypeVar("U")


def prefetch_map(
    fn: Callable[[T], U], items: Sequence[T] | Iterable[T], workers: int = 0
) -> Iterator[U]:
    """Map ``fn`` over ``items``, optionally with thread prefetch.

    Results are always yielded in input order, so downstream consumers see
    the same sequence regardless of ``workers``.  ``fn`` must be pure with
    respect to shared state (every item carries its own rng seed).
    """
    if workers <= 0:
        for item in items:
            yield fn(item)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(fn, items)
