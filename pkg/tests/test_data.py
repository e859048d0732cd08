import json
import math
import struct

import cv2
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowgate.data import (
    BadMagic,
    EmptyDataset,
    SamplingConfig,
    SegmentPair,
    SegmentStore,
    SyntheticClipSpec,
    TruncatedPayload,
    UnknownLayout,
    UnsupportedRate,
    UnsupportedVersion,
    VideoTooShort,
    generate_synthetic_clip,
    load_dataset,
    mean_interframe_diff,
    prefetch_map,
    read_clip,
    read_tensor,
    resample_indices,
    sample_segments,
    write_tensor,
    write_tensor_clip,
)


def oracle_windows(n_native, native_fps, target_fps, n_frames, stride):
    """Independent enumeration of resampled indices and window starts."""
    count = math.floor(n_native * target_fps / native_fps)
    indices = [
        min(math.floor(k * native_fps / target_fps + 0.5), n_native - 1)
        for k in range(count)
    ]
    starts, s = [], 0
    while s + n_frames + 1 <= count:
        starts.append(s)
        s += stride
    return indices, starts


def make_clip(n_frames, size=8):
    # frame i has constant value i / 255 so windows are identifiable
    clip = np.zeros((n_frames, 3, size, size), dtype=np.float32)
    for i in range(n_frames):
        clip[i] = i / 255.0
    return clip


class TestResampling:
    def test_five_second_clip_enumeration(self):
        # oracle: 150 native frames at 30 fps resampled to 7.5 fps
        indices, starts = oracle_windows(150, 30.0, 7.5, n_frames=16, stride=16)
        assert len(indices) == 37
        assert starts == [0, 16]

        cfg = SamplingConfig(n_frames=16, target_fps=7.5, stride=16)
        clip = make_clip(150)
        got = resample_indices(150, 30.0, 7.5)
        assert got.tolist() == indices
        segments = sample_segments(clip, 30.0, cfg)
        assert len(segments) == 2
        # first retained frame of each window matches the oracle indices
        for seg, start in zip(segments, starts):
            expected_first = indices[start] / 255.0
            assert seg.frames[0, 0, 0, 0] == pytest.approx(expected_first, abs=1e-7)

    def test_exactly_one_window(self):
        cfg = SamplingConfig(n_frames=16, target_fps=7.5)
        clip = make_clip(17 * 4)  # resamples to exactly 17 frames
        assert len(resample_indices(17 * 4, 30.0, 7.5)) == 17
        assert len(sample_segments(clip, 30.0, cfg)) == 1

    def test_one_frame_short_raises(self):
        cfg = SamplingConfig(n_frames=16, target_fps=7.5)
        clip = make_clip(16 * 4 + 3)  # resamples to 16 frames
        assert len(resample_indices(16 * 4 + 3, 30.0, 7.5)) == 16
        with pytest.raises(VideoTooShort):
            sample_segments(clip, 30.0, cfg)

    def test_native_below_target_rejected(self):
        with pytest.raises(UnsupportedRate):
            sample_segments(make_clip(100), 5.0, SamplingConfig(n_frames=4, target_fps=7.5))

    def test_resampling_identity_at_target_rate(self):
        idx = resample_indices(50, 7.5, 7.5)
        assert idx.tolist() == list(range(50))

    @given(
        n_native=st.integers(20, 400),
        native_fps=st.sampled_from([12.5, 15.0, 24.0, 30.0, 60.0]),
        n_frames=st.integers(2, 8),
        stride=st.integers(1, 10),
    )
    def test_windows_in_bounds_and_monotone(self, n_native, native_fps, n_frames, stride):
        cfg = SamplingConfig(n_frames=n_frames, target_fps=7.5, stride=stride)
        idx = resample_indices(n_native, native_fps, 7.5)
        assert (idx >= 0).all() and (idx < n_native).all()
        assert (np.diff(idx) >= 0).all()
        try:
            segments = sample_segments(make_clip(n_native), native_fps, cfg)
        except VideoTooShort:
            assert len(idx) < n_frames + 1
            return
        oracle_idx, oracle_starts = oracle_windows(
            n_native, native_fps, 7.5, n_frames, stride
        )
        assert len(segments) == len(oracle_starts)
        times = [seg.start_time for seg in segments]
        assert times == sorted(times)


class TestSamplingConfig:
    def test_raw_frame_count(self):
        assert SamplingConfig(n_frames=16).raw_frames_per_segment == 17

    def test_temporal_footprint(self):
        assert SamplingConfig(16, 7.5).temporal_footprint == pytest.approx(2.1333, abs=1e-3)

    def test_invalid_configs(self):
        with pytest.raises(ValueError):
            SamplingConfig(n_frames=1)
        with pytest.raises(ValueError):
            SamplingConfig(target_fps=0.0)


class TestSyntheticClips:
    def test_deterministic(self):
        spec = SyntheticClipSpec(kind="motion", duration_s=5.0, fps=30.0, frame_size=64)
        a = generate_synthetic_clip(spec, seed=7)
        b = generate_synthetic_clip(spec, seed=7)
        assert a.dtype == np.float32
        assert a.tobytes() == b.tobytes()

    def test_static_interframe_difference_small(self, static_clip):
        assert mean_interframe_diff(static_clip) < 0.02

    def test_motion_at_least_five_times_static(self, motion_clip, static_clip):
        assert mean_interframe_diff(motion_clip) >= 5 * mean_interframe_diff(static_clip)

    def test_separable_with_fixed_threshold_across_seeds(self):
        # The smoke-training acceptance run relies on this margin.
        threshold = 2e-3
        static_spec = SyntheticClipSpec(kind="static", duration_s=2.0, fps=30.0, frame_size=64)
        motion_spec = SyntheticClipSpec(kind="motion", duration_s=2.0, fps=30.0, frame_size=64)
        for seed in range(100):
            assert mean_interframe_diff(generate_synthetic_clip(static_spec, seed)) < threshold
            assert mean_interframe_diff(generate_synthetic_clip(motion_spec, seed)) > threshold

    def test_values_in_unit_range(self, motion_clip):
        assert motion_clip.min() >= 0.0 and motion_clip.max() <= 1.0

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            SyntheticClipSpec(kind="wobble")


class TestTensorContainer:
    def test_header_layout_and_size(self, tmp_path):
        path = tmp_path / "zeros.jt"
        write_tensor(path, np.zeros((2, 2), dtype=np.float32))
        blob = path.read_bytes()
        # magic(4) + version(1) + dtype(1) + rank(1) + shape(2*4) + payload(16)
        assert len(blob) == 31
        assert blob[:4] == b"JOSE"
        version, dtype_code, rank = struct.unpack("<BBB", blob[4:7])
        assert (version, dtype_code, rank) == (1, 0, 2)
        assert struct.unpack("<2I", blob[7:15]) == (2, 2)

    def test_round_trip_full_size_segment(self, tmp_path):
        rng = np.random.default_rng(0)
        t = rng.standard_normal((3, 16, 224, 224)).astype(np.float32)
        path = tmp_path / "seg.jt"
        write_tensor(path, t)
        back = read_tensor(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, t)

    @given(
        shape=st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple),
        seed=st.integers(0, 2**31),
    )
    def test_round_trip_property(self, shape, seed, tmp_path_factory):
        rng = np.random.default_rng(seed)
        t = (rng.standard_normal(shape) * rng.uniform(1e-6, 1e6)).astype(np.float32)
        path = tmp_path_factory.mktemp("rt") / "t.jt"
        write_tensor(path, t)
        assert np.array_equal(read_tensor(path), t)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.jt"
        path.write_bytes(b"XXXX" + bytes(27))
        with pytest.raises(BadMagic):
            read_tensor(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "v9.jt"
        write_tensor(path, np.zeros(3, dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(UnsupportedVersion):
            read_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "cut.jt"
        write_tensor(path, np.arange(10, dtype=np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(TruncatedPayload):
            read_tensor(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "fat.jt"
        write_tensor(path, np.arange(4, dtype=np.float32))
        path.write_bytes(path.read_bytes() + b"\x00\x00")
        with pytest.raises(TruncatedPayload):
            read_tensor(path)

    def test_rank_limit(self, tmp_path):
        with pytest.raises(ValueError):
            write_tensor(tmp_path / "r9.jt", np.zeros((1,) * 9, dtype=np.float32))


def build_tree(root, splits=("train", "val"), classes=("Fight", "NonFight"), clips=2):
    for split in splits:
        for cls in classes:
            d = root / split / cls
            d.mkdir(parents=True)
            for i in range(clips):
                write_tensor_clip(
                    d / f"clip_{i}.jt",
                    np.zeros((4, 3, 8, 8), dtype=np.float32),
                    fps=30.0,
                )


class TestDatasetIndex:
    def test_basic_tree(self, tmp_path):
        build_tree(tmp_path, splits=("train",))
        index = load_dataset(tmp_path)
        assert len(index.entries) == 4
        assert index.class_names == ["Fight", "NonFight"]
        # class ids follow sorted class names
        labels = {e[0].parent.name: e[2] for e in index.entries}
        assert labels == {"Fight": 0, "NonFight": 1}

    def test_empty_root(self, tmp_path):
        with pytest.raises(EmptyDataset):
            load_dataset(tmp_path)

    def test_deterministic_order(self, tmp_path):
        build_tree(tmp_path)
        a = load_dataset(tmp_path)
        b = load_dataset(tmp_path)
        assert [e[0] for e in a.entries] == [e[0] for e in b.entries]

    def test_unknown_layout(self, tmp_path):
        (tmp_path / "whatever").mkdir()
        with pytest.raises(UnknownLayout):
            load_dataset(tmp_path)


class TestClipReaders:
    def test_tensor_clip_round_trip(self, tmp_path):
        frames = np.random.default_rng(0).random((5, 3, 8, 8)).astype(np.float32)
        write_tensor_clip(tmp_path / "c.jt", frames, fps=24.0)
        back, fps = read_clip(tmp_path / "c.jt")
        assert fps == 24.0
        assert np.array_equal(back, frames)

    def test_frame_directory(self, tmp_path):
        d = tmp_path / "clip"
        d.mkdir()
        rng = np.random.default_rng(1)
        originals = []
        for i in range(4):
            img = (rng.random((8, 8, 3)) * 255).astype(np.uint8)
            originals.append(img)
            cv2.imwrite(str(d / f"f_{i:03d}.png"), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
        (d / "meta.json").write_text(json.dumps({"fps": 12.0}))
        frames, fps = read_clip(d)
        assert fps == 12.0
        assert frames.shape == (4, 3, 8, 8)
        assert np.array_equal(
            (frames[2].transpose(1, 2, 0) * 255).round().astype(np.uint8), originals[2]
        )


class TestSegmentStore:
    def test_write_read_round_trip(self, tmp_path):
        store = SegmentStore.create(tmp_path / "segs")
        rng = np.random.default_rng(3)
        pair = SegmentPair(
            rgb=rng.random((3, 4, 8, 8)).astype(np.float32),
            flow=rng.random((2, 4, 8, 8)).astype(np.float32),
            label=1,
            source_id="clip_a",
            start_time=0.5,
        )
        seg_id = store.write("train", pair)
        store.flush()
        reopened = SegmentStore.open(tmp_path / "segs")
        assert reopened.ids("train") == [seg_id]
        back = reopened.load(seg_id)
        assert np.array_equal(back.rgb, pair.rgb)
        assert np.array_equal(back.flow, pair.flow)
        assert back.label == 1 and back.source_id == "clip_a" and back.start_time == 0.5


class TestPrefetchMap:
    def test_order_and_worker_independence(self):
        def fn(i):
            rng = np.random.default_rng(i)
            return rng.random(3)

        seq = list(range(40))
        sequential = [a.tolist() for a in prefetch_map(fn, seq, workers=0)]
        threaded = [a.tolist() for a in prefetch_map(fn, seq, workers=3)]
        assert sequential == threaded
