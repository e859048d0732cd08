import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from flowgate.data import SamplingConfig, SegmentPair, SyntheticClipSpec, generate_synthetic_clip
from flowgate.model import FgnConfig

settings.register_profile(
    "suite",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

torch.set_num_threads(max(1, torch.get_num_threads()))


# A reduced geometry used by most behavioural tests: same architecture,
# small frames, few time steps, so forwards take milliseconds.
TINY_CFG = FgnConfig(n_frames=4, frame_size=32)
TINY_SAMPLING = SamplingConfig(n_frames=4, target_fps=7.5)


def tiny_inputs(batch: int = 2, seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    rgb = torch.rand((batch, 3, TINY_CFG.n_frames, 32, 32), generator=g)
    flow = torch.randn((batch, 2, TINY_CFG.n_frames, 32, 32), generator=g)
    return rgb, flow


@pytest.fixture(scope="session")
def motion_clip():
    spec = SyntheticClipSpec(kind="motion", duration_s=3.0, fps=30.0, frame_size=64)
    return generate_synthetic_clip(spec, seed=11)


@pytest.fixture(scope="session")
def static_clip():
    spec = SyntheticClipSpec(kind="static", duration_s=3.0, fps=30.0, frame_size=64)
    return generate_synthetic_clip(spec, seed=11)


def random_pair(seed: int = 0, n: int = 4, size: int = 32, label: int | None = 1) -> SegmentPair:
    rng = np.random.default_rng(seed)
    return SegmentPair(
        rgb=rng.random((3, n, size, size)).astype(np.float32),
        flow=rng.normal(0, 1, (2, n, size, size)).astype(np.float32),
        label=label,
        source_id=f"pair{seed}",
    )
