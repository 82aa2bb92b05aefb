import os
import sys
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from detseglab.dataio import SyntheticSpec, apply_split, generate_synthetic, split_partial  # noqa: E402
from detseglab.dethead import DetHeadConfig  # noqa: E402
from detseglab.encoder import EncoderConfig  # noqa: E402
from detseglab.model import ModelConfig  # noqa: E402
from detseglab.seghead import SegHeadConfig  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))
torch.set_num_threads(1)


def tiny_model_config(channels: int = 16, widths=(8, 8, 16, 16), seg_channels: int = 8, **det) -> ModelConfig:
    """A few thousand parameters; fast enough for exhaustive gradient checks."""
    return ModelConfig(
        EncoderConfig(widths=widths, det_channels=channels, depths=(1, 1, 1, 1)),
        DetHeadConfig(num_classes=3, conv_blocks=1, **det),
        SegHeadConfig(num_classes=4, seg_channels=seg_channels),
    )


TINY_SPEC = SyntheticSpec(image_size=(32, 32), min_size=8, max_size=14, max_objects=2)


@pytest.fixture(scope="session")
def tiny_data():
    """(full, det subset, seg subset) of 12 32x32 synthetic images."""
    full = generate_synthetic(12, TINY_SPEC, seed=3)
    det, seg = apply_split(full, split_partial(full, 0))
    return full, det, seg


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
