import numpy as np
import pytest
import torch

from dermimit.config import ModelConfig, preset

torch.set_num_threads(1)


@pytest.fixture
def desk():
    return preset("desk")


@pytest.fixture
def toy():
    """Smallest config that still exercises every head, LSM and CIM."""
    return ModelConfig(
        image_height=8, image_width=8, patch_size=4, embed_dim=8, fusion_dim=8,
        backbone_layers=2, head_layers=2, num_heads=2, mlp_ratio=2.0, select_k=2,
        num_diseases=3, num_body_parts=2, num_attributes=3,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
