import numpy as np
import pytest
import torch

from ucl_dehaze.losses import VGGFeatures

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    def _report(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
    return _report


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def vgg():
    return VGGFeatures(seed=0)


class SmallExtractor(torch.nn.Module):
    """Three-level conv/max-pool trunk for inputs as small as 8x8."""

    def __init__(self, seed=0, dtype=torch.float64):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.weights = [torch.randn(8, 3, 3, 3, generator=g, dtype=dtype) * 0.3,
                        torch.randn(8, 8, 3, 3, generator=g, dtype=dtype) * 0.2,
                        torch.randn(8, 8, 3, 3, generator=g, dtype=dtype) * 0.2]

    def forward(self, x):
        feats = []
        for w in self.weights:
            x = torch.nn.functional.max_pool2d(torch.relu(torch.nn.functional.conv2d(x, w, padding=1)), 2)
            feats.append(x)
        return feats


@pytest.fixture
def small_extractor():
    return SmallExtractor()
