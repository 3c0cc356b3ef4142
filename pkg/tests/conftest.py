import numpy as np
import pytest
import torch

from rmnet.losses import SMALL_BLOCK3_CONV3, FeatureExtractorSpec, build_extractor
from rmnet.model import CriticSpec, GeneratorSpec

ACCEPTANCE_RESULTS = []

TINY_GEN = GeneratorSpec(base_filters=8, encoder_depth=2)
TINY_CRITIC = CriticSpec(base_filters=8, depth=3)
TINY_FX = FeatureExtractorSpec(layers=(8, "M", 16, "M", 16), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_fx():
    return build_extractor(FeatureExtractorSpec(layers=SMALL_BLOCK3_CONV3, seed=0))


@pytest.fixture(scope="session")
def tiny_fx():
    return build_extractor(TINY_FX)


def random_mask(rng, h, w, p=0.3):
    return (rng.random((h, w)) >= p).astype(np.uint8)


def model_batch(rng, n=2, h=16, w=16, p=0.3):
    x = torch.from_numpy(rng.uniform(-1, 1, (n, 3, h, w)).astype(np.float32))
    m = torch.from_numpy((rng.random((n, 1, h, w)) >= p).astype(np.float32))
    return x, m


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {name}: {detail}")
