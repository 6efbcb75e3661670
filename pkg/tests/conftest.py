import numpy as np
import pytest
import torch

from drue.backbone import EncoderConfig
from drue.datasets import generate_synthetic
from drue.training import TrainConfig, train_classifier, train_g0, train_g1

torch.set_num_threads(1)

SMALL = dict(num_blocks=3, channels=[8, 16, 32], downsample=[False, True, True], stem_channels=8, image_size=32)


@pytest.fixture(scope="session")
def small_encoder():
    return EncoderConfig(**SMALL)


@pytest.fixture(scope="session")
def small_split():
    return generate_synthetic(n_per_class=10, image_size=32, seed=3)


@pytest.fixture(scope="session")
def small_bundle(small_split, small_encoder):
    """A quickly trained classifier with G1 and a frozen-tail G0 on 32x32 images."""
    fast = dict(learning_rate=1e-3, batch_size=8, max_epochs=3, patience=3, seed=0)
    b = train_classifier(small_split, TrainConfig(**fast, stage="classifier"), small_encoder)
    b = train_g1(b, small_split, TrainConfig(**fast, stage="g1"))
    return train_g0(b, small_split, TrainConfig(**fast, stage="g0"), freeze=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ---------------------------------------------------------------

ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
