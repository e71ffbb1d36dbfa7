import numpy as np
import pytest
import torch

from hallucinet.synthvid import GeneratorConfig, build_dataset, load_dataset
from hallucinet.trainer import TrainConfig, train_teacher

torch.set_num_threads(1)


def tiny_config(**kw):
    base = dict(name="tiny", T=16, H=16, W=16, sprite_radius=3.0, splits=(14, 7, 7), seed=3)
    base.update(kw)
    return GeneratorConfig(**base)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    build_dataset(tiny_config(), root)
    return root


@pytest.fixture(scope="session")
def tiny_data(tiny_root):
    return load_dataset(tiny_root)


@pytest.fixture(scope="session")
def tiny_teacher(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_teacher")
    teacher, _ = train_teacher(tiny_data, TrainConfig(epochs=2, lr=3e-3, batch_size=8, channels=(4, 8)), out_dir=out)
    teacher.checkpoint_path = out / "teacher.hnck"
    return teacher


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
