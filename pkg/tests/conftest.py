import numpy as np
import pytest
import torch

from tissueproto.encoders import ToyBackend

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def toy():
    return ToyBackend(seed=0).freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synth16(tmp_path_factory):
    from tissueproto.synthetic import generate_dataset
    return generate_dataset(tmp_path_factory.mktemp("synth16"), n_images=16, seed=1)


@pytest.fixture(scope="session")
def trained16(synth16, tmp_path_factory):
    from tissueproto.data import load_manifest
    from tissueproto.pipeline import Config, train
    out = tmp_path_factory.mktemp("run16")
    return train(Config(), load_manifest(synth16), out)
