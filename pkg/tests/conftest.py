import pytest

from moe_rebasin.harness import DatasetSpec, Experiment, TrainConfig, make_loss_fn, train_sgd
from moe_rebasin.model import MoEConfig
from moe_rebasin.numerics import RngStream

ACCEPTANCE_LINES = []

BLOBS = DatasetSpec(classes=6, samples_per_class=100, input_dim=16, noise_sigma=1.0, seed=0)
EXPERIMENT = Experiment(BLOBS, backbone_seed=7, d=8)
DENSE = MoEConfig.dense(4, 8, 16)


@pytest.fixture
def rng():
    return RngStream(12345)


@pytest.fixture(scope="session")
def experiment():
    data, backbone = EXPERIMENT.build()
    return data, backbone, make_loss_fn(backbone, data.X_test, data.y_test)


@pytest.fixture(scope="session")
def trained_dense(experiment):
    data, backbone, _ = experiment
    return train_sgd(data, backbone, TrainConfig(init_seed=100, data_order_seed=500), DENSE)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
