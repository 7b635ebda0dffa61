import pytest

from cmpad.datagen import GeneratorSpec, generate
from cmpad.datasets import save_dataset
from cmpad.losses import LossParams
from cmpad.network import NetworkConfig, OptimizerConfig
from cmpad.harness import TrainConfig

TINY_SPEC = GeneratorSpec(
    image_size=16, n_identities=6, samples_per_identity=4, seed=31
)

TINY_TRAIN = TrainConfig(
    network=NetworkConfig(
        input_height=16, input_width=16, blocks_per_branch=2,
        base_filters=4, embedding_dim=8,
    ),
    optimizer=OptimizerConfig(learning_rate=3e-3),
    loss=LossParams(),
    epochs=2,
    batch_size=16,
    seed=5,
)


@pytest.fixture(scope="session")
def tiny_samples():
    return generate(TINY_SPEC)


@pytest.fixture(scope="session")
def tiny_records(tiny_samples, tmp_path_factory):
    root = tmp_path_factory.mktemp("tinyds")
    return save_dataset(tiny_samples, root, force=True)


@pytest.fixture()
def tiny_cfg():
    return TINY_TRAIN
