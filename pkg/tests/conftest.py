import numpy as np
import pytest

from umiformer.autodiff import precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test body with float64 as the default tensor precision."""
    with precision(np.float64):
        yield


TINY = dict(
    image_size=16, patch_size=4, dim=16, depth=2, heads=2, ivdb_period=1, k=2, k_dpc=3, g=8,
    query_count=8, decoder_depth=1, voxel_size=8, upsample_stages=2, decoder_channels=(8, 4),
    n_shapes=8, epochs=3, lr_decay_epochs=(1, 2), batch_size=2,
)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Eight S=8 shapes with 16-pixel views, shared by the training and CLI tests."""
    from umiformer.data import generate_dataset

    root = tmp_path_factory.mktemp("tiny") / "data"
    generate_dataset(root, TINY["n_shapes"], TINY["voxel_size"], TINY["image_size"], master_seed=0)
    return root


@pytest.fixture
def tiny_config(tiny_dataset, tmp_path):
    from umiformer.config import RunConfig

    return RunConfig(**TINY, dataset=str(tiny_dataset), checkpoints=str(tmp_path / "ckpt"), reports=str(tmp_path / "reports"))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "ACCEPTANCE", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
