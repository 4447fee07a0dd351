import numpy as np
import pytest
import torch

torch.set_num_threads(max(1, int(__import__("os").environ.get("FVL_THREADS", "1"))))


@pytest.fixture(scope="session")
def small_catalog():
    from fvl.data import DataConfig, generate_catalog

    cfg = DataConfig(n_products=60, image_size=32)
    return generate_catalog(cfg, seed=11)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
