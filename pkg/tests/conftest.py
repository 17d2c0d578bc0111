import os

import numpy as np
import pytest

import pullseg.data
import pullseg.model
import pullseg.numerics
from pullseg.trainer import config


def pytest_collection_modifyitems(config, items):
    if os.getenv("T2S_SLOW", "") not in ("", "0"):
        return
    skip_slow = pytest.mark.skip(reason="set T2S_SLOW=1 to run long reproductions")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def quiet_console(monkeypatch):
    monkeypatch.setenv("T2S_QUIET", "1")
    monkeypatch.delenv("T2S_SEED", raising=False)


@pytest.fixture
def rng():
    return pullseg.numerics.Rng(1234)


@pytest.fixture
def micro_cfg():
    """16×16 images, three classes and tiny widths."""
    return config.RunConfig(
        seed=7,
        classes=3,
        height=16,
        width=16,
        n_source=6,
        n_target=6,
        n_held_out=3,
        widths=(4, 6),
        feature_dim=6,
        projector_hidden=5,
        embed_dim=4,
        n=4,
        m=8,
        iters=3,
        ckpt_every=2,
        eval_every=2,
        t_warm=0,
        lr_encoder=1e-3,
        lr_head=1e-2,
    )


@pytest.fixture
def micro_arch(micro_cfg):
    return micro_cfg.architecture()


@pytest.fixture
def micro_corpus(micro_cfg):
    return pullseg.data.gen_synthetic_pair(
        micro_cfg.data_config(), pullseg.numerics.Rng(micro_cfg.seed).split("data")
    )


@pytest.fixture
def micro_params(micro_arch):
    return pullseg.model.init_params(micro_arch, pullseg.numerics.Rng(99))


@pytest.fixture
def random_image():
    def make(height=16, width=16, seed=0):
        return np.random.default_rng(seed).uniform(0.0, 1.0, size=(height, width, 3))

    return make
