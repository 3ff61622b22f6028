"""
Shared fixtures: tiny model/view configs, a small rendered dataset and precision scoping
"""
from dataclasses import replace

import numpy as np
import pytest

from src import ndtensor as nd
from src.data import ToySpec, gen_toy
from src.distill import DistillConfig
from src.head import HeadConfig
from src.optimizer import OptimConfig
from src.run_config import DataConfig, RunConfig, TrainConfig
from src.views import ViewConfig
from src.vit import ViTConfig


@pytest.fixture(autouse=True)
def reset_precision():
    """Engines switch the global precision; every test starts and ends at float32"""
    nd.set_precision('float32')
    yield
    nd.set_precision('float32')


@pytest.fixture
def f64():
    with nd.precision('float64'):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vit():
    return ViTConfig(patch_size=4, depth=2, dim=16, heads=2, mlp_ratio=2.0, base_grid=4)


@pytest.fixture
def tiny_head():
    return HeadConfig(mlp_layers=3, hidden_dim=24, bottleneck_dim=8, out_dim=16)


@pytest.fixture
def tiny_views():
    return ViewConfig(n_local=2, global_size=16, local_size=8)


@pytest.fixture
def tiny_spec():
    return ToySpec(n_per_class=3, image_size=16, seed=3)


@pytest.fixture
def tiny_dataset(tiny_spec):
    return gen_toy(tiny_spec)


@pytest.fixture
def tiny_test_dataset(tiny_spec):
    return gen_toy(replace(tiny_spec, split='test', n_per_class=2))


@pytest.fixture
def tiny_run_config(tmp_path, tiny_vit, tiny_head, tiny_views):
    """Two epochs of 12 images at batch 5 (3 steps per epoch)"""
    return RunConfig(
        model=tiny_vit,
        head=tiny_head,
        distill=DistillConfig(teacher_temp_warmup_epochs=1.0),
        views=tiny_views,
        optim=OptimConfig(warmup_epochs=1.0),
        train=TrainConfig(epochs=2, batch_size=5, seed=11, checkpoint_every=1, eval_every=1,
                          eval_k=3, out_dir=str(tmp_path / 'run')),
        data=DataConfig(train_path=str(tmp_path / 'train.dsv'), test_path=''),
    )
