"""
Run configuration and toy spec files
"""
import os

import pytest

from src.data import ToySpec
from src.error_reporter import ConfigError
from src.run_config import (RunConfig, TrainConfig, dump_run_config, dump_toy_spec, load_run_config,
                            load_toy_spec, parse_run_config, parse_toy_spec, save_run_config)

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'configs')


class TestRunConfig:

    def test_defaults_when_empty(self):
        assert parse_run_config('') == RunConfig()

    def test_dump_then_parse_is_identity(self, tiny_run_config):
        text = dump_run_config(tiny_run_config)
        assert parse_run_config(text) == tiny_run_config
        assert dump_run_config(parse_run_config(text)) == text

    def test_file_round_trip(self, tmp_path, tiny_run_config):
        path = str(tmp_path / 'run.conf')
        save_run_config(tiny_run_config, path)
        assert load_run_config(path) == tiny_run_config

    def test_comments_and_types(self):
        config = parse_run_config(
            "# width\nmodel.dim=32\nmodel.heads=4\nviews.n_local=0\ntrain.precision=float64\n"
            "distill.teacher_norm=sinkhorn\noptim.base_lr=1e-3\n"
        )
        assert config.model.dim == 32
        assert config.views.n_local == 0
        assert config.train.precision == 'float64'
        assert config.distill.teacher_norm == 'sinkhorn'
        assert config.optim.base_lr == 1e-3

    @pytest.mark.parametrize('text, match', [
        ('model.width=3\n', 'unknown config key model.width'),
        ('trainer.epochs=3\n', 'unknown config key trainer.epochs'),
        ('train.epochs=many\n', 'cannot parse'),
        ('train.epochs=0\n', 'train.epochs'),
        ('train.precision=float16\n', 'precision'),
        ('distill.teacher_norm=softmax\n', 'teacher_norm'),
    ])
    def test_rejected(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_run_config(text)

    def test_eval_layers_bounded_by_depth(self):
        with pytest.raises(ConfigError, match='eval_layers'):
            parse_run_config('model.depth=2\ntrain.eval_layers=3\n')

    def test_local_crop_must_tile(self):
        with pytest.raises(ConfigError):
            parse_run_config('model.patch_size=4\nviews.local_size=10\n')

    def test_replace_swaps_sections(self, tiny_run_config):
        changed = tiny_run_config.replace(train=TrainConfig(epochs=7, out_dir='elsewhere'))
        assert changed.train.epochs == 7
        assert changed.model == tiny_run_config.model

    def test_shipped_config_parses(self):
        config = load_run_config(os.path.join(CONFIG_DIR, 'vit_toy.conf'))
        assert config.model.dim == 64 and config.model.depth == 4
        assert config.views.n_local == 6
        assert config.data.test_path == 'data/test.dsv'


class TestToySpecFiles:

    def test_round_trip(self):
        spec = ToySpec(n_per_class=9, classes=('disk', 'cross'), noise=0.0, seed=12, split='test')
        assert parse_toy_spec(dump_toy_spec(spec)) == spec

    def test_classes_list(self):
        spec = parse_toy_spec('toy.classes=square, triangle\ntoy.image_size=16\n')
        assert spec.classes == ('square', 'triangle')
        assert spec.image_size == 16

    def test_foreign_key(self):
        with pytest.raises(ConfigError):
            parse_toy_spec('model.dim=3\n')

    def test_shipped_specs(self):
        train = load_toy_spec(os.path.join(CONFIG_DIR, 'toy_data.conf'))
        test = load_toy_spec(os.path.join(CONFIG_DIR, 'toy_data_test.conf'))
        assert (train.n_per_class, train.split) == (500, 'train')
        assert (test.n_per_class, test.split) == (200, 'test')
        assert train.seed == test.seed == 7
