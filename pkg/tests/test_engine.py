"""
Training engine: step accounting, metric logs, determinism, resume, guard and collapse study
"""
import csv
import json
import math
import os
from dataclasses import replace

import numpy as np
import pytest

from src.checkpoint import load_checkpoint
from src.data import Dataset, save_dataset
from src.collapse_study import CSV_COLUMNS, run_collapse_study, study_config
from src.distill import StepMetrics
from src.error_reporter import ConfigError, NumericError, ParameterError
from src.metrics_log import MetricsWriter, read_records
from src.training_guard import TrainingGuard
from src.unified_engine import FINAL_CHECKPOINT, METRICS_FILE, DistillationEngine, run_training

RECORD_KEYS = {'step', 'epoch', 'loss', 'h', 'kl', 'ce', 'lambda', 'tau_t', 'lr', 'wd'}


@pytest.fixture
def run_config(tiny_run_config, tiny_dataset):
    save_dataset(tiny_dataset, tiny_run_config.data.train_path)
    return tiny_run_config


def _in_dir(config, path):
    return config.replace(train=replace(config.train, out_dir=str(path)))


def _metrics_text(result):
    with open(result.metrics_path, encoding='utf-8') as handle:
        return handle.read()


class TestTraining:

    def test_step_accounting_and_records(self, run_config):
        engine = DistillationEngine(run_config)
        assert engine.steps_per_epoch == 3
        assert engine.total_steps == 6
        result = engine.train()
        assert result.steps_run == 6
        assert os.path.basename(result.checkpoint_path) == FINAL_CHECKPOINT
        records = read_records(result.metrics_path)
        assert [r['step'] for r in records] == list(range(6))
        assert [r['epoch'] for r in records] == [0, 0, 0, 1, 1, 1]
        for record in records:
            assert set(record) == RECORD_KEYS
            assert all(math.isfinite(v) for v in record.values())
            assert record['ce'] == pytest.approx(record['h'] + record['kl'], rel=1e-4, abs=1e-6)
        assert records[0]['lr'] == 0.0
        assert records[0]['tau_t'] == pytest.approx(0.04)

    def test_epoch_checkpoints(self, run_config):
        result = run_training(run_config)
        out_dir = run_config.train.out_dir
        assert os.path.exists(os.path.join(out_dir, 'epoch_1.dck'))
        assert not os.path.exists(os.path.join(out_dir, 'epoch_2.dck'))
        final = load_checkpoint(result.checkpoint_path)
        assert (final.step, final.epoch) == (6, 1)
        assert int(final.extras['guard_streak'][0]) >= 0

    def test_same_seed_same_run(self, run_config, tmp_path):
        a = run_training(_in_dir(run_config, tmp_path / 'a'))
        b = run_training(_in_dir(run_config, tmp_path / 'b'))
        assert _metrics_text(a) == _metrics_text(b)
        ckpt_a, ckpt_b = load_checkpoint(a.checkpoint_path), load_checkpoint(b.checkpoint_path)
        assert ckpt_a.student.equal(ckpt_b.student)
        assert ckpt_a.teacher.equal(ckpt_b.teacher)
        np.testing.assert_array_equal(ckpt_a.center, ckpt_b.center)

    def test_other_seed_differs(self, run_config, tmp_path):
        a = run_training(_in_dir(run_config, tmp_path / 'a'))
        other = run_config.replace(train=replace(run_config.train, seed=12, out_dir=str(tmp_path / 'c')))
        c = run_training(other)
        assert _metrics_text(a) != _metrics_text(c)

    def test_resumed_run_matches_uninterrupted(self, run_config, tmp_path):
        whole = run_training(_in_dir(run_config, tmp_path / 'whole'))

        split_config = _in_dir(run_config, tmp_path / 'split')
        first = run_training(split_config, stop_after=4)
        assert first.steps_run == 4
        assert os.path.basename(first.checkpoint_path) == 'step_4.dck'
        second = run_training(split_config, resume_from=first.checkpoint_path)
        assert second.steps_run == 2

        assert _metrics_text(second) == _metrics_text(whole)
        ckpt_whole, ckpt_split = load_checkpoint(whole.checkpoint_path), load_checkpoint(second.checkpoint_path)
        assert ckpt_split.step == ckpt_whole.step == 6
        assert ckpt_split.student.equal(ckpt_whole.student)
        assert ckpt_split.teacher.equal(ckpt_whole.teacher)
        np.testing.assert_array_equal(ckpt_split.center, ckpt_whole.center)
        for name, value in ckpt_whole.optimizer.items():
            np.testing.assert_array_equal(ckpt_split.optimizer[name], value)

    @pytest.mark.parametrize('checkpoint_name', ['epoch_1.dck', 'step_3.dck'])
    def test_resume_from_epoch_boundary(self, run_config, tiny_dataset, tiny_test_dataset, tmp_path,
                                        checkpoint_name):
        data = dict(train_dataset=tiny_dataset, test_dataset=tiny_test_dataset)
        whole = run_training(_in_dir(run_config, tmp_path / 'whole'), **data)
        split_config = _in_dir(run_config, tmp_path / 'split')
        first = run_training(split_config, stop_after=3, **data)
        assert [s.step for s in first.snapshots] == [3]
        checkpoint = os.path.join(split_config.train.out_dir, checkpoint_name)
        resumed = run_training(split_config, resume_from=checkpoint, **data)
        assert _metrics_text(resumed) == _metrics_text(whole)
        assert [r['step'] for r in read_records(resumed.eval_path)] == [3, 6]
        assert read_records(resumed.eval_path) == read_records(whole.eval_path)

    def test_restore_rejects_other_settings(self, run_config, tmp_path):
        first = run_training(run_config, stop_after=2)
        changed = run_config.replace(train=replace(run_config.train, epochs=3))
        engine = DistillationEngine(changed)
        with pytest.raises(ConfigError):
            engine.restore(load_checkpoint(first.checkpoint_path))

    def test_evaluation_snapshots(self, run_config, tiny_dataset, tiny_test_dataset):
        engine = DistillationEngine(run_config, train_dataset=tiny_dataset, test_dataset=tiny_test_dataset)
        result = engine.train()
        assert [s.step for s in result.snapshots] == [3, 6]
        with open(result.eval_path, encoding='utf-8') as handle:
            lines = [json.loads(line) for line in handle]
        assert lines == [s.to_record() for s in result.snapshots]
        for snapshot in result.snapshots:
            assert 0.0 <= snapshot.teacher_knn <= 1.0
            assert 0.0 <= snapshot.student_knn <= 1.0

    def test_no_test_set_no_snapshots(self, run_config):
        assert run_training(run_config).snapshots == []

    def test_channel_mismatch(self, run_config, tiny_dataset):
        gray = Dataset(tiny_dataset.pixels[:, :1].copy(), tiny_dataset.labels, tiny_dataset.class_names)
        with pytest.raises(ConfigError):
            DistillationEngine(run_config, train_dataset=gray)


def _metrics(step, **overrides):
    values = dict(step=step, epoch=0, loss=1.0, h=2.0, kl=0.5, ce=2.5, momentum=0.996, tau_t=0.04, lr=1e-4, wd=0.04)
    values.update(overrides)
    return StepMetrics(**values)


class TestTrainingGuard:

    def test_non_finite_step_is_dumped_and_raised(self, tmp_path):
        guard = TrainingGuard(str(tmp_path), kl_threshold=1e-3, patience=3)
        with pytest.raises(NumericError, match='loss'):
            guard.check_step(_metrics(5, loss=math.nan))
        with open(tmp_path / 'failure_step_5.json', encoding='utf-8') as handle:
            dumped = json.load(handle)
        assert dumped['loss'] == 'nan'
        assert dumped['step'] == 5

    def test_collapse_warning_after_patience(self):
        guard = TrainingGuard(None, kl_threshold=1e-3, patience=3)
        flags = [guard.check_step(_metrics(s, kl=1e-5))[0] for s in range(4)]
        assert flags == [False, False, True, True]
        assert guard.status.collapse_warnings == 1
        guard.check_step(_metrics(4, kl=0.2))
        assert guard.status.low_kl_streak == 0

    def test_healthy_steps(self):
        guard = TrainingGuard(None, patience=2)
        assert guard.check_step(_metrics(0)) == (False, None)


class TestMetricsWriter:

    def test_truncation_on_resume(self, tmp_path):
        path = str(tmp_path / 'm.jsonl')
        writer = MetricsWriter(path)
        for step in range(5):
            writer.write({'step': step, 'loss': float(step)})
        MetricsWriter(path, keep_through_step=2)
        assert [r['step'] for r in read_records(path)] == [0, 1, 2]

    def test_missing_file_is_not_created(self, tmp_path):
        path = tmp_path / 'eval.jsonl'
        MetricsWriter(str(path), keep_through_step=3)
        assert not path.exists()


class TestCollapseStudy:

    def test_study_config(self, run_config):
        arm = study_config(run_config, 'no-sharpen', steps=7, n_train=12, out_dir='x')
        assert arm.train.epochs == 3
        assert (arm.train.eval_every, arm.train.checkpoint_every) == (0, 0)
        assert arm.distill.teacher_temp == arm.distill.teacher_temp_final == 1.0
        assert study_config(run_config, 'no-center', 1, 12, 'x').distill.teacher_norm == 'none'

    def test_bad_arguments(self, run_config):
        with pytest.raises(ParameterError):
            study_config(run_config, 'no-momentum', 5, 12, 'x')
        with pytest.raises(ParameterError):
            study_config(run_config, 'both', 0, 12, 'x')

    def test_curve_written(self, run_config, tiny_dataset, tmp_path):
        summary = run_collapse_study(run_config, 'no-center', steps=4, train_dataset=tiny_dataset,
                                     out_dir=str(tmp_path / 'arm'))
        assert summary.steps == 4
        assert summary.log_k == pytest.approx(math.log(16))
        with open(summary.csv_path, newline='', encoding='utf-8') as handle:
            rows = list(csv.reader(handle))
        assert tuple(rows[0]) == CSV_COLUMNS
        assert [int(row[0]) for row in rows[1:]] == [0, 1, 2, 3]
        assert os.path.exists(os.path.join(str(tmp_path / 'arm'), METRICS_FILE))
        assert 0.0 <= summary.final_h <= summary.log_k + 1e-6
        late = [float(row[2]) for row in rows[3:]]
        assert summary.late_kl_min == pytest.approx(min(late))
        assert summary.late_kl == pytest.approx(sum(late) / len(late))
        assert summary.late_kl_min <= summary.late_kl
