"""
Self-distillation: teacher targets, loss structure, center and teacher updates, train_step
"""
import math

import numpy as np
import pytest
from scipy.special import log_softmax as np_log_softmax, softmax as np_softmax

from src import ndtensor as nd
from src.distill import (DistillConfig, DistillState, build_teacher_targets, collapse_metrics, dino_loss,
                         ema_update, pair_loss, sinkhorn, softmax_batch, teacher_probs_centered, train_step,
                         update_center, view_pairs, _forward_views)
from src.error_reporter import ConfigError, ContractError, NumericError, ParameterError
from src.model import DinoModel
from src.ndtensor import Tensor
from src.optimizer import AdamW, OptimConfig
from src.rng import derive_rng
from src.schedules import StepHyperparams
from src.views import make_batch_views
from src.vit import ParamSet


def _hyper(step=0, lr=1e-3, wd=0.04, momentum=0.996, teacher_temp=0.04):
    return StepHyperparams(step, lr, wd, momentum, teacher_temp)


class TestBatchNormalizations:

    def test_single_sinkhorn_round_is_softmax_batch(self):
        rng = derive_rng(10)
        worst = 0.0
        for _ in range(1000):
            n, k = rng.integers(2, 9, size=2)
            logits = rng.normal(size=(n, k)) * 3.0
            tau = rng.uniform(0.05, 1.0)
            worst = max(worst, np.abs(softmax_batch(logits, tau) - sinkhorn(logits, tau, 1)).max())
        assert worst <= 1e-12

    def test_sinkhorn_balances_columns(self):
        logits = derive_rng(11).normal(size=(8, 4))
        q = sinkhorn(logits, 1.0, 50)
        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(q.sum(axis=0), 8 / 4, atol=1e-4)

    def test_sinkhorn_arguments(self):
        with pytest.raises(ParameterError):
            sinkhorn(np.zeros((2, 2)), 0.0, 3)
        with pytest.raises(ParameterError):
            sinkhorn(np.zeros((2, 2)), 0.1, 0)

    def test_sinkhorn_rejects_non_finite(self):
        logits = np.array([[np.inf, 0.0], [0.0, 1.0]])
        with pytest.raises(NumericError):
            sinkhorn(logits, 0.1, 3)

    def test_batch_norms_act_on_both_globals_jointly(self):
        rng = derive_rng(12)
        teacher = [rng.normal(size=(3, 5)), rng.normal(size=(3, 5))]
        config = DistillConfig(teacher_norm='sinkhorn', sinkhorn_iters=4)
        targets = build_teacher_targets(teacher, np.zeros(5), config, 0.04)
        joint = sinkhorn(np.concatenate(teacher), config.sinkhorn_tau, 4)
        np.testing.assert_allclose(np.concatenate(targets), joint, atol=1e-12)


class TestTargets:

    def test_centering_subtracts_center(self):
        rng = derive_rng(13)
        logits = rng.normal(size=(4, 6))
        center = rng.normal(size=6)
        config = DistillConfig()
        targets = build_teacher_targets([logits, logits], center, config, 0.07)
        np.testing.assert_allclose(targets[0], np_softmax((logits - center) / 0.07, axis=1), rtol=1e-5)

    def test_none_ignores_center(self):
        logits = derive_rng(14).normal(size=(4, 6))
        targets = build_teacher_targets([logits, logits], np.full(6, 5.0), DistillConfig(teacher_norm='none'), 0.1)
        np.testing.assert_allclose(targets[1], np_softmax(logits / 0.1, axis=1), rtol=1e-5)

    @pytest.mark.parametrize('norm', ['softmax_batch', 'sinkhorn'])
    def test_batch_norms_ignore_center(self, norm):
        rng = derive_rng(15)
        teacher = [rng.normal(size=(3, 6)), rng.normal(size=(3, 6))]
        config = DistillConfig(teacher_norm=norm)
        plain = build_teacher_targets(teacher, np.zeros(6), config, 0.04)
        shifted = build_teacher_targets(teacher, rng.normal(size=6) * 5.0, config, 0.04)
        for a, b in zip(plain, shifted):
            np.testing.assert_array_equal(a, b)

    def test_centered_probs_shift_invariant(self):
        rng = derive_rng(16)
        logits = rng.normal(size=(5, 8)) * 3.0
        center = rng.normal(size=8)
        base = teacher_probs_centered(logits, center, 0.07)
        np.testing.assert_allclose(base.sum(axis=1), 1.0, atol=1e-12)
        row_shift = rng.normal(size=(5, 1)) * 10.0
        np.testing.assert_allclose(teacher_probs_centered(logits + row_shift, center, 0.07), base, atol=1e-9)
        np.testing.assert_allclose(teacher_probs_centered(logits, center - 4.0, 0.07), base, atol=1e-9)

    def test_teacher_logits_must_be_off_tape(self):
        on_tape = Tensor(np.zeros((2, 3)), requires_grad=True)
        with pytest.raises(ContractError):
            build_teacher_targets([on_tape, on_tape], np.zeros(3), DistillConfig(), 0.04)

    def test_unknown_norm(self):
        with pytest.raises(ConfigError):
            DistillConfig(teacher_norm='whitening')


class TestLoss:

    @pytest.mark.parametrize('n_views', [2, 3, 8])
    def test_pair_structure(self, n_views):
        pairs = view_pairs(n_views)
        assert len(pairs) == 2 * (n_views - 1)
        assert (0, 0) not in pairs and (1, 1) not in pairs

    def test_matches_pairwise_oracle(self, f64):
        rng = derive_rng(15)
        n_views, b, k = 5, 3, 7
        student = [rng.normal(size=(b, k)) for _ in range(n_views)]
        teacher = [rng.normal(size=(b, k)) for _ in range(2)]
        center = rng.normal(size=k) * 0.1
        config = DistillConfig()
        state = DistillState(ParamSet({}), center)
        loss = dino_loss([Tensor(s) for s in student], teacher, state, config, teacher_temp=0.05)

        total, count = 0.0, 0
        for t in range(2):
            p_t = np_softmax((teacher[t] - center) / 0.05, axis=1)
            for s in range(n_views):
                if s == t:
                    continue
                total += -(p_t * np_log_softmax(student[s] / config.student_temp, axis=1)).sum(axis=1).mean()
                count += 1
        assert count == 2 * (n_views - 1)
        assert abs(float(loss.data) - total / count) < 1e-6

    def test_needs_two_teacher_views(self):
        with pytest.raises(ContractError):
            pair_loss([Tensor(np.zeros((1, 3)))] * 3, [np.ones((1, 3)) / 3], 0.1)

    def test_collapse_metric_identity(self):
        rng = derive_rng(16)
        for _ in range(50):
            p = np_softmax(rng.normal(size=(4, 9)) * 5, axis=1)
            q = np_softmax(rng.normal(size=(4, 9)) * 5, axis=1)
            metrics = collapse_metrics(p, q)
            assert abs(metrics.ce - (metrics.h + metrics.kl)) < 1e-6
            assert metrics.kl >= 0.0

    def test_uniform_teacher_entropy(self):
        p = np.full((2, 16), 1 / 16)
        metrics = collapse_metrics(p, p)
        assert metrics.h == pytest.approx(math.log(16))
        assert metrics.kl == pytest.approx(0.0, abs=1e-12)

    def test_one_hot_teacher_entropy(self):
        p = np.eye(4)[[0, 2]]
        assert collapse_metrics(p, np.full((2, 4), 0.25)).h == 0.0


class TestUpdates:

    @pytest.mark.parametrize('momentum', [0.0, 0.9, 0.99, 1.0])
    def test_center_closed_form(self, momentum):
        rng = derive_rng(17)
        batch = rng.normal(size=(6, 5))
        g = batch.mean(axis=0)
        center = np.zeros(5)
        steps = 37
        for _ in range(steps):
            center = update_center(center, batch, momentum)
        np.testing.assert_allclose(center, g * (1.0 - momentum ** steps), atol=1e-10)

    def test_center_momentum_range(self):
        with pytest.raises(ParameterError):
            update_center(np.zeros(2), np.zeros((1, 2)), 1.5)

    def test_ema_endpoints(self, f64):
        rng = derive_rng(18)
        teacher = ParamSet({'w': Tensor(rng.normal(size=(3, 2)))})
        student = ParamSet({'w': Tensor(rng.normal(size=(3, 2)))})
        assert ema_update(teacher, student, 1.0).equal(teacher)
        assert ema_update(teacher, student, 0.0).equal(student)
        mixed = ema_update(teacher, student, 0.75)
        np.testing.assert_allclose(mixed['w'].data, 0.75 * teacher['w'].data + 0.25 * student['w'].data)

    def test_ema_requires_matching_sets(self):
        with pytest.raises(ContractError):
            ema_update(ParamSet({'a': Tensor(np.zeros(2))}), ParamSet({'b': Tensor(np.zeros(2))}), 0.5)


class TestStudentGradient:

    @pytest.mark.parametrize('seed', range(5))
    def test_full_loss_gradient(self, f64, seed, tiny_vit, tiny_head, tiny_views):
        model = DinoModel.create(tiny_vit, tiny_head, seed)
        images = derive_rng(seed, 99).uniform(size=(2, 3, 16, 16))
        views = make_batch_views(images, [0, 1], tiny_views, seed, 0)
        with nd.no_grad():
            teacher = [t.data for t in _forward_views(model, views.slots[:2], model.params)]
        targets = build_teacher_targets(teacher, np.zeros(tiny_head.out_dim), DistillConfig(), 0.04)

        rng = derive_rng(seed, 98)
        for name in ('patch_embed.weight', 'pos_embed', 'blocks.0.attn.proj.weight',
                     'blocks.1.mlp.fc1.weight', 'head.mlp.0.weight', 'head.last_layer.weight_v'):
            def loss(value, name=name):
                params = ParamSet({**dict(model.params.items()), name: value})
                return pair_loss(_forward_views(model, views.slots, params), targets, 0.1)

            # Compare where the gradient is well above central-difference noise
            leaf = Tensor(model.params[name].data, requires_grad=True)
            nd.backward(loss(leaf))
            candidates = np.flatnonzero(np.abs(leaf.grad.reshape(-1)) > 1e-5)
            assert len(candidates) > 0, name
            coords = rng.choice(candidates, size=min(8, len(candidates)), replace=False)
            x = Tensor(model.params[name].data)
            assert nd.grad_check(loss, x, coords=coords) < 1e-4, name


class TestTrainStep:

    def _setup(self, tiny_vit, tiny_head, config=None):
        model = DinoModel.create(tiny_vit, tiny_head, seed=0)
        state = DistillState.initialize(model.params, tiny_head.out_dim)
        return model, state, AdamW(model.params, OptimConfig()), config or DistillConfig()

    def test_step_updates_everything(self, tiny_vit, tiny_head, tiny_views, tiny_dataset):
        model, state, optimizer, config = self._setup(tiny_vit, tiny_head)
        before = model.params.copy()
        images = tiny_dataset.images[:4]
        metrics = train_step(images, [0, 1, 2, 3], model, state, config, tiny_views, optimizer,
                             _hyper(momentum=0.9), seed=0)
        assert metrics.step == 0 and state.step == 1
        assert math.isfinite(metrics.loss)
        assert abs(metrics.ce - (metrics.h + metrics.kl)) < 1e-6
        assert set(metrics.to_record()) == {'step', 'epoch', 'loss', 'h', 'kl', 'ce', 'lambda', 'tau_t', 'lr', 'wd'}
        assert not model.params.equal(before)
        assert not state.teacher.equal(before) and not state.teacher.equal(model.params)
        assert np.any(state.center != 0)
        assert all(not t.requires_grad for _, t in state.teacher.items())

    def test_same_inputs_same_result(self, tiny_vit, tiny_head, tiny_views, tiny_dataset):
        runs = []
        for _ in range(2):
            model, state, optimizer, config = self._setup(tiny_vit, tiny_head)
            for step in range(2):
                metrics = train_step(tiny_dataset.images[:3], [0, 1, 2], model, state, config, tiny_views,
                                     optimizer, _hyper(step), seed=4)
            runs.append((metrics, model.params, state.center))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1].equal(runs[1][1])
        np.testing.assert_array_equal(runs[0][2], runs[1][2])

    def test_student_copy_mode(self, tiny_vit, tiny_head, tiny_views, tiny_dataset):
        model, state, optimizer, _ = self._setup(tiny_vit, tiny_head)
        config = DistillConfig(teacher_mode='student_copy')
        train_step(tiny_dataset.images[:2], [0, 1], model, state, config, tiny_views, optimizer, _hyper(), seed=0)
        assert state.teacher.equal(model.params)

    def test_previous_epoch_mode(self, tiny_vit, tiny_head, tiny_views, tiny_dataset):
        model, state, optimizer, _ = self._setup(tiny_vit, tiny_head)
        config = DistillConfig(teacher_mode='previous_epoch')
        initial = state.teacher.copy()
        train_step(tiny_dataset.images[:2], [0, 1], model, state, config, tiny_views, optimizer, _hyper(0), seed=0)
        train_step(tiny_dataset.images[:2], [0, 1], model, state, config, tiny_views, optimizer, _hyper(1), seed=0)
        assert state.teacher.equal(initial)
        end_of_epoch = model.params.copy()
        train_step(tiny_dataset.images[:2], [0, 1], model, state, config, tiny_views, optimizer, _hyper(2),
                   seed=0, epoch=1)
        assert state.teacher.equal(end_of_epoch)

    def test_center_frozen_without_centering(self, tiny_vit, tiny_head, tiny_views, tiny_dataset):
        model, state, optimizer, _ = self._setup(tiny_vit, tiny_head)
        config = DistillConfig(teacher_norm='sinkhorn')
        train_step(tiny_dataset.images[:2], [0, 1], model, state, config, tiny_views, optimizer, _hyper(), seed=0)
        np.testing.assert_array_equal(state.center, 0.0)

    def test_frozen_without_learning_rate_or_teacher_update(self, tiny_vit, tiny_head, tiny_views, tiny_dataset):
        model, state, optimizer, config = self._setup(tiny_vit, tiny_head)
        student, teacher = model.params.copy(), state.teacher.copy()
        for step in range(2):
            metrics = train_step(tiny_dataset.images[:3], [0, 1, 2], model, state, config, tiny_views, optimizer,
                                 _hyper(step, lr=0.0, momentum=1.0), seed=0)
            assert math.isfinite(metrics.loss)
        assert model.params.equal(student)
        assert state.teacher.equal(teacher)
        assert state.step == 2

    def test_teacher_is_ema_of_updated_student(self, tiny_vit, tiny_head, tiny_views, tiny_dataset):
        model, state, optimizer, config = self._setup(tiny_vit, tiny_head)
        for step in range(2):
            teacher_before = state.teacher.copy()
            train_step(tiny_dataset.images[:3], [0, 1, 2], model, state, config, tiny_views, optimizer,
                       _hyper(step, momentum=0.7), seed=1)
            for name, tensor in state.teacher.items():
                expected = 0.7 * teacher_before[name].data + 0.3 * model.params[name].data
                np.testing.assert_allclose(tensor.data, expected, rtol=1e-5, atol=1e-7, err_msg=name)
        assert not state.teacher.equal(model.params)
