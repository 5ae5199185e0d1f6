import logging
import math
from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest

from services import tensor_core as tc
from services.corpus import split_cohort
from services.errors import ConfigError, DivergenceError
from services.model import Inpatient2Vec, build_day_batch
from services.training import (
    TrainConfig,
    evaluate_loss,
    iter_batches,
    loss_masked,
    loss_next_day,
    make_batch,
    masked_accuracy,
    pretrain,
    sample_day_pairs,
    select_masks,
    total_loss,
    unigram_accuracy,
)


class TestTrainConfig:
    @pytest.mark.parametrize("changes", [
        {"mask_rate": 0.0},
        {"mask_rate": 1.0},
        {"batch_size": 0},
        {"optimizer": "sgd"},
        {"next_day_loss": "hinge"},
        {"epochs": -1},
    ])
    def test_invalid(self, changes):
        with pytest.raises(ConfigError):
            TrainConfig(**changes).validate()

    def test_switches_reach_model_config(self, small_config):
        config = TrainConfig(pairwise_day_task=True, unmasked_day_reps=True).model_config(small_config)
        assert config.pairwise_day_task and config.unmasked_day_reps
        assert not config.diagnosis_as_activity


class TestSelectMasks:
    def test_exact_count(self, tiny_cohort):
        plan = select_masks(tiny_cohort, 0.15, seed=0)
        assert plan.n_tokens == 21
        assert plan.n_masked == 3

    def test_never_masks_whole_day(self, small_cohort):
        plan = select_masks(small_cohort, 0.4, seed=1)
        for (v, d), positions in plan.positions.items():
            assert len(positions) < len(small_cohort.visits[v].days[d])

    def test_targets_are_the_hidden_activities(self, small_cohort):
        plan = select_masks(small_cohort, 0.15, seed=2)
        for key, positions in plan.positions.items():
            v, d = key
            activities = small_cohort.visits[v].days[d].activities
            assert plan.targets[key] == tuple(activities[j] for j in positions)

    def test_seeded(self, small_cohort):
        assert select_masks(small_cohort, 0.15, 4).positions == select_masks(small_cohort, 0.15, 4).positions
        assert select_masks(small_cohort, 0.15, 4).positions != select_masks(small_cohort, 0.15, 5).positions

    def test_capacity_cap(self, tiny_cohort, caplog):
        with caplog.at_level(logging.WARNING):
            plan = select_masks(tiny_cohort, 0.5, seed=0)
        assert plan.n_masked == 10
        assert "can be masked" in caplog.text

    def test_for_visits_keeps_order(self, tiny_cohort):
        plan = select_masks(tiny_cohort, 0.3, seed=0)
        per_visit = plan.for_visits([3, 0])
        assert per_visit[0] == {d: p for (v, d), p in plan.positions.items() if v == 3}
        assert per_visit[1] == {d: p for (v, d), p in plan.positions.items() if v == 0}


def test_iter_batches_covers_every_visit():
    batches = list(iter_batches(10, 4, np.random.default_rng(0)))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches)) == list(range(10))


class TestLosses:
    def test_untrained_masked_loss_near_uniform(self, tiny_cohort, tiny_model):
        plan = select_masks(tiny_cohort, 0.3, seed=0)
        batch = make_batch(tiny_cohort, range(4), plan, tiny_model)
        loss = loss_masked(tiny_model, batch, tiny_model.encode_batch(batch).per_token)
        assert loss.item() == pytest.approx(math.log(5), abs=0.2)

    def test_untrained_next_day_loss_near_uniform(self, tiny_cohort, tiny_model):
        batch = build_day_batch(tiny_cohort.visits, tiny_cohort.vocabulary)
        loss = loss_next_day(tiny_model, batch, tiny_model.day_representations(batch))
        assert loss.item() == pytest.approx(math.log(5), abs=0.05)
        sigmoid = loss_next_day(tiny_model, batch, tiny_model.day_representations(batch), "sigmoid")
        assert sigmoid.item() == pytest.approx(math.log(2), abs=0.02)

    def test_next_day_averages_days_then_visits(self, tiny_cohort, tiny_model):
        batch = build_day_batch(tiny_cohort.visits, tiny_cohort.vocabulary)
        t_cls = tiny_model.day_representations(batch)
        per_visit = []
        for v, visit in enumerate(tiny_cohort.visits):
            start = int(batch.visit_start[v])
            terms = []
            for t in range(2, visit.los + 1):
                h = tiny_model.encode_prefix_days([t_cls[start + j] for j in range(t - 1)])
                target = np.zeros(5)
                target[list(visit.days[t - 1].activities)] = 1.0
                terms.append(tc.cross_entropy(tiny_model.next_day_head(h), target / target.sum()).item())
            per_visit.append(np.mean(terms))
        expected = np.mean(per_visit)
        assert loss_next_day(tiny_model, batch, t_cls).item() == pytest.approx(expected, abs=1e-12)

    def test_no_multi_day_visit(self, tiny_cohort, tiny_model):
        visit = tiny_cohort.visits[0]
        batch = build_day_batch([replace(visit, days=visit.days[:1])], tiny_cohort.vocabulary)
        with pytest.raises(ValueError):
            loss_next_day(tiny_model, batch, tiny_model.day_representations(batch))

    def test_total_is_weighted_sum(self, tiny_cohort, tiny_model):
        plan = select_masks(tiny_cohort, 0.3, seed=0)
        batch = make_batch(tiny_cohort, range(4), plan, tiny_model)
        config = TrainConfig(mask_weight=2.0, next_weight=0.5)
        losses = total_loss(tiny_model, batch, config)
        assert losses.total.item() == pytest.approx(2.0 * losses.masked + 0.5 * losses.next_day)

    def test_unmasked_day_reps_change_next_loss(self, tiny_cohort, tiny_model):
        plan = select_masks(tiny_cohort, 0.3, seed=0)
        batch = make_batch(tiny_cohort, range(4), plan, tiny_model)
        masked = total_loss(tiny_model, batch, TrainConfig()).next_day
        clean = total_loss(tiny_model, batch, TrainConfig(unmasked_day_reps=True)).next_day
        expected = loss_next_day(tiny_model, batch, tiny_model.day_representations(batch)).item()
        assert clean == pytest.approx(expected, abs=1e-12)
        assert masked != clean


class TestPairwiseDays:
    def test_labels_match_consecutiveness(self, tiny_cohort):
        batch = build_day_batch(tiny_cohort.visits, tiny_cohort.vocabulary)
        first, second, labels = sample_day_pairs(batch, 200, np.random.default_rng(0))
        consecutive = (batch.day_visit[first] == batch.day_visit[second]) & (
            batch.day_index[second] == batch.day_index[first] + 1)
        npt.assert_array_equal(consecutive, labels == 1.0)
        assert 0.3 < labels.mean() < 0.7

    def test_positive_rate_is_one_half(self, tiny_cohort):
        batch = build_day_batch(tiny_cohort.visits, tiny_cohort.vocabulary)
        n = 4000
        _, _, labels = sample_day_pairs(batch, n, np.random.default_rng(1))
        assert abs(labels.mean() - 0.5) <= 4.0 * math.sqrt(0.25 / n)

    def test_total_loss_uses_pair_head(self, tiny_cohort, small_config):
        model = Inpatient2Vec(replace(small_config, pairwise_day_task=True), tiny_cohort.vocabulary)
        plan = select_masks(tiny_cohort, 0.3, seed=0)
        batch = make_batch(tiny_cohort, range(4), plan, model)
        losses = total_loss(model, batch, TrainConfig(pairwise_day_task=True), np.random.default_rng(0))
        assert losses.next_day == pytest.approx(math.log(2), abs=0.1)


class TestGradients:
    @pytest.fixture
    def masked_batch(self, tiny_cohort):
        def build(model):
            return make_batch(tiny_cohort, range(4), select_masks(tiny_cohort, 0.3, seed=0), model)
        return build

    @pytest.mark.parametrize("pairwise", [False, True])
    def test_total_loss_matches_finite_differences(self, tiny_cohort, small_config, masked_batch, pairwise):
        config = TrainConfig(pairwise_day_task=pairwise)
        model = Inpatient2Vec(config.model_config(small_config), tiny_cohort.vocabulary, seed=1)
        batch = masked_batch(model)
        # scale weights up so gradients are well above the finite-difference noise
        for p in model.parameters():
            p.data *= 20.0

        def loss():
            return total_loss(model, batch, config, np.random.default_rng(0)).total

        assert tc.grad_check(loss, model.parameters(), max_coords=8, atol=1e-6) < 1e-4

    def test_every_parameter_gets_a_gradient(self, tiny_cohort, tiny_model, masked_batch):
        batch = masked_batch(tiny_model)
        for p in tiny_model.parameters():
            p.zero_grad()
        tc.backward(total_loss(tiny_model, batch, TrainConfig()).total)
        dead = [name for name, p in tiny_model.named_parameters() if p.grad is None or not np.any(p.grad)]
        assert dead == []

    def test_pair_head_gets_a_gradient(self, tiny_cohort, small_config, masked_batch):
        config = TrainConfig(pairwise_day_task=True)
        model = Inpatient2Vec(config.model_config(small_config), tiny_cohort.vocabulary)
        tc.backward(total_loss(model, masked_batch(model), config, np.random.default_rng(0)).total)
        assert np.any(model.pair_w.grad) and np.any(model.pair_b.grad)
        assert np.any(model.encoder.layers[0].w_q.grad)

    @pytest.mark.parametrize("optimizer", ["adam", "adadelta"])
    def test_zero_learning_rate_changes_nothing(self, tiny_model, masked_batch, optimizer):
        params = tiny_model.parameters()
        for p in params:
            p.zero_grad()
        tc.backward(total_loss(tiny_model, masked_batch(tiny_model), TrainConfig()).total)
        before = tiny_model.state_dict()
        tc.optimizer_step(params, tc.make_optimizer(optimizer, 0.0, 0.01))
        for name, values in tiny_model.state_dict().items():
            npt.assert_array_equal(values, before[name], err_msg=name)

    def test_small_adam_step_lowers_loss(self, tiny_model, masked_batch):
        batch = masked_batch(tiny_model)
        params = tiny_model.parameters()
        for p in params:
            p.zero_grad()
        before = total_loss(tiny_model, batch, TrainConfig()).total
        tc.backward(before)
        tc.optimizer_step(params, tc.make_optimizer("adam", 1e-6, 0.0))
        assert total_loss(tiny_model, batch, TrainConfig()).total.item() < before.item()


class TestPretrain:
    @pytest.fixture
    def splits(self, small_cohort):
        return split_cohort(small_cohort, seed=0)

    def test_log_and_selection(self, splits, small_config, fast_train):
        train, valid, _ = splits
        checkpoint = pretrain(train, valid, small_config, replace(fast_train, epochs=2), {"note": "x"})
        assert [e.epoch for e in checkpoint.log] == [0, 1, 2]
        assert all(e.valid_loss is not None for e in checkpoint.log)
        best = checkpoint.metadata["best_epoch"]
        assert checkpoint.log[best].valid_loss == min(e.valid_loss for e in checkpoint.log)
        assert checkpoint.metadata["note"] == "x"
        assert (checkpoint.optimizer is not None) == (best == 2)

    def test_training_reduces_loss(self, splits, small_config, fast_train):
        train, _, _ = splits
        checkpoint = pretrain(train, None, small_config, replace(fast_train, epochs=3, lr=1e-2))
        assert checkpoint.log[-1].train_loss < checkpoint.log[0].train_loss
        assert checkpoint.metadata["best_epoch"] == 3

    def test_deterministic(self, splits, small_config, fast_train):
        train, valid, _ = splits
        a = pretrain(train, valid, small_config, fast_train).model.state_dict()
        b = pretrain(train, valid, small_config, fast_train).model.state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_zero_epochs_returns_initial_model(self, splits, small_config, fast_train):
        train, valid, _ = splits
        checkpoint = pretrain(train, valid, small_config, replace(fast_train, epochs=0))
        initial = Inpatient2Vec(small_config, train.vocabulary, seed=fast_train.seed).state_dict()
        state = checkpoint.model.state_dict()
        assert all(np.array_equal(initial[k], state[k]) for k in state)

    def test_divergence(self, splits, small_config, fast_train, monkeypatch):
        def poison(params, state):
            params[0].data[0, 0] = np.nan

        monkeypatch.setattr(tc, "optimizer_step", poison)
        with pytest.raises(DivergenceError) as exc:
            pretrain(splits[0], None, small_config, fast_train)
        assert exc.value.epoch == 1 and exc.value.batch == 0


class TestDiagnostics:
    def test_evaluate_loss_parts(self, tiny_cohort, tiny_model):
        plan = select_masks(tiny_cohort, 0.3, seed=0)
        total, mask, nxt = evaluate_loss(tiny_model, tiny_cohort, plan, TrainConfig(batch_size=2))
        assert total == pytest.approx(mask + nxt)

    def test_accuracies_are_fractions(self, tiny_cohort, tiny_model):
        plan = select_masks(tiny_cohort, 0.3, seed=0)
        assert 0.0 <= masked_accuracy(tiny_model, tiny_cohort, plan) <= 1.0
        top = unigram_accuracy(tiny_cohort, plan)
        # A1 (id 0) is on five days, every other activity on four
        targets = [a for ids in plan.targets.values() for a in ids]
        assert top == pytest.approx(np.mean(np.array(targets) == 0))
