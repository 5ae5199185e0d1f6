from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest

from services import tensor_core as tc
from services.checkpoint import Checkpoint
from services.corpus import build_cohort
from services.downstream import (
    DownstreamPredictor,
    finetune_los,
    finetune_next_day,
    finetune_report,
    predict_rankings,
    pretrained_head_report,
)
from services.errors import CompatibilityError
from services.evaluation import constant_los_report, remaining_los_slots
from services.model import Inpatient2Vec


@pytest.fixture
def checkpoint(tiny_model):
    return Checkpoint(tiny_model)


@pytest.fixture
def no_epochs(fast_train):
    return replace(fast_train, epochs=0)


class TestPredictor:
    def test_parameters_per_task(self, tiny_model):
        next_names = [n for n, _ in DownstreamPredictor(tiny_model, "next").named_parameters()]
        los_names = [n for n, _ in DownstreamPredictor(tiny_model, "los").named_parameters()]
        assert "next_head.weight" in next_names and "next_head.weight" not in los_names
        assert not any(n.startswith("masked_head") for n in next_names + los_names)
        assert los_names[-2:] == ["los_head.weight", "los_head.bias"]
        assert next_names[-2:] == ["attention.weight", "attention.context"]

    def test_unknown_task(self, tiny_model):
        with pytest.raises(ValueError):
            DownstreamPredictor(tiny_model, "mortality")

    def test_starts_as_pretrained_head(self, tiny_model, tiny_cohort):
        predictor = DownstreamPredictor(tiny_model, "next")
        batch = predictor.batch(tiny_cohort.visits)
        expected = tiny_model.next_day_head(tiny_model.prefix_states(tiny_model.day_representations(batch), batch))
        npt.assert_allclose(predictor.next_day_logits(batch).data, expected.data, atol=1e-12)

    def test_los_starts_near_offset(self, tiny_model, tiny_cohort):
        predictor = DownstreamPredictor(tiny_model, "los", los_offset=1.5)
        out = predictor.remaining_los(predictor.batch(tiny_cohort.visits)).data
        assert out.shape == (7,)
        npt.assert_allclose(out, 1.5, atol=0.05)

    def test_pooling_gradients(self, tiny_cohort, small_config, rng):
        predictor = DownstreamPredictor(Inpatient2Vec(small_config, tiny_cohort.vocabulary, seed=2), "next")
        predictor.w_att.data[...] = rng.standard_normal(predictor.w_att.shape)
        predictor.w_ctx.data[...] = rng.standard_normal(predictor.w_ctx.shape)
        for p in predictor.backbone.parameters():
            p.data *= 20.0
        batch = predictor.batch(tiny_cohort.visits)
        params = [predictor.w_att, predictor.w_ctx, predictor.backbone.lstm.forward.w_h]
        assert tc.grad_check(lambda: predictor.loss(batch), params, max_coords=20, atol=1e-6) < 1e-4


class TestFinetune:
    def test_untrained_matches_pretrained_head(self, checkpoint, tiny_cohort, no_epochs):
        _, report = finetune_next_day(checkpoint, tiny_cohort, tiny_cohort, no_epochs)
        head = pretrained_head_report(checkpoint, tiny_cohort)
        npt.assert_array_equal(report.values, head.values)
        assert report.slots == head.slots

    def test_next_day_training_runs(self, small_cohort, small_config, fast_train):
        checkpoint = Checkpoint(Inpatient2Vec(small_config, small_cohort.vocabulary))
        predictor, report = finetune_next_day(checkpoint, small_cohort, small_cohort, replace(fast_train, epochs=1))
        assert report.count == sum(v.los - 1 for v in small_cohort.visits)
        assert 0.0 <= report.recall_a <= 1.0
        assert not np.array_equal(predictor.w_ctx.data, 0.0)

    def test_backbone_is_copied(self, checkpoint, tiny_cohort, fast_train):
        before = checkpoint.model.state_dict()
        finetune_next_day(checkpoint, tiny_cohort, tiny_cohort, fast_train)
        after = checkpoint.model.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_los_offset_is_train_mean(self, checkpoint, tiny_cohort, no_epochs):
        _, targets = remaining_los_slots(tiny_cohort)
        predictor, report = finetune_los(checkpoint, tiny_cohort, tiny_cohort, no_epochs)
        assert predictor.los_b.data[0] == pytest.approx(targets.mean())
        assert report.rmse == pytest.approx(constant_los_report(tiny_cohort).rmse, abs=0.05)

    def test_los_training_runs(self, checkpoint, tiny_cohort, fast_train):
        _, report = finetune_los(checkpoint, tiny_cohort, tiny_cohort, replace(fast_train, epochs=2))
        assert report.residuals.shape == (7,)
        assert np.isfinite(report.rmse)

    def test_control_uses_random_backbone(self, checkpoint, tiny_cohort, no_epochs):
        report, control = finetune_report(checkpoint, tiny_cohort, tiny_cohort, replace(no_epochs, seed=5))
        assert control is not None and control.count == report.count
        assert control.slots == report.slots

    def test_threads_do_not_change_results(self, small_cohort, small_config):
        checkpoint = Checkpoint(Inpatient2Vec(small_config, small_cohort.vocabulary))
        predictor = DownstreamPredictor(checkpoint.model, "next")
        serial = predict_rankings(predictor, small_cohort, threads=1)
        threaded = predict_rankings(predictor, small_cohort, threads=4)
        npt.assert_array_equal(serial.values, threaded.values)

    def test_vocabulary_checked(self, checkpoint, no_epochs):
        other = build_cohort([("X1", "D9", [["B1"], ["B2"]])])
        with pytest.raises(CompatibilityError):
            finetune_next_day(checkpoint, other, other, no_epochs)
