"""
Downstream Prediction Service.
Fine-tunes a pretrained Inpatient2Vec backbone for next-day activity
prediction or remaining-LOS regression and scores it on a held-out split.

The predictor is the backbone's day encoder and prefix BiLSTM followed by a
location-based attention pooling over the prefix states. The pooled context
enters through a zero-initialised projection, so before any update the
next-day predictor is exactly the pretrained next-day head.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from services import tensor_core as tc
from services.checkpoint import Checkpoint
from services.corpus import Cohort, VisitRecord
from services.errors import DivergenceError, InputError, NumericalError
from services.evaluation import (
    LosReport,
    RecallReport,
    map_visits,
    next_day_slots,
    rank_activities,
    remaining_los_slots,
)
from services.model import DayBatch, Inpatient2Vec, build_day_batch
from services.tensor_core import Tensor
from services.training import TrainConfig, iter_batches

logger = logging.getLogger(__name__)

TASKS = ("next", "los")


class DownstreamPredictor:
    def __init__(self, backbone: Inpatient2Vec, task: str = "next", seed: int = 0, los_offset: float = 0.0):
        if task not in TASKS:
            raise ValueError(f"unknown downstream task {task!r}")
        self.backbone = backbone
        self.task = task
        width = 2 * backbone.config.lstm_hidden
        self.w_att = tc.zeros((width, 1))
        self.w_ctx = tc.zeros((width, width))
        if task == "los":
            rng = np.random.default_rng([seed, 7])
            self.los_w = tc.truncated_normal((width, 1), rng, backbone.config.init_std)
            self.los_b = tc.tensor([los_offset], requires_grad=True)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        skip = ("masked_head.", "pair_head.") + (("next_head.",) if self.task == "los" else ())
        named = [(n, p) for n, p in self.backbone.named_parameters() if not n.startswith(skip)]
        named += [("attention.weight", self.w_att), ("attention.context", self.w_ctx)]
        if self.task == "los":
            named += [("los_head.weight", self.los_w), ("los_head.bias", self.los_b)]
        return named

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def batch(self, visits: Sequence[VisitRecord]) -> DayBatch:
        return build_day_batch(visits, self.backbone.vocabulary, None, self.backbone.config.diagnosis_as_activity)

    def pooled_states(self, batch: DayBatch) -> Tensor:
        t_cls = self.backbone.day_representations(batch)
        last, states, mask = self.backbone.prefix_states(t_cls, batch, sequences=True)
        n_pairs, width = states.shape[0], states.shape[1]
        scores = (states @ self.w_att).reshape(n_pairs, width)
        alpha = tc.softmax_rows(scores, mask)
        context = (alpha.reshape(n_pairs, 1, width) @ states).reshape(n_pairs, -1)
        return last + context @ self.w_ctx

    def next_day_logits(self, batch: DayBatch) -> Tensor:
        return self.backbone.next_day_head(self.pooled_states(batch))

    def remaining_los(self, batch: DayBatch) -> Tensor:
        return (self.pooled_states(batch) @ self.los_w + self.los_b).reshape(-1)

    def loss(self, batch: DayBatch) -> Tensor:
        if self.task == "next":
            return tc.cross_entropy(self.next_day_logits(batch), batch.next_target, batch.pair_weight)
        target = (batch.los[batch.pair_visit] - batch.pair_t).astype(np.float64)
        diff = self.remaining_los(batch) - target
        return (diff * diff).mean()


def _backbone(checkpoint: Checkpoint, random_init: bool, seed: int) -> Inpatient2Vec:
    model = Inpatient2Vec(checkpoint.config, checkpoint.vocabulary, seed=seed)
    if not random_init:
        model.load_state(checkpoint.model.state_dict())
    return model


def _fit(predictor: DownstreamPredictor, train: Cohort, config: TrainConfig) -> None:
    train_visits = [v for v in train.visits if v.los >= 2]
    if not train_visits:
        raise InputError("Fine-tuning needs training visits with at least two days")
    params = predictor.parameters()
    weight_decay = config.weight_decay if config.finetune_optimizer == "adam" else 0.0
    optimizer = tc.make_optimizer(config.finetune_optimizer, config.finetune_lr, weight_decay, config.beta1, config.beta2)
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, 6, epoch])
        batches = list(iter_batches(len(train_visits), config.finetune_batch_size, rng))
        total = 0.0
        for b, indices in enumerate(tqdm(batches, desc=f"finetune {epoch}", disable=not config.progress, leave=False)):
            try:
                loss = predictor.loss(predictor.batch([train_visits[i] for i in indices]))
                tc.backward(loss)
                tc.optimizer_step(params, optimizer)
                if not tc.parameters_finite(params):
                    raise NumericalError("parameters are not finite after the update")
            except NumericalError as e:
                raise DivergenceError(f"Fine-tuning diverged at epoch {epoch}, batch {b}: {e}", epoch, b) from e
            total += loss.item() * len(indices)
        logger.info(f"Fine-tune ({predictor.task}) epoch {epoch}: loss {total / len(train_visits):.4f}")


def predict_rankings(predictor: DownstreamPredictor, test: Cohort, threads: int = 1) -> RecallReport:
    visits = [v for v in test.visits if v.los >= 2]
    chunks = map_visits(lambda c: rank_activities(predictor.next_day_logits(predictor.batch(c)).data), visits, threads=threads)
    rankings = [row for chunk in chunks for row in chunk]
    slots, truths = next_day_slots(test)
    return RecallReport.from_rankings(rankings, truths, slots)


def predict_remaining_los(predictor: DownstreamPredictor, test: Cohort, threads: int = 1) -> LosReport:
    visits = [v for v in test.visits if v.los >= 2]
    chunks = map_visits(lambda c: predictor.remaining_los(predictor.batch(c)).data, visits, threads=threads)
    predicted = np.concatenate(chunks) if chunks else np.zeros(0)
    slots, targets = remaining_los_slots(test)
    return LosReport.from_predictions(predicted, targets, slots)


def pretrained_head_report(checkpoint: Checkpoint, test: Cohort, threads: int = 1) -> RecallReport:
    """Recall of the pretrained next-day head on unmasked test days, without fine-tuning."""
    model = checkpoint.model

    def rank(chunk):
        batch = build_day_batch(chunk, model.vocabulary, None, model.config.diagnosis_as_activity)
        states = model.prefix_states(model.day_representations(batch), batch)
        return rank_activities(model.next_day_head(states).data)

    visits = [v for v in test.visits if v.los >= 2]
    rankings = [row for chunk in map_visits(rank, visits, threads=threads) for row in chunk]
    slots, truths = next_day_slots(test)
    return RecallReport.from_rankings(rankings, truths, slots)


def finetune_next_day(
    checkpoint: Checkpoint,
    train: Cohort,
    test: Cohort,
    config: TrainConfig,
    random_init: bool = False,
    threads: int = 1,
) -> Tuple[DownstreamPredictor, RecallReport]:
    """
    Fine-tune for next-day activity prediction and report Recall@k on `test`.

    Args:
        checkpoint: Pretrained model (its vocabulary must match the cohort's)
        train: Fine-tuning split
        test: Evaluation split
        config: Epochs, batch size and optimizer (finetune_* fields)
        random_init: Same architecture from random parameters (the control)
        threads: Evaluation threads
    """
    checkpoint.check_vocabulary(train.vocabulary)
    checkpoint.check_vocabulary(test.vocabulary)
    predictor = DownstreamPredictor(_backbone(checkpoint, random_init, config.seed), "next", config.seed)
    _fit(predictor, train, config)
    return predictor, predict_rankings(predictor, test, threads)


def finetune_los(
    checkpoint: Checkpoint,
    train: Cohort,
    test: Cohort,
    config: TrainConfig,
    random_init: bool = False,
    threads: int = 1,
) -> Tuple[DownstreamPredictor, LosReport]:
    """Fine-tune a remaining-LOS regressor (squared error on LOS − t) and report RMSE on `test`."""
    checkpoint.check_vocabulary(train.vocabulary)
    checkpoint.check_vocabulary(test.vocabulary)
    _, targets = remaining_los_slots(train)
    offset = float(targets.mean()) if targets.size else 0.0
    predictor = DownstreamPredictor(_backbone(checkpoint, random_init, config.seed), "los", config.seed, offset)
    _fit(predictor, train, config)
    return predictor, predict_remaining_los(predictor, test, threads)


def finetune_report(
    checkpoint: Checkpoint,
    train: Cohort,
    test: Cohort,
    config: TrainConfig,
    task: str = "next",
    with_control: bool = True,
    threads: int = 1,
) -> Tuple[object, Optional[object]]:
    """Fine-tuned report and, optionally, the randomly initialised control's report."""
    run = finetune_next_day if task == "next" else finetune_los
    _, report = run(checkpoint, train, test, config, threads=threads)
    control = run(checkpoint, train, test, config, random_init=True, threads=threads)[1] if with_control else None
    return report, control
