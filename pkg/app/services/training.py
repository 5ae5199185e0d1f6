"""
Training Service.
Masked-activity and next-day pretraining of the Inpatient2Vec model:
masking plans, visit batches, the two losses (or the pair-wise day ablation)
and the epoch loop with best-validation selection.
"""
import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from services import tensor_core as tc
from services.checkpoint import Checkpoint, EpochLog
from services.corpus import Cohort, round_half_up
from services.errors import ConfigError, DivergenceError, InputError, NumericalError
from services.model import DayBatch, Inpatient2Vec, ModelConfig, build_day_batch
from services.tensor_core import Tensor

logger = logging.getLogger(__name__)

NEXT_DAY_LOSSES = ("softmax", "sigmoid")
OPTIMIZERS = ("adam", "adadelta")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    mask_rate: float = 0.15
    mask_weight: float = 1.0
    next_weight: float = 1.0
    next_day_loss: str = "softmax"
    unmasked_day_reps: bool = False
    diagnosis_as_activity: bool = False
    pairwise_day_task: bool = False
    pairs_per_batch: int = 64
    finetune_batch_size: int = 32
    finetune_optimizer: str = "adam"
    finetune_lr: float = 1e-3
    seed: int = 0
    progress: bool = True

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("train.epochs must be non-negative", "epochs")
        for name in ("batch_size", "pairs_per_batch", "finetune_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be positive", name)
        if self.lr < 0 or self.finetune_lr < 0:
            raise ConfigError("train learning rates must be non-negative", "lr")
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError("train.mask_rate must be in (0, 1)", "mask_rate")
        if self.next_day_loss not in NEXT_DAY_LOSSES:
            raise ConfigError(f"train.next_day_loss must be one of {NEXT_DAY_LOSSES}", "next_day_loss")
        for name in ("optimizer", "finetune_optimizer"):
            if getattr(self, name) not in OPTIMIZERS:
                raise ConfigError(f"train.{name} must be one of {OPTIMIZERS}", name)

    def model_config(self, base: ModelConfig) -> ModelConfig:
        """Carry the switches that change the parameter set into the model config."""
        return replace(
            base,
            diagnosis_as_activity=self.diagnosis_as_activity,
            pairwise_day_task=self.pairwise_day_task,
            unmasked_day_reps=self.unmasked_day_reps,
        )

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"Unknown train key: {key}", key)
        return cls(**data)


@dataclass(frozen=True)
class MaskingPlan:
    """Masked 0-based positions per (visit index, 0-based day)."""

    positions: Mapping[Tuple[int, int], Tuple[int, ...]]
    targets: Mapping[Tuple[int, int], Tuple[int, ...]]
    rate: float
    seed: int
    n_tokens: int

    @property
    def n_masked(self) -> int:
        return sum(len(p) for p in self.positions.values())

    def for_visits(self, indices: Sequence[int]) -> List[Dict[int, Tuple[int, ...]]]:
        per_visit = {int(i): {} for i in indices}
        for (v, day), positions in self.positions.items():
            if v in per_visit:
                per_visit[v][day] = positions
        return [per_visit[int(i)] for i in indices]


def select_masks(cohort: Cohort, rate: float = 0.15, seed: int = 0) -> MaskingPlan:
    """
    Uniformly choose round(rate × T) activity tokens to mask, never the whole day.

    Tokens are visited in a seeded random order and skipped when taking them
    would leave their day without an unmasked activity.
    """
    if not 0.0 < rate < 1.0:
        raise ConfigError(f"mask rate must be in (0, 1), got {rate}", "mask_rate")
    sizes = [(v, d, len(day)) for v, visit in enumerate(cohort.visits) for d, day in enumerate(visit.days)]
    total = sum(n for _, _, n in sizes)
    if total < 1:
        raise InputError("Cannot mask a cohort without activity tokens")
    wanted = round_half_up(rate * total)
    capacity = sum(n - 1 for _, _, n in sizes)
    if wanted > capacity:
        logger.warning(f"Only {capacity} of {wanted} requested tokens can be masked without emptying a day")
        wanted = capacity

    day_of_token = np.repeat(np.arange(len(sizes)), [n for _, _, n in sizes])
    offset = np.concatenate([[0], np.cumsum([n for _, _, n in sizes])[:-1]])
    order = np.random.default_rng(seed).permutation(total)
    taken = np.zeros(len(sizes), dtype=np.int64)
    chosen: Dict[int, List[int]] = {}
    count = 0
    for token in order:
        if count == wanted:
            break
        d = day_of_token[token]
        if taken[d] + 1 >= sizes[d][2]:
            continue
        taken[d] += 1
        chosen.setdefault(int(d), []).append(int(token - offset[d]))
        count += 1

    positions, targets = {}, {}
    for d, picked in chosen.items():
        v, day, _ = sizes[d]
        picked = tuple(sorted(picked))
        activities = cohort.visits[v].days[day].activities
        positions[(v, day)] = picked
        targets[(v, day)] = tuple(activities[j] for j in picked)
    return MaskingPlan(positions, targets, rate, seed, total)


def iter_batches(n_visits: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    order = np.arange(n_visits) if rng is None else rng.permutation(n_visits)
    for start in range(0, n_visits, batch_size):
        yield order[start:start + batch_size]


def make_batch(cohort: Cohort, indices: Sequence[int], plan: Optional[MaskingPlan], model: Inpatient2Vec) -> DayBatch:
    visits = [cohort.visits[int(i)] for i in indices]
    masked = plan.for_visits(indices) if plan is not None else None
    return build_day_batch(visits, cohort.vocabulary, masked, model.config.diagnosis_as_activity)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_masked(model: Inpatient2Vec, batch: DayBatch, per_token: Tensor) -> Tensor:
    """Mean categorical cross-entropy of the masked head at every [MASK] position."""
    if batch.n_masked == 0:
        raise ValueError("batch has no masked tokens")
    t_mask = per_token[(batch.mask_day, batch.mask_col)]
    target = np.zeros((batch.n_masked, batch.n_activities))
    target[np.arange(batch.n_masked), batch.mask_target] = 1.0
    return tc.cross_entropy(model.masked_head(t_mask), target)


def loss_next_day(model: Inpatient2Vec, batch: DayBatch, t_cls: Tensor, kind: str = "softmax") -> Tensor:
    """
    Next-day activity loss: per visit the mean over t ≥ 2, then the mean over visits.
    Softmax targets are the normalized multi-hot of day t; the sigmoid variant
    uses the raw multi-hot with a per-activity logistic loss.
    """
    if batch.n_pairs == 0:
        raise ValueError("batch has no visit with at least two days")
    logits = model.next_day_head(model.prefix_states(t_cls, batch))
    if kind == "sigmoid":
        return tc.binary_cross_entropy_with_logits(logits, batch.next_multi_hot, batch.pair_weight)
    return tc.cross_entropy(logits, batch.next_target, batch.pair_weight)


def sample_day_pairs(batch: DayBatch, n_pairs: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Day pairs for the consecutive-day task: each pair is consecutive within a
    visit with probability 1/2, otherwise two days that are not consecutive.

    Returns:
        (first day rows, second day rows, labels)
    """
    multi_day = np.flatnonzero(batch.los >= 2)
    first, second, labels = [], [], []
    for _ in range(n_pairs):
        if multi_day.size and rng.random() < 0.5:
            v = int(rng.choice(multi_day))
            a = int(rng.integers(1, batch.los[v]))
            first.append(batch.day_position(v, a))
            second.append(batch.day_position(v, a + 1))
            labels.append(1.0)
            continue
        while True:
            a, b = (int(x) for x in rng.integers(batch.n_days, size=2))
            same_visit = batch.day_visit[a] == batch.day_visit[b]
            if a != b and not (same_visit and batch.day_index[b] == batch.day_index[a] + 1):
                break
            if batch.n_days < 2:
                raise ValueError("pair-wise day task needs at least two days per batch")
        first.append(a)
        second.append(b)
        labels.append(0.0)
    return np.array(first, dtype=np.int64), np.array(second, dtype=np.int64), np.array(labels)


def loss_pairwise_days(model: Inpatient2Vec, batch: DayBatch, t_cls: Tensor, rng: np.random.Generator, n_pairs: int = 64) -> Tensor:
    first, second, labels = sample_day_pairs(batch, n_pairs, rng)
    logits = model.pair_head(t_cls[first], t_cls[second])
    return tc.binary_cross_entropy_with_logits(logits, labels.reshape(-1, 1))


@dataclass
class BatchLosses:
    total: Tensor
    masked: float
    next_day: float


def total_loss(
    model: Inpatient2Vec,
    batch: DayBatch,
    config: TrainConfig,
    rng: Optional[np.random.Generator] = None,
) -> BatchLosses:
    """
    L_mask + L_next (each with its configured weight, 1:1 by default).
    With the pair-wise day switch, L_next is the consecutive-day loss.
    """
    encoded = model.encode_batch(batch, apply_masks=True)
    zero = tc.tensor(0.0)
    masked = loss_masked(model, batch, encoded.per_token) if batch.n_masked else zero

    t_cls = encoded.t_cls
    if config.unmasked_day_reps and batch.n_masked:
        t_cls = model.encode_batch(batch, apply_masks=False).t_cls
    if config.pairwise_day_task:
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        following = loss_pairwise_days(model, batch, t_cls, rng, config.pairs_per_batch)
    elif batch.n_pairs:
        following = loss_next_day(model, batch, t_cls, config.next_day_loss)
    else:
        following = zero
    total = masked * config.mask_weight + following * config.next_weight
    return BatchLosses(total, masked.item(), following.item())


def evaluate_loss(
    model: Inpatient2Vec,
    cohort: Cohort,
    plan: MaskingPlan,
    config: TrainConfig,
    seed: int = 0,
) -> Tuple[float, float, float]:
    """Visit-weighted mean (total, masked, next) loss over a cohort, without gradients."""
    rng = np.random.default_rng([seed, 3])
    sums = np.zeros(3)
    with tc.no_grad():
        for indices in iter_batches(len(cohort), config.batch_size):
            losses = total_loss(model, make_batch(cohort, indices, plan, model), config, rng)
            sums += len(indices) * np.array([losses.total.item(), losses.masked, losses.next_day])
    mean = sums / max(len(cohort), 1)
    return float(mean[0]), float(mean[1]), float(mean[2])


def masked_accuracy(model: Inpatient2Vec, cohort: Cohort, plan: MaskingPlan, batch_size: int = 32) -> float:
    """Top-1 accuracy of the masked head on the plan's masked tokens."""
    hits = total = 0
    with tc.no_grad():
        for indices in iter_batches(len(cohort), batch_size):
            batch = make_batch(cohort, indices, plan, model)
            if not batch.n_masked:
                continue
            per_token = model.encode_batch(batch).per_token
            logits = model.masked_head(per_token[(batch.mask_day, batch.mask_col)]).data
            hits += int(np.sum(np.argmax(logits, axis=-1) == batch.mask_target))
            total += batch.n_masked
    return hits / total if total else 0.0


def unigram_accuracy(train: Cohort, plan: MaskingPlan) -> float:
    """Accuracy of always answering the most frequent training activity."""
    counts = np.zeros(train.vocabulary.n_activities, dtype=np.int64)
    for visit in train.visits:
        for day in visit.days:
            counts[list(day.activities)] += 1
    top = int(np.argmax(counts))
    targets = [a for ids in plan.targets.values() for a in ids]
    return float(np.mean(np.array(targets) == top)) if targets else 0.0


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------

def pretrain(
    train: Cohort,
    valid: Optional[Cohort],
    model_config: ModelConfig,
    config: TrainConfig,
    metadata: Optional[Mapping] = None,
) -> Checkpoint:
    """
    Pretrain on `train` and return the parameters of the epoch with the best
    validation loss (epoch 0 is the untrained model).

    Args:
        train: Training split
        valid: Validation split, or None to keep the last epoch
        model_config: Network shape
        config: Optimisation and ablation settings
        metadata: Extra provenance stored in the checkpoint

    Returns:
        Checkpoint
    """
    config.validate()
    if len(train) == 0:
        raise InputError("Training split is empty")
    model = Inpatient2Vec(config.model_config(model_config), train.vocabulary, seed=config.seed)
    params = model.parameters()
    optimizer = tc.make_optimizer(config.optimizer, config.lr, config.weight_decay, config.beta1, config.beta2)
    valid_plan = select_masks(valid, config.mask_rate, config.seed) if valid is not None and len(valid) else None

    def validation_loss() -> Optional[float]:
        if valid_plan is None:
            return None
        return evaluate_loss(model, valid, valid_plan, config, config.seed)[0]

    train_total, train_mask, train_next = evaluate_loss(model, train, select_masks(train, config.mask_rate, config.seed), config)
    log = [EpochLog(0, train_total, validation_loss(), train_mask, train_next)]
    logger.info(f"Epoch 0: train {train_total:.4f} valid {_fmt(log[0].valid_loss)}")
    best_state, best_epoch = model.state_dict(), 0
    best_valid = log[0].valid_loss

    for epoch in range(1, config.epochs + 1):
        plan = select_masks(train, config.mask_rate, config.seed + epoch)
        order_rng = np.random.default_rng([config.seed, 4, epoch])
        pair_rng = np.random.default_rng([config.seed, 5, epoch])
        sums = np.zeros(3)
        batches = list(iter_batches(len(train), config.batch_size, order_rng))
        for b, indices in enumerate(tqdm(batches, desc=f"epoch {epoch}", disable=not config.progress, leave=False)):
            try:
                losses = total_loss(model, make_batch(train, indices, plan, model), config, pair_rng)
                value = losses.total.item()
                if not np.isfinite(value):
                    raise NumericalError("loss is not finite")
                tc.backward(losses.total)
                tc.optimizer_step(params, optimizer)
                if not tc.parameters_finite(params):
                    raise NumericalError("parameters are not finite after the update")
            except NumericalError as e:
                raise DivergenceError(f"Training diverged at epoch {epoch}, batch {b}: {e}", epoch, b) from e
            sums += len(indices) * np.array([value, losses.masked, losses.next_day])

        mean = sums / len(train)
        entry = EpochLog(epoch, float(mean[0]), validation_loss(), float(mean[1]), float(mean[2]))
        log.append(entry)
        logger.info(
            f"Epoch {epoch}: train {entry.train_loss:.4f} (mask {entry.mask_loss:.4f}, "
            f"next {entry.next_loss:.4f}) valid {_fmt(entry.valid_loss)}"
        )
        if entry.valid_loss is None or best_valid is None or entry.valid_loss < best_valid:
            best_state, best_epoch, best_valid = model.state_dict(), epoch, entry.valid_loss

    last_epoch = config.epochs
    model.load_state(best_state)
    meta = dict(metadata or {})
    meta.update({"best_epoch": best_epoch, "seed": config.seed})
    logger.info(f"Selected epoch {best_epoch} of {last_epoch}")
    return Checkpoint(
        model=model,
        train_config=config.to_dict(),
        log=log,
        optimizer=optimizer if best_epoch == last_epoch else None,
        metadata=meta,
    )


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"
