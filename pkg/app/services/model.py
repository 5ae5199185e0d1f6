"""
Inpatient2Vec network.

Each day is encoded as a set: a [CLS] day-element followed by the day's
activities, every row summed with the diagnosis representation for that day
index. A Transformer stack (no positional encoding across activity slots)
produces day-based activity representations and the day representation
T_[CLS]. A prefix-restricted bidirectional LSTM over previous day
representations feeds the next-day head.
"""
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from services import tensor_core as tc
from services.corpus import DayRecord, VisitRecord, Vocabulary
from services.errors import CompatibilityError, ConfigError
from services.tensor_core import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Network shape. ffn_dim=0 means 4 × embed_dim."""

    embed_dim: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 0
    lstm_hidden: int = 64
    unmasked_day_reps: bool = False
    diagnosis_as_activity: bool = False
    pairwise_day_task: bool = False
    init_std: float = tc.INIT_STD
    activation: str = "gelu_tanh"

    def validate(self) -> None:
        for name in ("embed_dim", "n_heads", "lstm_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive", name)
        if self.n_layers < 0:
            raise ConfigError("model.n_layers must be non-negative", "n_layers")
        if self.embed_dim % self.n_heads:
            raise ConfigError("model.embed_dim must be divisible by n_heads", "embed_dim")
        if self.ffn_dim < 0:
            raise ConfigError("model.ffn_dim must be non-negative", "ffn_dim")

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim or 4 * self.embed_dim

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"Unknown model key: {key}", key)
        return cls(**data)


def diagnosis_offsets(vocabulary: Vocabulary) -> np.ndarray:
    """First row of each R_g inside the stacked diagnosis table."""
    return np.concatenate([[0], np.cumsum(vocabulary.max_los)[:-1]]).astype(np.int64)


def diagnosis_row(vocabulary: Vocabulary, offsets: np.ndarray, diagnosis: int, t: int) -> int:
    """Row of R_g[min(t, N_g)] for 1-based day index t."""
    if t < 1:
        raise ValueError(f"day index must be >= 1, got {t}")
    return int(offsets[diagnosis] + min(t, vocabulary.max_los[diagnosis]) - 1)


@dataclass
class EmbeddingTables:
    """
    Activity table R^a (real activities, then [CLS], [MASK], [PAD], then one
    row per diagnosis when diagnoses are treated as activities) and the
    per-diagnosis matrices R_g stacked row-wise (R_g starts at offsets[g]).
    """

    activity: Tensor
    diagnosis: Optional[Tensor]
    offsets: np.ndarray
    capacity: Tuple[int, ...]

    def diagnosis_matrix(self, g: int) -> Tensor:
        start = int(self.offsets[g])
        return self.diagnosis[start:start + self.capacity[g]]


@dataclass
class TransformerLayer:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "TransformerLayer":
        q, inner, std = config.embed_dim, config.ffn_width, config.init_std
        return cls(
            w_q=tc.truncated_normal((q, q), rng, std), b_q=tc.zeros(q),
            w_k=tc.truncated_normal((q, q), rng, std), b_k=tc.zeros(q),
            w_v=tc.truncated_normal((q, q), rng, std), b_v=tc.zeros(q),
            w_o=tc.truncated_normal((q, q), rng, std), b_o=tc.zeros(q),
            w_1=tc.truncated_normal((q, inner), rng, std), b_1=tc.zeros(inner),
            w_2=tc.truncated_normal((inner, q), rng, std), b_2=tc.zeros(q),
            ln1_gain=tc.ones(q), ln1_bias=tc.zeros(q),
            ln2_gain=tc.ones(q), ln2_bias=tc.zeros(q),
        )

    def named(self, prefix: str) -> List[Tuple[str, Tensor]]:
        return [(f"{prefix}.{f.name}", getattr(self, f.name)) for f in fields(self)]


@dataclass
class TransformerStack:
    layers: List[TransformerLayer] = field(default_factory=list)


@dataclass
class LstmCell:
    """Gate order: input, forget, cell, output."""

    w_x: Tensor
    w_h: Tensor
    b: Tensor

    @classmethod
    def init(cls, n_in: int, hidden: int, rng: np.random.Generator, std: float) -> "LstmCell":
        return cls(
            tc.truncated_normal((n_in, 4 * hidden), rng, std),
            tc.truncated_normal((hidden, 4 * hidden), rng, std),
            tc.zeros(4 * hidden),
        )

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
        n = self.hidden
        gates = x @ self.w_x + h @ self.w_h + self.b
        i = tc.sigmoid(gates[:, :n])
        f = tc.sigmoid(gates[:, n:2 * n])
        g = tc.tanh(gates[:, 2 * n:3 * n])
        o = tc.sigmoid(gates[:, 3 * n:])
        c = f * c + i * g
        return o * tc.tanh(c), c

    def named(self, prefix: str) -> List[Tuple[str, Tensor]]:
        return [(f"{prefix}.w_x", self.w_x), (f"{prefix}.w_h", self.w_h), (f"{prefix}.b", self.b)]


@dataclass
class BiLstmParams:
    forward: LstmCell
    backward: LstmCell


@dataclass
class DayEncoderOutput:
    """t_cls is row 0 of per_token (the [CLS] day-element)."""

    t_cls: Tensor
    per_token: Tensor


@dataclass
class DayBatch:
    """
    Padded token matrix for every day of a group of visits, laid out visit-major,
    plus the masked-token and next-day bookkeeping. Token ids are the true ids;
    [MASK] is substituted only when embedding.
    """

    token_ids: np.ndarray
    key_mask: np.ndarray
    diag_rows: np.ndarray
    day_visit: np.ndarray
    day_index: np.ndarray
    visit_start: np.ndarray
    los: np.ndarray
    mask_day: np.ndarray
    mask_col: np.ndarray
    mask_target: np.ndarray
    pair_visit: np.ndarray
    pair_t: np.ndarray
    next_target: np.ndarray
    next_multi_hot: np.ndarray
    pair_weight: np.ndarray
    n_activities: int

    @property
    def n_days(self) -> int:
        return self.token_ids.shape[0]

    @property
    def n_masked(self) -> int:
        return self.mask_target.shape[0]

    @property
    def n_pairs(self) -> int:
        return self.pair_t.shape[0]

    def day_position(self, visit: int, t: int) -> int:
        return int(self.visit_start[visit] + t - 1)


def build_day_batch(
    visits: Sequence[VisitRecord],
    vocabulary: Vocabulary,
    masked_positions: Optional[Sequence[Mapping[int, Sequence[int]]]] = None,
    diagnosis_as_activity: bool = False,
) -> DayBatch:
    """
    Lay out the days of `visits` for batched encoding.

    Args:
        visits: Visits of the batch
        vocabulary: Shared vocabulary
        masked_positions: Per visit, {0-based day: 0-based positions in the sorted activity set}
        diagnosis_as_activity: Append the diagnosis as an extra token on every day

    Returns:
        DayBatch
    """
    offsets = diagnosis_offsets(vocabulary)
    extra = 1 if diagnosis_as_activity else 0
    days = [(v, t, day) for v, visit in enumerate(visits) for t, day in enumerate(visit.days, start=1)]
    width = 1 + extra + max((len(day) for _, _, day in days), default=1)
    n_days = len(days)

    token_ids = np.full((n_days, width), vocabulary.pad_id, dtype=np.int64)
    key_mask = np.full((n_days, width), tc.MASK_VALUE)
    diag_rows = np.zeros(n_days, dtype=np.int64)
    day_visit = np.zeros(n_days, dtype=np.int64)
    day_index = np.zeros(n_days, dtype=np.int64)
    for d, (v, t, day) in enumerate(days):
        visit = visits[v]
        n = len(day)
        token_ids[d, 0] = vocabulary.cls_id
        token_ids[d, 1:1 + n] = day.activities
        if diagnosis_as_activity:
            token_ids[d, 1 + n] = vocabulary.n_tokens + visit.diagnosis
        key_mask[d, :1 + n + extra] = 0.0
        diag_rows[d] = diagnosis_row(vocabulary, offsets, visit.diagnosis, t)
        day_visit[d] = v
        day_index[d] = t

    los = np.array([visit.los for visit in visits], dtype=np.int64)
    visit_start = np.concatenate([[0], np.cumsum(los)[:-1]]).astype(np.int64)

    mask_day, mask_col, mask_target = [], [], []
    if masked_positions is not None:
        for v, per_day in enumerate(masked_positions):
            for day0, positions in sorted(per_day.items()):
                d = int(visit_start[v] + day0)
                for j in sorted(positions):
                    mask_day.append(d)
                    mask_col.append(j + 1)
                    mask_target.append(visits[v].days[day0].activities[j])

    n_act = vocabulary.n_activities
    eligible = int(np.sum(los >= 2))
    pair_visit, pair_t, weights, targets, multi_hot = [], [], [], [], []
    for v, visit in enumerate(visits):
        for t in range(2, visit.los + 1):
            row = np.zeros(n_act)
            row[list(visit.days[t - 1].activities)] = 1.0
            pair_visit.append(v)
            pair_t.append(t)
            weights.append(1.0 / ((visit.los - 1) * eligible))
            multi_hot.append(row)
            targets.append(row / row.sum())

    return DayBatch(
        token_ids=token_ids,
        key_mask=key_mask,
        diag_rows=diag_rows,
        day_visit=day_visit,
        day_index=day_index,
        visit_start=visit_start,
        los=los,
        mask_day=np.array(mask_day, dtype=np.int64),
        mask_col=np.array(mask_col, dtype=np.int64),
        mask_target=np.array(mask_target, dtype=np.int64),
        pair_visit=np.array(pair_visit, dtype=np.int64),
        pair_t=np.array(pair_t, dtype=np.int64),
        next_target=np.array(targets).reshape(-1, n_act),
        next_multi_hot=np.array(multi_hot).reshape(-1, n_act),
        pair_weight=np.array(weights),
        n_activities=n_act,
    )


def _affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim == 1:
        return (x.reshape(1, -1) @ weight + bias).reshape(-1)
    return x @ weight + bias


class Inpatient2Vec:
    """
    Parameters and forward computations of the model.

    Forward methods only read parameters, so a frozen model can be evaluated
    from several threads inside `tensor_core.no_grad()`.
    """

    def __init__(self, config: ModelConfig, vocabulary: Vocabulary, seed: int = 0):
        config.validate()
        self.config = config
        self.vocabulary = vocabulary
        rng = np.random.default_rng(seed)
        q, std = config.embed_dim, config.init_std
        n_act = vocabulary.n_activities

        activity_rows = vocabulary.n_tokens + (vocabulary.n_diagnoses if config.diagnosis_as_activity else 0)
        self.tables = EmbeddingTables(
            activity=tc.truncated_normal((activity_rows, q), rng, std),
            diagnosis=None if config.diagnosis_as_activity
            else tc.truncated_normal((int(sum(vocabulary.max_los)), q), rng, std),
            offsets=diagnosis_offsets(vocabulary),
            capacity=vocabulary.max_los,
        )
        self.encoder = TransformerStack([TransformerLayer.init(config, rng) for _ in range(config.n_layers)])
        self.masked_w = tc.truncated_normal((q, n_act), rng, std)
        self.masked_b = tc.zeros(n_act)
        self.lstm = BiLstmParams(
            LstmCell.init(q, config.lstm_hidden, rng, std),
            LstmCell.init(q, config.lstm_hidden, rng, std),
        )
        self.next_w = tc.truncated_normal((2 * config.lstm_hidden, n_act), rng, std)
        self.next_b = tc.zeros(n_act)
        if config.pairwise_day_task:
            self.pair_w = tc.truncated_normal((2 * q, 1), rng, std)
            self.pair_b = tc.zeros(1)

    # ------------------------------------------------------------------
    # parameter bookkeeping
    # ------------------------------------------------------------------

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        named = [("embeddings.activity", self.tables.activity)]
        if self.tables.diagnosis is not None:
            named.append(("embeddings.diagnosis", self.tables.diagnosis))
        for i, layer in enumerate(self.encoder.layers):
            named.extend(layer.named(f"encoder.layer{i}"))
        named += [("masked_head.weight", self.masked_w), ("masked_head.bias", self.masked_b)]
        named += self.lstm.forward.named("prefix_lstm.forward")
        named += self.lstm.backward.named("prefix_lstm.backward")
        named += [("next_head.weight", self.next_w), ("next_head.bias", self.next_b)]
        if self.config.pairwise_day_task:
            named += [("pair_head.weight", self.pair_w), ("pair_head.bias", self.pair_b)]
        return named

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        named = self.named_parameters()
        expected = [name for name, _ in named]
        if list(state) != expected:
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise CompatibilityError(f"parameter names differ (missing {missing}, unexpected {extra})")
        for name, p in named:
            values = np.asarray(state[name], dtype=tc.DTYPE)
            if values.shape != p.shape:
                raise CompatibilityError(f"{name}: shape {values.shape} != {p.shape}")
            p.data[...] = values

    # ------------------------------------------------------------------
    # input construction and day encoder
    # ------------------------------------------------------------------

    def assemble_input_sequence(
        self,
        day: DayRecord,
        diagnosis: int,
        t: int,
        masking: Optional[Sequence[int]] = None,
    ) -> Tensor:
        """
        (1+n) × q input for one day: row 0 is R_[CLS], rows 1..n the day's
        activities in id order ([MASK] at masked 0-based positions), each plus
        R_g[min(t, N_g)].
        """
        vocab = self.vocabulary
        if not 0 <= diagnosis < vocab.n_diagnoses:
            raise IndexError(f"unknown diagnosis id {diagnosis}")
        if any(not 0 <= a < vocab.n_activities for a in day.activities):
            raise IndexError("unknown activity id in day")
        masked = set(masking or ())
        ids = [vocab.cls_id] + [vocab.mask_id if j in masked else a for j, a in enumerate(day.activities)]
        if self.config.diagnosis_as_activity:
            if t < 1:
                raise ValueError(f"day index must be >= 1, got {t}")
            ids.append(vocab.n_tokens + diagnosis)
            return tc.gather_rows(self.tables.activity, np.array(ids))
        row = diagnosis_row(vocab, self.tables.offsets, diagnosis, t)
        return tc.gather_rows(self.tables.activity, np.array(ids)) + tc.gather_rows(self.tables.diagnosis, np.array([row]))

    def embed_batch(self, batch: DayBatch, apply_masks: bool = True) -> Tensor:
        ids = batch.token_ids
        if apply_masks and batch.n_masked:
            ids = ids.copy()
            ids[batch.mask_day, batch.mask_col] = self.vocabulary.mask_id
        x = tc.gather_rows(self.tables.activity, ids)
        if self.tables.diagnosis is None:
            return x
        diag = tc.gather_rows(self.tables.diagnosis, batch.diag_rows)
        return x + diag.reshape(batch.n_days, 1, self.config.embed_dim)

    def _attention(self, x: Tensor, layer: TransformerLayer, mask: Optional[np.ndarray]) -> Tensor:
        n_days, length, q = x.shape
        heads, dk = self.config.n_heads, self.config.head_dim

        def split(t: Tensor) -> Tensor:
            return tc.transpose(t.reshape(n_days, length, heads, dk), (0, 2, 1, 3))

        # Q, K and V all come from the layer input
        out = tc.scaled_dot_attention(
            split(x @ layer.w_q + layer.b_q),
            split(x @ layer.w_k + layer.b_k),
            split(x @ layer.w_v + layer.b_v),
            mask,
        )
        merged = tc.transpose(out, (0, 2, 1, 3)).reshape(n_days, length, q)
        return merged @ layer.w_o + layer.b_o

    def encode_day(self, inputs: Tensor, key_mask: Optional[np.ndarray] = None) -> DayEncoderOutput:
        """
        Run the Transformer stack on one (L × q) day or a (D × L × q) batch.

        Args:
            inputs: Assembled input sequence(s)
            key_mask: Optional (D × L) additive mask hiding [PAD] positions
        """
        if inputs.shape[-1] != self.config.embed_dim:
            raise ValueError(f"input width {inputs.shape[-1]} != embed_dim {self.config.embed_dim}")
        if inputs.ndim not in (2, 3) or inputs.shape[-2] < 2:
            raise ValueError(f"day input needs [CLS] plus at least one activity row, got shape {inputs.shape}")
        single = inputs.ndim == 2
        x = inputs.reshape(1, *inputs.shape) if single else inputs
        mask = None if key_mask is None else np.asarray(key_mask)[:, None, None, :]
        for layer in self.encoder.layers:
            x = tc.layer_norm(x + self._attention(x, layer, mask), layer.ln1_gain, layer.ln1_bias)
            ff = tc.gelu(x @ layer.w_1 + layer.b_1) @ layer.w_2 + layer.b_2
            x = tc.layer_norm(x + ff, layer.ln2_gain, layer.ln2_bias)
        if single:
            x = x[0]
            return DayEncoderOutput(t_cls=x[0], per_token=x)
        return DayEncoderOutput(t_cls=x[:, 0, :], per_token=x)

    def encode_batch(self, batch: DayBatch, apply_masks: bool = True) -> DayEncoderOutput:
        return self.encode_day(self.embed_batch(batch, apply_masks), batch.key_mask)

    # ------------------------------------------------------------------
    # heads
    # ------------------------------------------------------------------

    def masked_head(self, t_mask: Tensor) -> Tensor:
        """Logits over the real activities for [MASK] representation(s)."""
        return _affine(t_mask, self.masked_w, self.masked_b)

    def next_day_head(self, h: Tensor) -> Tensor:
        return _affine(h, self.next_w, self.next_b)

    def pair_head(self, first: Tensor, second: Tensor) -> Tensor:
        if not self.config.pairwise_day_task:
            raise RuntimeError("model was built without the pair-wise day head")
        return _affine(tc.concat([first, second], axis=-1), self.pair_w, self.pair_b)

    # ------------------------------------------------------------------
    # prefix encoder
    # ------------------------------------------------------------------

    def encode_prefix_days(self, day_reps: Sequence[Tensor]) -> Tensor:
        """
        h_{i,t} for one visit from the representations of days 1..t-1.
        The backward direction starts at day t-1, so nothing after the prefix leaks in.
        """
        if len(day_reps) == 0:
            raise ValueError("prefix must contain at least one day")
        rows = [r.reshape(1, -1) for r in day_reps]
        hidden = self.config.lstm_hidden
        h, c = tc.zeros((1, hidden), False), tc.zeros((1, hidden), False)
        for x in rows:
            h, c = self.lstm.forward.step(x, h, c)
        forward_h = h
        h, c = tc.zeros((1, hidden), False), tc.zeros((1, hidden), False)
        for x in reversed(rows):
            h, c = self.lstm.backward.step(x, h, c)
        return tc.concat([forward_h, h], axis=-1).reshape(-1)

    def prefix_states(self, t_cls: Tensor, batch: DayBatch, sequences: bool = False):
        """
        Batched h_{i,t} for every (visit, t ≥ 2) pair of the batch.

        Args:
            t_cls: (D × q) day representations in batch order
            batch: The batch they came from
            sequences: Also return per-position prefix states (P × E × 2h) and
                their additive mask, where position j holds concat(forward_j,
                backward state of the prefix at j)

        Returns:
            (P × 2h) tensor, or (states, sequence_states, sequence_mask)
        """
        hidden = self.config.lstm_hidden
        q = self.config.embed_dim
        n_visits = batch.los.shape[0]
        longest = int(batch.los.max()) if n_visits else 0
        padded = tc.concat([t_cls, tc.zeros((1, q), False)], axis=0)
        pad = batch.n_days

        steps = max(longest - 1, 1)
        forward_index = np.full((n_visits, steps), pad, dtype=np.int64)
        for v in range(n_visits):
            n = min(int(batch.los[v]), steps)
            forward_index[v, :n] = batch.visit_start[v] + np.arange(n)
        forward_seq = tc.gather_rows(padded, forward_index)
        h, c = tc.zeros((n_visits, hidden), False), tc.zeros((n_visits, hidden), False)
        forward_states = []
        for s in range(steps):
            h, c = self.lstm.forward.step(forward_seq[:, s, :], h, c)
            forward_states.append(h)
        forward_all = tc.stack(forward_states, axis=1)

        prefix_len = batch.pair_t - 1
        n_pairs = batch.n_pairs
        width = int(prefix_len.max()) if n_pairs else 1
        backward_index = np.full((n_pairs, width), pad, dtype=np.int64)
        for p in range(n_pairs):
            e = int(prefix_len[p])
            start = int(batch.visit_start[batch.pair_visit[p]])
            backward_index[p, :e] = start + np.arange(e - 1, -1, -1)
        backward_seq = tc.gather_rows(padded, backward_index)
        h, c = tc.zeros((n_pairs, hidden), False), tc.zeros((n_pairs, hidden), False)
        backward_states = []
        for s in range(width):
            live = (s < prefix_len).astype(tc.DTYPE)[:, None]
            h_new, c_new = self.lstm.backward.step(backward_seq[:, s, :], h, c)
            h = h_new * live + h * (1.0 - live)
            c = c_new * live + c * (1.0 - live)
            backward_states.append(h)

        last_forward = forward_all[(batch.pair_visit, prefix_len - 1)]
        states = tc.concat([last_forward, h], axis=-1)
        if not sequences:
            return states

        positions = np.arange(width)[None, :]
        valid = positions < prefix_len[:, None]
        forward_rows = np.where(valid, positions, 0)
        backward_cols = np.where(valid, prefix_len[:, None] - 1 - positions, 0)
        pair_rows = np.broadcast_to(batch.pair_visit[:, None], valid.shape)
        per_position_forward = forward_all[(pair_rows, forward_rows)]
        per_position_backward = tc.stack(backward_states, axis=1)[(np.broadcast_to(np.arange(n_pairs)[:, None], valid.shape), backward_cols)]
        sequence_states = tc.concat([per_position_forward, per_position_backward], axis=-1)
        sequence_mask = np.where(valid, 0.0, tc.MASK_VALUE)
        return states, sequence_states, sequence_mask

    def day_representations(self, batch: DayBatch) -> Tensor:
        """Unmasked T_[CLS] for every day of the batch (D × q)."""
        return self.encode_batch(batch, apply_masks=False).t_cls

    def head_summary(self) -> str:
        n = sum(p.size for p in self.parameters())
        return f"Inpatient2Vec({self.config.n_layers} layers, dim {self.config.embed_dim}, {n:,} parameters)"
