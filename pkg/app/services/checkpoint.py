"""
Checkpoint Service.
Binary container for trained models: magic bytes, a length-prefixed JSON
metadata block, then little-endian float64 payloads in declared order.
"""
import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

import numpy as np

from services.corpus import Vocabulary
from services.errors import CompatibilityError, InputError
from services.model import Inpatient2Vec, ModelConfig
from services.tensor_core import AdadeltaState, AdamState

logger = logging.getLogger(__name__)

MAGIC = b"I2V1"
FORMAT_VERSION = 1
LOG_COLUMNS = ("epoch", "train_loss", "valid_loss", "mask_loss", "next_loss")
_PAYLOAD_DTYPE = np.dtype("<f8")


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    valid_loss: Optional[float]
    mask_loss: float
    next_loss: float


@dataclass
class Checkpoint:
    model: Inpatient2Vec
    train_config: Dict = field(default_factory=dict)
    log: List[EpochLog] = field(default_factory=list)
    optimizer: Optional[Union[AdamState, AdadeltaState]] = None
    metadata: Dict = field(default_factory=dict)

    @property
    def vocabulary(self) -> Vocabulary:
        return self.model.vocabulary

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def check_vocabulary(self, vocabulary: Vocabulary) -> None:
        """Raise CompatibilityError unless `vocabulary` is the one the model was trained on."""
        ours, theirs = self.vocabulary.digest(), vocabulary.digest()
        if ours != theirs:
            raise CompatibilityError(
                f"Vocabulary mismatch: checkpoint {ours[:16]}… vs cohort {theirs[:16]}… "
                f"({self.vocabulary.n_activities}/{vocabulary.n_activities} activities, "
                f"{self.vocabulary.n_diagnoses}/{vocabulary.n_diagnoses} diagnoses)"
            )


def _optimizer_slots(state) -> Dict[str, List[np.ndarray]]:
    if isinstance(state, AdamState):
        return {"m": state.m, "v": state.v}
    return {"square_avg": state.square_avg, "acc_delta": state.acc_delta}


def _optimizer_header(state) -> Optional[Dict]:
    if state is None:
        return None
    hyper = {k: v for k, v in asdict(state).items() if not isinstance(v, list)}
    slots = _optimizer_slots(state)
    return {
        "kind": "adam" if isinstance(state, AdamState) else "adadelta",
        "hyper": hyper,
        "slots": sorted(name for name, arrays in slots.items() if arrays),
    }


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    """Write a checkpoint; identical checkpoints produce identical bytes."""
    path = Path(path)
    named = checkpoint.model.named_parameters()
    optimizer = _optimizer_header(checkpoint.optimizer)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": checkpoint.config.to_dict(),
        "vocabulary": checkpoint.vocabulary.to_dict(),
        "vocab_digest": checkpoint.vocabulary.digest(),
        "train_config": checkpoint.train_config,
        "log": [asdict(entry) for entry in checkpoint.log],
        "metadata": checkpoint.metadata,
        "tensors": [[name, list(p.shape)] for name, p in named],
        "optimizer": optimizer,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(blob)), blob]
    chunks += [np.ascontiguousarray(p.data, dtype=_PAYLOAD_DTYPE).tobytes() for _, p in named]
    if optimizer is not None:
        slots = _optimizer_slots(checkpoint.optimizer)
        for name in optimizer["slots"]:
            chunks += [np.ascontiguousarray(a, dtype=_PAYLOAD_DTYPE).tobytes() for a in slots[name]]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(chunks))
    except OSError as e:
        raise InputError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint saved to {path}")
    return path


def load_checkpoint(path, vocabulary: Optional[Vocabulary] = None) -> Checkpoint:
    """
    Read a checkpoint written by `save_checkpoint`.

    Args:
        path: Checkpoint file
        vocabulary: When given, must match the stored vocabulary digest

    Returns:
        Checkpoint with a ready-to-use model
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CompatibilityError(f"{path} is not an Inpatient2Vec checkpoint")
    try:
        (length,) = struct.unpack("<Q", raw[4:12])
        header = json.loads(raw[12:12 + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CompatibilityError(f"Corrupt checkpoint header in {path}: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CompatibilityError(
            f"Checkpoint format version {header.get('format_version')} is not supported (expected {FORMAT_VERSION})"
        )
    stored = Vocabulary.from_dict(header["vocabulary"])
    if stored.digest() != header["vocab_digest"]:
        raise CompatibilityError(f"Vocabulary digest in {path} does not match its vocabulary")

    offset = 12 + length

    def take(shape) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * _PAYLOAD_DTYPE.itemsize
        if end > len(raw):
            raise CompatibilityError(f"Checkpoint {path} is truncated")
        values = np.frombuffer(raw, dtype=_PAYLOAD_DTYPE, count=count, offset=offset)
        offset = end
        return values.astype(np.float64).reshape(shape)

    model = Inpatient2Vec(ModelConfig.from_dict(header["model_config"]), stored)
    model.load_state({name: take(shape) for name, shape in header["tensors"]})

    optimizer = None
    if header.get("optimizer"):
        spec = header["optimizer"]
        optimizer = (AdamState if spec["kind"] == "adam" else AdadeltaState)(**spec["hyper"])
        slots = _optimizer_slots(optimizer)
        for name in spec["slots"]:
            slots[name].extend(take(shape) for _, shape in header["tensors"])
    if offset != len(raw):
        raise CompatibilityError(f"Checkpoint {path} has {len(raw) - offset} unexpected trailing bytes")

    checkpoint = Checkpoint(
        model=model,
        train_config=header["train_config"],
        log=[EpochLog(**entry) for entry in header["log"]],
        optimizer=optimizer,
        metadata=header["metadata"],
    )
    if vocabulary is not None:
        checkpoint.check_vocabulary(vocabulary)
    return checkpoint


def write_training_log(log: List[EpochLog], path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(LOG_COLUMNS)
            for entry in log:
                row = asdict(entry)
                writer.writerow(["" if row[c] is None else repr(row[c]) for c in LOG_COLUMNS])
    except OSError as e:
        raise InputError(f"Cannot write training log {path}: {e}") from e
    return path


def read_training_log(path) -> List[EpochLog]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        return [
            EpochLog(
                epoch=int(row["epoch"]),
                train_loss=float(row["train_loss"]),
                valid_loss=float(row["valid_loss"]) if row["valid_loss"] else None,
                mask_loss=float(row["mask_loss"]),
                next_loss=float(row["next_loss"]),
            )
            for row in csv.DictReader(f)
        ]


def checkpoint_summary(checkpoint: Checkpoint) -> Mapping:
    best = checkpoint.metadata.get("best_epoch")
    return {
        "model": checkpoint.model.head_summary(),
        "epochs": len(checkpoint.log) - 1,
        "best_epoch": best,
        "vocab_digest": checkpoint.vocabulary.digest(),
    }
