"""Mini-batch SGD with scheduled sampling, early stopping and loss curves."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .corpus import EOS, PAD, QAPair, Vocabulary, encode_text
from .model import SamplingSchedule, Seq2SeqModel, batch_loss, scheduled_epsilon
from .tensor import ContractError, RngStreams

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, batch_index: int, value: float):
        super().__init__(f"non-finite loss {value} at batch {batch_index}")
        self.batch_index = batch_index


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.5
    epochs_max: int = 100
    clip_norm: float = 5.0
    dropout_p: float = 0.1
    weight_decay: float = 1e-5
    early_stop_patience: int = 5
    seed: int = 0
    schedule: SamplingSchedule = field(default_factory=SamplingSchedule)
    max_chars: int = 50
    early_stopping: bool = True

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = SamplingSchedule(**self.schedule)
        if self.batch_size < 1 or self.early_stop_patience < 1 or self.max_chars < 1:
            raise ContractError("batch_size, early_stop_patience and max_chars must be >= 1")
        if self.epochs_max < 1:
            raise ContractError("epochs_max must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ContractError("learning_rate and weight_decay must be >= 0")
        if not self.clip_norm > 0:
            raise ContractError("clip_norm must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["clip_norm"]):
            d["clip_norm"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("clip_norm") == "inf":
            d["clip_norm"] = math.inf
        return cls(**d)


@dataclass
class EncodedPair:
    question: list[int]
    answer: list[int]  # without EOS


@dataclass
class Batch:
    src: np.ndarray      # (B, Tq) PAD-filled
    src_len: np.ndarray  # (B,)
    tgt: np.ndarray      # (B, Ta + 1) answer + EOS, PAD-filled

    def __len__(self) -> int:
        return self.src.shape[0]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class LossCurve:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, epoch: int, train_loss: float, val_loss: float) -> None:
        if self.records and epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(EpochRecord(epoch, train_loss, val_loss))

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.val_loss:.6f}"])

    @classmethod
    def from_csv(cls, path: str | Path) -> "LossCurve":
        curve = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                curve.append(int(row["epoch"]), float(row["train_loss"]), float(row["val_loss"]))
        return curve


# ----------------------------------------------------------------------
# data preparation


def split_corpus(corpus: Sequence, seed: int) -> tuple[list, list]:
    """Seeded shuffle, then the first floor(0.7 N) items train, the rest test."""
    if len(corpus) == 0:
        raise ContractError("cannot split an empty corpus")
    order = T.make_rng(seed, "split").permutation(len(corpus))
    cut = int(math.floor(0.7 * len(corpus)))
    return [corpus[i] for i in order[:cut]], [corpus[i] for i in order[cut:]]


def encode_pairs(pairs: Sequence[QAPair], vocab: Vocabulary) -> list[EncodedPair]:
    return [EncodedPair(encode_text(p.question, vocab), encode_text(p.answer, vocab)) for p in pairs]


def collate(pairs: Sequence[EncodedPair], pad: int = PAD) -> Batch:
    B = len(pairs)
    q_len = np.array([len(p.question) for p in pairs], dtype=np.int64)
    a_len = np.array([len(p.answer) + 1 for p in pairs], dtype=np.int64)
    src = np.full((B, q_len.max()), pad, dtype=np.int64)
    tgt = np.full((B, a_len.max()), pad, dtype=np.int64)
    for b, p in enumerate(pairs):
        src[b, : len(p.question)] = p.question
        tgt[b, : len(p.answer)] = p.answer
        tgt[b, len(p.answer)] = EOS
    return Batch(src, q_len, tgt)


def make_batches(
    pairs: Sequence[EncodedPair],
    batch_size: int,
    pad: int = PAD,
    rng: np.random.Generator | None = None,
) -> list[Batch]:
    """Chunk (optionally shuffled) pairs into padded batches; keeps the tail."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = np.arange(len(pairs)) if rng is None else rng.permutation(len(pairs))
    return [
        collate([pairs[i] for i in order[s: s + batch_size]], pad)
        for s in range(0, len(pairs), batch_size)
    ]


# ----------------------------------------------------------------------
# loop


@dataclass
class TrainState:
    """Mutable bookkeeping for one run: rng streams and the global batch index."""

    rngs: RngStreams
    batch_index: int = 0
    epsilons: list[float] = field(default_factory=list)


def train_epoch(model: Seq2SeqModel, batches: Sequence[Batch], config: TrainConfig, state: TrainState) -> float:
    """One pass of forward / backward / clip / SGD per batch; returns the mean loss."""
    params = model.parameters()
    losses = []
    for batch in batches:
        eps = scheduled_epsilon(config.schedule, state.batch_index)
        state.epsilons.append(eps)
        loss = batch_loss(
            model, batch.src, batch.src_len, batch.tgt,
            epsilon=eps, sampling_rng=state.rngs["sampling"],
            dropout_p=config.dropout_p, training=True, dropout_rng=state.rngs["dropout"],
        )
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(state.batch_index, value)
        T.backward(loss)
        if config.learning_rate > 0:
            if math.isfinite(config.clip_norm):
                T.clip_global_norm(params, config.clip_norm)
            T.sgd_step(params, config.learning_rate, config.weight_decay)
        else:
            T.zero_grads(params)
        losses.append(value)
        state.batch_index += 1
    return float(np.mean(losses))


def evaluate_loss(model: Seq2SeqModel, pairs: Sequence[EncodedPair], batch_size: int = 64) -> float:
    """Token-weighted teacher-forced loss without dropout."""
    if not pairs:
        return float("nan")
    total, count = 0.0, 0
    with T.no_grad():
        for batch in make_batches(pairs, batch_size):
            n = int((batch.tgt != PAD).sum())
            total += batch_loss(model, batch.src, batch.src_len, batch.tgt).item() * n
            count += n
    return total / count


def fit(
    model: Seq2SeqModel,
    pairs: Sequence[EncodedPair],
    config: TrainConfig,
    vocab: Vocabulary,
    *,
    val_loss_fn: Callable[[Seq2SeqModel, list[EncodedPair]], float] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[Checkpoint, LossCurve]:
    """Train with early stopping on the held-out 30 % split.

    Returns the checkpoint of the epoch with the lowest validation loss and
    the full per-epoch loss curve.  With ``config.early_stopping`` off every
    epoch runs and the final weights are returned instead.
    """
    train, test = split_corpus(list(pairs), config.seed)
    if not train:
        raise ContractError(f"corpus of {len(pairs)} pairs leaves an empty training split")
    val_loss_fn = val_loss_fn or (lambda m, p: evaluate_loss(m, p, config.batch_size))
    state = TrainState(RngStreams(config.seed))
    curve = LossCurve()
    best: Checkpoint | None = None
    best_val = math.inf
    stale = 0

    def snapshot(epoch: int, val_loss: float) -> Checkpoint:
        return Checkpoint.from_model(model, vocab, {
            "epoch": epoch,
            "val_loss": val_loss,
            "batch_index": state.batch_index,
            "rng_state": state.rngs.state(),
        })

    for epoch in range(1, config.epochs_max + 1):
        batches = make_batches(train, config.batch_size, rng=state.rngs["shuffle"])
        train_loss = train_epoch(model, batches, config, state)
        val_loss = val_loss_fn(model, test)
        curve.append(epoch, train_loss, val_loss)
        if on_epoch:
            on_epoch(curve.records[-1])
        log.info("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if not config.early_stopping:
            continue
        if val_loss < best_val:
            best_val = val_loss
            stale = 0
            best = snapshot(epoch, val_loss)
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                log.info("early stop after epoch %d (%d stale epochs)", epoch, stale)
                break
    if best is None:
        # early stopping off, or validation never finite: keep the last weights
        last = curve.records[-1]
        best = snapshot(last.epoch, last.val_loss)
        best.metadata["selected"] = "last"
    else:
        best.metadata["selected"] = "best_validation"
    best.metadata["train_config"] = config.to_dict()
    best.metadata["n_train"] = len(train)
    best.metadata["n_test"] = len(test)
    return best, curve
