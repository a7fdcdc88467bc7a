"""Encoder-decoder variants, attention, the training loss and greedy decoding.

All forward functions work on padded batches internally: ``src`` is an int
array ``(B, T)`` with per-row lengths.  The single-sequence entry points
(:func:`encode`, :func:`greedy_decode`, :func:`teacher_forced_loss`) wrap a
batch of one.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .cells import Cell, GruParams, LstmParams, RnnState, param_shapes, run_bidirectional, run_sequence
from .corpus import EOS, PAD, SOS, Vocabulary
from .tensor import Parameter, Tensor

VARIANTS = ("gru", "lstm", "bilstm", "bilstm_embeddings", "attention")


class VocabularyError(IndexError):
    pass


class SequenceLengthError(ValueError):
    pass


class VectorFormatError(ValueError):
    """Pretrained vector file is inconsistent (e.g. rows of different width)."""


class VectorParseError(VectorFormatError):
    """A line of a pretrained vector file could not be parsed."""


@dataclass
class ModelConfig:
    variant: str
    vocab_size: int
    hidden_size: int = 128
    embedding_dim: int = 64
    max_src_len: int = 100
    tokenization: str = "character"
    pretrained: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.hidden_size < 1 or self.max_src_len < 1 or self.embedding_dim < 1:
            raise ValueError("hidden_size, embedding_dim and max_src_len must be >= 1")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must cover the four reserved tokens")
        if self.tokenization not in ("character", "word"):
            raise ValueError(f"unknown tokenization {self.tokenization!r}")
        if self.variant == "bilstm_embeddings":
            if self.tokenization != "word":
                raise ValueError("bilstm_embeddings needs word tokenization")
            if self.pretrained and self.embedding_dim != 300:
                raise ValueError("pretrained embeddings are 300-dimensional")

    @property
    def cell_kind(self) -> str:
        return "gru" if self.variant in ("gru", "attention") else "lstm"

    @property
    def bidirectional(self) -> bool:
        return self.variant in ("bilstm", "bilstm_embeddings")

    @property
    def encoder_width(self) -> int:
        return 2 * self.hidden_size if self.bidirectional else self.hidden_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    per_step: Tensor        # (B, T, D)
    final: RnnState         # decoder-ready state, (B, H)
    valid_len: np.ndarray   # (B,)

    @property
    def mask(self) -> np.ndarray:
        steps = self.per_step.shape[1]
        return np.arange(steps)[None, :] < self.valid_len[:, None]


@dataclass
class SamplingSchedule:
    kind: str = "linear"
    eps_min: float = 0.25
    i_max: int = 1000

    def __post_init__(self):
        if self.kind not in ("always_teacher", "linear"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 <= self.eps_min <= 1.0:
            raise ValueError("eps_min must be a probability")
        if self.kind == "linear" and self.i_max < 1:
            raise ValueError("i_max must be >= 1")


def scheduled_epsilon(schedule: SamplingSchedule, i: int) -> float:
    """Probability of feeding the true previous token at mini-batch ``i``."""
    if i < 0:
        raise ValueError("batch index must be >= 0")
    if schedule.kind == "always_teacher":
        return 1.0
    return max(schedule.eps_min, 1.0 - i / schedule.i_max)


class Seq2SeqModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Parameter] = {}
        c = config
        H, E, V = c.hidden_size, c.embedding_dim, c.vocab_size
        # one-hot input: a single active unit feeds each embedding row
        self._add("embedding", (V, E), fan_in=1)
        if c.bidirectional:
            self._add_cell("encoder.fwd.lstm", "lstm", E, H)
            self._add_cell("encoder.bwd.lstm", "lstm", E, H)
            self._add("bridge.W", (H, 2 * H), 2 * H)
            self._add("bridge.b", (H,), 2 * H, bias=True)
        else:
            self._add_cell(f"encoder.{c.cell_kind}", c.cell_kind, E, H)
        if c.variant == "attention":
            D = c.encoder_width
            self._add("attention.W", (D, H), H)
            self._add("combine.W", (E, E + D), E + D)
            self._add("combine.b", (E,), E + D, bias=True)
        self._add_cell(f"decoder.{c.cell_kind}", c.cell_kind, E, H)
        self._add("output.W", (V, H), H)
        self._add("output.b", (V,), H, bias=True)

    def _add(self, name, shape, fan_in, bias=False):
        self.params[name] = Parameter(name, Tensor(np.zeros(shape)), fan_in, is_bias=bias)

    def _add_cell(self, prefix, kind, input_size, hidden_size):
        for name, (shape, fan_in) in param_shapes(kind, input_size, hidden_size).items():
            self._add(f"{prefix}.{name}", shape, fan_in, bias=name.startswith("b"))

    # ------------------------------------------------------------------

    def initialize(self, rng: np.random.Generator) -> "Seq2SeqModel":
        """Uniform init for weights, zero biases, forget-gate biases at +1."""
        for name, p in self.params.items():
            if p.is_bias:
                p.value.data = np.zeros(p.value.shape)
                if name.endswith(".b_f"):
                    p.value.data += 1.0
            else:
                T.uniform_init(p, rng)
        return self

    def parameters(self, trainable_only: bool = True) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable or not trainable_only]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].value

    def cell(self, prefix: str) -> Cell:
        kind = prefix.rsplit(".", 1)[-1]
        cls = GruParams if kind == "gru" else LstmParams
        names = param_shapes(kind, 1, 1)
        return Cell(cls(**{n: self[f"{prefix}.{n}"] for n in names}))

    def attach_embeddings(self, table: np.ndarray, freeze: bool = True) -> None:
        emb = self.params["embedding"]
        if table.shape != emb.value.shape:
            raise VectorFormatError(f"embedding table {table.shape} != expected {emb.value.shape}")
        ModelConfig(**{**self.config.to_dict(), "pretrained": True})  # revalidate
        emb.value.data = np.array(table, dtype=np.float64)
        if freeze:
            emb.freeze()
        self.config.pretrained = True

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.value.data for n, p in self.params.items()}


# ----------------------------------------------------------------------
# embeddings


def _check_ids(ids: np.ndarray, model: Seq2SeqModel) -> None:
    V = model.config.vocab_size
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = ids[(ids < 0) | (ids >= V)].ravel()[0]
        raise VocabularyError(f"token id {bad} outside vocabulary of size {V}")


def embed(token_ids, model: Seq2SeqModel) -> list[Tensor]:
    """One embedding row per id."""
    ids = np.asarray(token_ids, dtype=np.int64)
    _check_ids(ids, model)
    table = model["embedding"]
    return [T.take_rows(table, int(i)) for i in ids]


def load_pretrained_vectors(
    path: str | Path, vocab: Vocabulary, rng: np.random.Generator, dim: int | None = None
) -> tuple[np.ndarray, int]:
    """Build a (len(vocab), E) table from a text vector file.

    Vocabulary words present in the file take its vector; everything else is
    drawn like a freshly initialized embedding row.  Returns ``(table, coverage)``.
    """
    found: dict[str, np.ndarray] = {}
    width = dim
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\r\n").rstrip(" ").split(" ")
            if lineno == 1 and len(parts) == 2 and all(x.isdigit() for x in parts):
                continue
            if not line.strip():
                continue
            token, values = parts[0], parts[1:]
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError:
                raise VectorParseError(f"line {lineno}: non-numeric vector entry") from None
            if vec.size == 0:
                raise VectorParseError(f"line {lineno}: token without a vector")
            if width is None:
                width = vec.size
            elif vec.size != width:
                raise VectorFormatError(f"line {lineno}: {vec.size} values, expected {width}")
            if token in vocab and token not in found:
                found[token] = vec
    if width is None:
        raise VectorFormatError("vector file holds no vectors and no dimension was given")
    bound = T.init_bound(1)
    table = rng.uniform(-bound, bound, size=(len(vocab), width))
    for token, vec in found.items():
        table[vocab.stoi[token]] = vec
    return table, len(found)


# ----------------------------------------------------------------------
# encoder


def _as_batch(ids) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim != 1:
        raise ValueError("expected a single id sequence")
    return arr[None, :], np.array([arr.size])


def encode_batch(
    model: Seq2SeqModel,
    src: np.ndarray,
    src_len: np.ndarray,
    *,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    cfg = model.config
    src = np.asarray(src, dtype=np.int64)
    src_len = np.asarray(src_len, dtype=np.int64)
    if src_len.min() < 1 or src_len.max() > cfg.max_src_len:
        raise SequenceLengthError(
            f"question length must lie in [1, {cfg.max_src_len}], got {src_len.min()}..{src_len.max()}"
        )
    _check_ids(src, model)
    steps = int(src_len.max())
    src = src[:, :steps]
    table = model["embedding"]
    inputs = [
        T.dropout_apply(T.take_rows(table, src[:, t]), dropout_p, training, rng) for t in range(steps)
    ]
    mask = (np.arange(steps)[:, None] < src_len[None, :])  # (T, B)
    if cfg.bidirectional:
        outs, f_final, b_final = run_bidirectional(
            inputs, model.cell("encoder.fwd.lstm"), model.cell("encoder.bwd.lstm"), mask=mask
        )
        joint = T.concat([f_final.h, b_final.h], axis=-1)
        h0 = T.tanh(T.linear(joint, model["bridge.W"], model["bridge.b"]))
        final = RnnState(h0, Tensor(np.zeros(h0.shape)))
    else:
        outs, final = run_sequence(inputs, model.cell(f"encoder.{cfg.cell_kind}"), mask=mask)
    return EncoderOutput(T.stack(outs, axis=1), final, src_len)


def encode(question_ids: Sequence[int], model: Seq2SeqModel) -> EncoderOutput:
    src, lens = _as_batch(question_ids)
    if lens[0] == 0:
        raise SequenceLengthError("empty question")
    return encode_batch(model, src, lens)


# ----------------------------------------------------------------------
# attention and decoding


def attention_context(dec_hidden: Tensor, enc: EncoderOutput, model: Seq2SeqModel) -> tuple[Tensor, Tensor]:
    """Dot-product attention of the projected decoder state over encoder steps.

    Returns ``(context (B, D), weights (B, L))``; weights are exactly zero on
    padding and beyond the valid length.
    """
    B, steps, D = enc.per_step.shape
    proj = T.linear(dec_hidden, model["attention.W"])  # (B, D)
    scores = T.reshape(T.matmul(enc.per_step, T.reshape(proj, (B, D, 1))), (B, steps))
    weights = T.softmax_masked(scores, enc.mask)
    context = T.reshape(T.matmul(T.reshape(weights, (B, 1, steps)), enc.per_step), (B, D))
    L = model.config.max_src_len
    if steps < L:
        weights = T.concat([weights, Tensor(np.zeros((B, L - steps)))], axis=-1)
    return context, weights


def decode_step(
    prev_ids,
    state: RnnState,
    enc: EncoderOutput,
    model: Seq2SeqModel,
    *,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, RnnState, Tensor | None]:
    """One decoder step for a batch of previous tokens ``(B,)``."""
    cfg = model.config
    prev = np.asarray(prev_ids, dtype=np.int64).reshape(-1)
    _check_ids(prev, model)
    x = T.dropout_apply(T.take_rows(model["embedding"], prev), dropout_p, training, rng)
    weights = None
    if cfg.variant == "attention":
        context, weights = attention_context(state.h, enc, model)
        x = T.tanh(T.linear(T.concat([x, context], axis=-1), model["combine.W"], model["combine.b"]))
    new_state = model.cell(f"decoder.{cfg.cell_kind}").step(x, state)
    out = T.dropout_apply(new_state.h, dropout_p, training, rng)
    logits = T.linear(out, model["output.W"], model["output.b"])
    return logits, new_state, weights


def batch_loss(
    model: Seq2SeqModel,
    src: np.ndarray,
    src_len: np.ndarray,
    tgt: np.ndarray,
    *,
    epsilon: float = 1.0,
    sampling_rng: np.random.Generator | None = None,
    dropout_p: float = 0.0,
    training: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean cross-entropy over the non-PAD entries of ``tgt`` (B, Ty).

    ``tgt`` already ends each row with EOS.  At every step after the first the
    decoder input is the true previous token with probability ``epsilon``,
    otherwise the argmax of the previous step's logits.
    """
    tgt = np.asarray(tgt, dtype=np.int64)
    weights = (tgt != PAD).astype(np.float64)
    n_tokens = weights.sum()
    if n_tokens == 0:
        raise ValueError("target batch holds no tokens")
    enc = encode_batch(model, src, src_len, dropout_p=dropout_p, training=training, rng=dropout_rng)
    state = enc.final
    B, steps = tgt.shape
    prev = np.full(B, SOS, dtype=np.int64)
    terms = []
    for t in range(steps):
        logits, state, _ = decode_step(
            prev, state, enc, model, dropout_p=dropout_p, training=training, rng=dropout_rng
        )
        if weights[:, t].any():
            terms.append(T.cross_entropy(logits, tgt[:, t], weights[:, t]))
        if t + 1 == steps:
            break
        prev = tgt[:, t]
        if epsilon < 1.0:
            if sampling_rng is None:
                raise ValueError("scheduled sampling with epsilon < 1 needs an rng")
            use_true = sampling_rng.random(B) < epsilon
            prev = np.where(use_true, prev, np.argmax(logits.data, axis=-1))
    loss = terms[0]
    for term in terms[1:]:
        loss = loss + term
    return T.scale(loss, 1.0 / n_tokens)


def teacher_forced_loss(
    question_ids: Sequence[int],
    answer_ids: Sequence[int],
    model: Seq2SeqModel,
    schedule: SamplingSchedule | None = None,
    i: int = 0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Training loss of one pair; ``answer_ids`` exclude the terminal EOS."""
    answer = [a for a in answer_ids]
    if not answer:
        raise ValueError("answer must hold at least one token")
    eps = scheduled_epsilon(schedule or SamplingSchedule("always_teacher"), i)
    src, lens = _as_batch(question_ids)
    tgt = np.array([answer + [EOS]], dtype=np.int64)
    return batch_loss(model, src, lens, tgt, epsilon=eps, sampling_rng=rng)


@dataclass
class Decoded:
    ids: list[int]
    attention: np.ndarray | None = field(default=None, repr=False)  # (steps, L)


def greedy_decode(question_ids: Sequence[int], model: Seq2SeqModel, max_out_len: int) -> Decoded:
    """Feed back the argmax (lowest id on ties) until EOS or ``max_out_len``."""
    with T.no_grad():
        enc = encode(question_ids, model)
        state = enc.final
        prev = np.array([SOS])
        out: list[int] = []
        rows = []
        for _ in range(max_out_len):
            logits, state, weights = decode_step(prev, state, enc, model)
            if weights is not None:
                rows.append(weights.data[0].copy())
            scores = logits.data[0].copy()
            scores[[PAD, SOS]] = -np.inf  # never emitted
            tok = int(np.argmax(scores))
            if tok == EOS:
                break
            out.append(tok)
            prev = np.array([tok])
    attn = None
    if model.config.variant == "attention":
        attn = np.stack(rows) if rows else np.zeros((0, model.config.max_src_len))
    return Decoded(out, attn)


def initial_loss_reference(vocab_size: int) -> float:
    """Cross-entropy of a uniform prediction over the vocabulary."""
    return math.log(vocab_size)
