"""Greedy-decode a split, score it with corpus BLEU and render the report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .bleu import BleuInput, BleuReport, corpus_bleu
from .checkpoint import Checkpoint
from .corpus import QAPair, Vocabulary, decode_ids, encode_text
from .model import Seq2SeqModel, greedy_decode

DISPLAY_NAMES = {
    "gru": "GRU",
    "lstm": "LSTM",
    "bilstm": "Bi-LSTM",
    "bilstm_embeddings": "Embeddings with Bi-LSTM",
    "attention": "Attention",
}
SPLIT_TITLES = {"train": "BLEU for Training data", "test": "BLEU for Testing data"}
VALIDATION_CAVEAT = (
    "early stopping monitored the held-out test split; no separate validation split exists"
)


class CompatibilityError(ValueError):
    pass


@dataclass
class PairResult:
    question: str
    reference: str
    prediction: str


@dataclass
class EvalReport:
    variant: str
    max_chars: int
    split: str
    bleu: BleuReport
    pairs: list[PairResult] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "max_chars": self.max_chars,
            "split": self.split,
            "bleu": round(self.bleu.score, 2),
            "precisions": self.bleu.precisions,
            "bp": self.bleu.bp,
            "pairs": [vars(p) for p in self.pairs],
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    def to_text(self) -> str:
        lines = [render_table([self]), ""]
        lines.append("modified precisions: " + " ".join(
            f"p{n}={p:.4f}" for n, p in enumerate(self.bleu.precisions, 1)))
        lines.append(f"brevity penalty: {self.bleu.bp:.6f}")
        lines.extend(f"note: {n}" for n in self.notes)
        lines.append("")
        for i, p in enumerate(self.pairs, 1):
            lines.append(f"{i}) {p.question}")
            lines.append(f"Ground Truth Text: {p.reference}")
            lines.append(f"Predicted Answer: {p.prediction}")
            lines.append("")
        return "\n".join(lines)


def render_table(reports: Sequence[EvalReport]) -> str:
    """Variants as rows, truncation lengths as columns, one table per split."""
    out = []
    for split in sorted({r.split for r in reports}, key=lambda s: (s != "train", s)):
        rows = [r for r in reports if r.split == split]
        cols = sorted({r.max_chars for r in rows})
        variants = [v for v in DISPLAY_NAMES if any(r.variant == v for r in rows)]
        cell = {(r.variant, r.max_chars): r.bleu.score for r in rows}
        width = max(len(DISPLAY_NAMES[v]) for v in variants)
        out.append(SPLIT_TITLES.get(split, f"BLEU for {split} data"))
        out.append(" " * width + "".join(f"{c:>6d} Chars" for c in cols))
        for v in variants:
            vals = "".join(
                f"{cell[(v, c)]:>12.2f}" if (v, c) in cell else " " * 12 for c in cols
            )
            out.append(f"{DISPLAY_NAMES[v]:<{width}}{vals}")
        out.append("")
    return "\n".join(out).rstrip("\n")


def check_compatible(ckpt: Checkpoint) -> None:
    cfg, vocab = ckpt.config, ckpt.vocab
    if len(vocab) != cfg.vocab_size:
        raise CompatibilityError(f"vocabulary has {len(vocab)} tokens, model expects {cfg.vocab_size}")
    if vocab.kind != cfg.tokenization:
        raise CompatibilityError(f"vocabulary is {vocab.kind}-level, model expects {cfg.tokenization}")


def model_decoder(model: Seq2SeqModel, vocab: Vocabulary, max_out_len: int) -> Callable[[str], str]:
    def decode(question: str) -> str:
        ids = encode_text(question, vocab)[: model.config.max_src_len]
        return decode_ids(greedy_decode(ids, model, max_out_len).ids, vocab)
    return decode


def evaluate_model(
    ckpt: Checkpoint,
    pairs: Sequence[QAPair],
    split: str,
    max_out_len: int | None = None,
    max_n: int = 4,
    decoder: Callable[[str], str] | None = None,
) -> EvalReport:
    """Decode every question of ``pairs`` and score against the answers.

    ``decoder`` overrides greedy decoding (maps question text to answer text).
    """
    if not pairs:
        raise ValueError(f"the {split} split is empty")
    check_compatible(ckpt)
    max_chars = int(ckpt.metadata.get("max_chars", ckpt.config.max_src_len))
    if decoder is None:
        model = ckpt.build_model()
        decoder = model_decoder(model, ckpt.vocab, max_out_len or max_chars)
    results = [PairResult(p.question, p.answer, decoder(p.question)) for p in pairs]
    bleu = corpus_bleu([BleuInput.from_text(r.prediction, [r.reference]) for r in results], max_n)
    return EvalReport(ckpt.config.variant, max_chars, split, bleu, results, [VALIDATION_CAVEAT])
