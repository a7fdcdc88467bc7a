"""Question/answer pair ingestion, normalization, truncation and vocabularies."""

from __future__ import annotations

import csv
import io
import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

PAD, SOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<sos>", "<eos>", "<unk>")
UNK_MARKER = "⟨unk⟩"

PUNCT = ".,?!:;()/"
_PUNCT_RE = re.compile("([" + re.escape(PUNCT) + "])")


class EmptyTextError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str
    source: str | None = None

    def __post_init__(self):
        if not self.question or not self.answer:
            raise EmptyTextError("question and answer must both be non-empty")


def normalize_text(raw: str) -> str:
    """Lowercase, pad ``.,?!:;()/`` with spaces, collapse whitespace."""
    text = _PUNCT_RE.sub(r" \1 ", raw.lower())
    text = " ".join(text.split())
    if not text:
        raise EmptyTextError(f"text is empty after normalization: {raw!r}")
    return text


def _make_pair(question, answer, source=None) -> QAPair:
    return QAPair(normalize_text(question or ""), normalize_text(answer or ""), source)


def ingest(path: str | Path, format: str | None = None) -> tuple[list[QAPair], int]:
    """Read a JSONL or CSV pair file; returns ``(pairs, skipped)``.

    Records whose question or answer normalizes to nothing are skipped and
    counted.  Structural problems raise :class:`CorpusFormatError` naming the
    line (JSONL) or record (CSV).
    """
    path = Path(path)
    fmt = format or path.suffix.lstrip(".").lower()
    text = path.read_text(encoding="utf-8")
    if fmt == "jsonl":
        return _ingest_jsonl(text)
    if fmt == "csv":
        return _ingest_csv(text)
    raise CorpusFormatError(f"unsupported pair format {fmt!r} (expected jsonl or csv)")


def _ingest_jsonl(text: str) -> tuple[list[QAPair], int]:
    pairs, skipped = [], 0
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict) or "question" not in rec or "answer" not in rec:
            raise CorpusFormatError(f"line {lineno}: expected an object with question and answer")
        try:
            pairs.append(_make_pair(rec["question"], rec["answer"], rec.get("source")))
        except EmptyTextError:
            skipped += 1
    return pairs, skipped


def _ingest_csv(text: str) -> tuple[list[QAPair], int]:
    if not text.strip():
        return [], 0
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    if "question" not in header or "answer" not in header:
        raise CorpusFormatError(f"record 0: CSV header must contain question,answer (got {header})")
    pairs, skipped = [], 0
    try:
        for recno, rec in enumerate(reader, 1):
            if None in rec:
                raise CorpusFormatError(f"record {recno}: too many fields")
            try:
                pairs.append(_make_pair(rec["question"], rec["answer"], rec.get("source") or None))
            except EmptyTextError:
                skipped += 1
    except csv.Error as exc:
        raise CorpusFormatError(f"record {reader.line_num}: {exc}") from None
    return pairs, skipped


def write_jsonl(pairs: Iterable[QAPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            rec = {"question": p.question, "answer": p.answer}
            if p.source:
                rec["source"] = p.source
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def truncate_text(text: str, max_chars: int) -> str:
    if max_chars < 1:
        raise ValueError("max_chars must be >= 1")
    if len(text) <= max_chars:
        return text
    cut = text[:max_chars]
    if text[max_chars] != " ":
        # drop the partial trailing token
        cut = cut.rsplit(" ", 1)[0] if " " in cut else ""
    cut = cut.rstrip()
    if not cut:
        raise EmptyTextError(f"truncating to {max_chars} chars leaves nothing: {text[:40]!r}")
    return cut


def truncate(pair: QAPair, max_chars: int) -> QAPair:
    """Cut both sides to ``max_chars`` without splitting a token."""
    return QAPair(truncate_text(pair.question, max_chars), truncate_text(pair.answer, max_chars), pair.source)


def truncate_all(pairs: Iterable[QAPair], max_chars: int) -> tuple[list[QAPair], int]:
    kept, dropped = [], 0
    for p in pairs:
        try:
            kept.append(truncate(p, max_chars))
        except EmptyTextError:
            dropped += 1
    return kept, dropped


def tokenize(text: str, kind: str) -> list[str]:
    if kind == "character":
        return list(text)
    if kind == "word":
        return text.split(" ") if text else []
    raise ValueError(f"unknown tokenization {kind!r}")


class Vocabulary:
    """Bijective token <-> id map with ids 0..3 reserved for PAD/SOS/EOS/UNK."""

    def __init__(self, tokens: Sequence[str], kind: str):
        if kind not in ("character", "word"):
            raise ValueError(f"unknown tokenization {kind!r}")
        self.kind = kind
        self.itos: list[str] = list(SPECIALS) + list(tokens)
        self.stoi: dict[str, int] = {}
        for i, tok in enumerate(self.itos):
            if tok in self.stoi:
                raise ValueError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = i

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.kind == other.kind and self.itos == other.itos

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    @property
    def tokens(self) -> list[str]:
        """Non-reserved tokens in id order."""
        return self.itos[len(SPECIALS):]

    def to_records(self) -> list[list]:
        return [[i, tok] for i, tok in enumerate(self.itos)]

    @classmethod
    def from_records(cls, records: Sequence[Sequence], kind: str) -> "Vocabulary":
        ordered = sorted(records, key=lambda r: r[0])
        if [r[0] for r in ordered] != list(range(len(ordered))):
            raise ValueError("vocabulary ids are not contiguous from 0")
        if tuple(r[1] for r in ordered[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("reserved vocabulary ids were reassigned")
        return cls([r[1] for r in ordered[len(SPECIALS):]], kind)


def build_vocab(pairs: Sequence[QAPair], kind: str, min_count: int | None = None) -> Vocabulary:
    """Tokens with frequency >= min_count, ordered by count desc then lexically."""
    if not pairs:
        raise ValueError("build_vocab needs at least one pair")
    if min_count is None:
        min_count = 1 if kind == "character" else 2
    counts: Counter[str] = Counter()
    for p in pairs:
        counts.update(tokenize(p.question, kind))
        counts.update(tokenize(p.answer, kind))
    kept = [t for t, n in counts.items() if n >= min_count and t not in SPECIALS]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept, kind)


def encode_text(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.stoi.get(tok, UNK) for tok in tokenize(text, vocab.kind)]


def decode_ids(ids: Iterable[int], vocab: Vocabulary) -> str:
    """Inverse of :func:`encode_text`; stops at EOS, drops trailing PAD."""
    ids = list(ids)
    toks = []
    for pos, i in enumerate(ids):
        i = int(i)
        if i == EOS:
            break
        if i == PAD and all(int(j) in (PAD, EOS) for j in ids[pos:]):
            break
        if i in (PAD, SOS):
            raise CodecError(f"control id {i} at position {pos} inside a sequence")
        if i == UNK:
            toks.append(UNK_MARKER)
        elif 0 <= i < len(vocab):
            toks.append(vocab.itos[i])
        else:
            raise CodecError(f"id {i} outside vocabulary of size {len(vocab)}")
    sep = "" if vocab.kind == "character" else " "
    return sep.join(toks)
