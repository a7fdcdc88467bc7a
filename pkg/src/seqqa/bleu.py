"""Corpus BLEU built on clipped ("modified") n-gram precision."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence


@dataclass
class BleuInput:
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references:
            raise ValueError("BleuInput needs at least one reference")

    @classmethod
    def from_text(cls, candidate: str, references: Sequence[str]) -> "BleuInput":
        return cls(candidate.split(), [r.split() for r in references])


@dataclass
class BleuReport:
    precisions: list[float]
    numerators: list[int]
    denominators: list[int]
    bp: float
    score: float
    candidate_length: int
    reference_length: int
    max_n: int = field(default=4)

    def to_dict(self) -> dict:
        return {
            "bleu": round(self.score, 2),
            "precisions": self.precisions,
            "bp": self.bp,
            "candidate_length": self.candidate_length,
            "reference_length": self.reference_length,
        }


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(inputs: Sequence[BleuInput], n: int) -> tuple[int, int]:
    """Clipped n-gram matches and total candidate n-grams, summed over inputs.

    Each candidate n-gram count is clipped to the largest count of that
    n-gram in any single reference.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    num = den = 0
    for item in inputs:
        cand = ngrams(item.candidate, n)
        if not cand:
            continue
        max_ref: Counter = Counter()
        for ref in item.references:
            max_ref |= ngrams(ref, n)
        num += sum(min(c, max_ref[g]) for g, c in cand.items())
        den += sum(cand.values())
    return num, den


def closest_ref_length(candidate_len: int, references: Sequence[Sequence[str]]) -> int:
    return min((len(r) for r in references), key=lambda rl: (abs(rl - candidate_len), rl))


def brevity_penalty(c: int, r: int) -> float:
    if c >= r:
        return 1.0
    if c == 0:
        return 0.0
    return math.exp(1.0 - r / c)


def corpus_bleu(inputs: Sequence[BleuInput], max_n: int = 4) -> BleuReport:
    """Corpus-level BLEU on a 0..100 scale with uniform weights 1/max_n.

    An order with no matches (or no candidate n-grams at all) gives 0; no
    smoothing is applied.
    """
    if not inputs:
        raise ValueError("corpus_bleu needs at least one candidate")
    nums, dens, precisions = [], [], []
    for n in range(1, max_n + 1):
        num, den = modified_precision(inputs, n)
        nums.append(num)
        dens.append(den)
        precisions.append(num / den if den else 0.0)
    c = sum(len(x.candidate) for x in inputs)
    r = sum(closest_ref_length(len(x.candidate), x.references) for x in inputs)
    bp = brevity_penalty(c, r)
    if min(precisions) <= 0.0 or bp == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuReport(precisions, nums, dens, bp, score, c, r, max_n)
