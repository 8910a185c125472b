"""Pre-training corpus construction: word-drop noise plus pseudo-labels.

A fixed fraction of the triples get their hypothesis corrupted by dropping
words, every triple is scored by an oracle metric, and the scores are
Z-normalized over the whole corpus.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Callable, Protocol, runtime_checkable

import numpy as np

from .data import Dataset, ScoredQuadruple, zscore_normalize
from .errors import ConfigError, DataFormatError, DegenerateInputError


@dataclass(frozen=True)
class NoiseConfig:
    selection_fraction: float = 0.3
    drop_ratio_min: float = 0.1
    drop_ratio_max: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.selection_fraction <= 1.0:
            raise ConfigError("selection_fraction must be in [0, 1]")
        if not 0.0 <= self.drop_ratio_min <= self.drop_ratio_max <= 1.0:
            raise ConfigError("need 0 <= drop_ratio_min <= drop_ratio_max <= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@runtime_checkable
class OracleScorer(Protocol):
    identifier: str

    def score(self, src: str | None, hyp: str, ref: str) -> float: ...


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def word_drop(sentence: str, drop_ratio: float, seed) -> str:
    """Drop ``round(drop_ratio * n)`` whitespace tokens (half rounds up).

    At least one token always survives, and a positive ratio on a sentence of
    two or more tokens always drops at least one.
    """
    tokens = sentence.split()
    if not tokens:
        raise DataFormatError("word_drop on an empty sentence")
    if not 0.0 <= drop_ratio <= 1.0:
        raise ValueError("drop_ratio must be in [0, 1]")
    n = len(tokens)
    k = min(math.floor(drop_ratio * n + 0.5), n - 1)
    if drop_ratio > 0 and n > 1:
        k = max(k, 1)
    if k == 0:
        return sentence
    rng = np.random.default_rng(seed)
    dropped = set(rng.choice(n, size=k, replace=False).tolist())
    return " ".join(t for i, t in enumerate(tokens) if i not in dropped)


def selected_indices(n: int, cfg: NoiseConfig) -> np.ndarray:
    count = math.floor(cfg.selection_fraction * n)
    rng = np.random.default_rng(_derive_seed(cfg.seed, 0))
    return np.sort(rng.choice(n, size=count, replace=False))


def corrupt_corpus(triples: Dataset, cfg: NoiseConfig) -> Dataset:
    """Replace the hypothesis of ``floor(fraction * N)`` seeded picks with word-dropped text.

    Each segment's ratio and drop pattern derive only from ``cfg.seed`` and the
    segment index, so the result does not depend on processing order.
    """
    segments = list(triples.segments)
    for i in selected_indices(len(segments), cfg).tolist():
        rng = np.random.default_rng(_derive_seed(cfg.seed, 1, i))
        ratio = rng.uniform(cfg.drop_ratio_min, cfg.drop_ratio_max)
        segments[i] = replace(segments[i], hyp=word_drop(segments[i].hyp, ratio, _derive_seed(cfg.seed, 2, i)))
    return triples.with_segments(segments)


def lexical_oracle(src: str | None, hyp: str, ref: str) -> float:
    """Token F1 between hyp and ref under multiset overlap; src is ignored."""
    h = Counter(hyp.split())
    r = Counter(ref.split())
    overlap = sum((h & r).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(h.values())
    recall = overlap / sum(r.values())
    return 2 * precision * recall / (precision + recall)


class LexicalOracle:
    identifier = "lexical-f1"

    def score(self, src, hyp, ref):
        return lexical_oracle(src, hyp, ref)


class FunctionOracle:
    """Adapts a plain ``f(src, hyp, ref) -> float`` to the scorer interface."""

    def __init__(self, fn: Callable[[str | None, str, str], float], identifier: str):
        self.fn = fn
        self.identifier = identifier

    def score(self, src, hyp, ref):
        return self.fn(src, hyp, ref)


def build_pretrain_corpus(triples: Dataset, cfg: NoiseConfig, oracle: OracleScorer = LexicalOracle(),
                          include_src: bool = True) -> list[ScoredQuadruple]:
    if not len(triples):
        raise DataFormatError("empty corpus")
    noisy = corrupt_corpus(triples, cfg)
    raw = []
    for seg in noisy:
        value = float(oracle.score(seg.src, seg.hyp, seg.ref))
        if not math.isfinite(value):
            raise DataFormatError(f"oracle {oracle.identifier!r} returned {value} for {seg.id!r}")
        raw.append(value)
    try:
        z = zscore_normalize(raw)
    except DegenerateInputError as exc:
        raise DegenerateInputError(f"oracle {oracle.identifier!r} is constant over the corpus: {exc}") from None
    return [ScoredQuadruple(hyp_noisy=seg.hyp, ref=seg.ref, pseudo_score=s,
                            src=seg.src if include_src else None)
            for seg, s in zip(noisy, z)]
