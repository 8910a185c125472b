"""Synthetic corpora for smoke runs and controlled experiments.

``toy_corpus`` imitates a small DA-annotated evaluation set (several systems
translating the same sources, raw 0-100 scores). ``PlantedTask`` produces
items whose label is a known linear function of per-word embeddings, so a
trained model can be checked against the truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, Segment
from .encoder import TokenizerConfig, tokenize
from .synthesis import FunctionOracle, lexical_oracle

_SYLLABLES = ("ka", "to", "ri", "mu", "sel", "van", "do", "pe", "lin", "ost", "ra", "ne", "bu", "chi")


def _vocabulary(n: int, rng: np.random.Generator, tokenizer: TokenizerConfig | None = None) -> list[str]:
    """``n`` distinct pseudo-words; with a tokenizer, also distinct token ids."""
    words, ids = [], set()
    while len(words) < n:
        w = "".join(rng.choice(_SYLLABLES, size=rng.integers(2, 4)))
        if w in words:
            continue
        if tokenizer is not None:
            (tid,) = tokenize(w, tokenizer)
            if tid in ids:
                continue
            ids.add(tid)
        words.append(w)
    return words


def toy_corpus(n_sources: int = 40, n_systems: int = 5, seed: int = 0) -> Dataset:
    """DA-style corpus of ``n_sources * n_systems`` segments (200 by default)."""
    rng = np.random.default_rng(seed)
    words = _vocabulary(120, rng)
    foreign = {w: w[::-1] + "q" for w in words}
    quality = np.linspace(0.95, 0.35, n_systems)
    segments = []
    for i in range(n_sources):
        ref_tokens = list(rng.choice(words, size=rng.integers(6, 13)))
        src = " ".join(foreign[w] for w in ref_tokens)
        lang_pair = "de-en" if i % 2 == 0 else "zh-en"
        tag = "wmt19" if i < n_sources // 2 else "wmt20"
        for j in range(n_systems):
            hyp_tokens = [w if rng.random() < quality[j] else str(rng.choice(words)) for w in ref_tokens]
            keep = rng.random(len(hyp_tokens)) < 0.5 + 0.5 * quality[j]
            keep[rng.integers(len(hyp_tokens))] = True
            hyp = " ".join(t for t, k in zip(hyp_tokens, keep) if k)
            ref = " ".join(ref_tokens)
            score = float(np.clip(100 * lexical_oracle(None, hyp, ref) + rng.normal(0, 6), 0, 100))
            segments.append(Segment(id=f"s{i:03d}.sys{j}", lang_pair=lang_pair, system_id=f"sys{j}", src=src,
                                    hyp=hyp, ref=ref, human_score=round(score, 2), dataset_tag=tag))
    return Dataset("toy", tuple(segments))


@dataclass
class PlantedTask:
    """Label = fixed linear functional of the mean (teacher) embedding of hyp and ref tokens."""

    words: list[str]
    embeddings: np.ndarray
    functional: np.ndarray
    sent_len: int = 6

    @classmethod
    def create(cls, seed: int = 0, n_words: int = 64, dim: int = 8, sent_len: int = 6,
               tokenizer: TokenizerConfig = TokenizerConfig()) -> "PlantedTask":
        rng = np.random.default_rng(seed)
        words = _vocabulary(n_words, rng, tokenizer)
        emb = rng.normal(size=(n_words, dim))
        w = rng.normal(size=dim)
        return cls(words, emb, w / np.linalg.norm(w), sent_len)

    def __post_init__(self):
        self._index = {w: i for i, w in enumerate(self.words)}
        self._values = self.embeddings @ self.functional

    def value(self, hyp: str, ref: str) -> float:
        idx = [self._index[t] for t in hyp.split() + ref.split()]
        return float(self._values[idx].mean())

    def oracle(self) -> FunctionOracle:
        return FunctionOracle(lambda src, hyp, ref: self.value(hyp, ref), "planted")

    def triples(self, n: int, seed: int, prefix: str = "p") -> Dataset:
        """Unlabelled (hyp, ref) pairs from the task vocabulary."""
        rng = np.random.default_rng(seed)
        segs = []
        for i in range(n):
            h = rng.integers(0, len(self.words), self.sent_len)
            r = rng.integers(0, len(self.words), self.sent_len)
            segs.append(Segment(id=f"{prefix}{i}", hyp=" ".join(self.words[k] for k in h),
                                ref=" ".join(self.words[k] for k in r), dataset_tag="planted"))
        return Dataset(prefix, tuple(segs))

    def sample(self, n: int, seed: int, noise: float = 0.01, prefix: str = "p") -> Dataset:
        """Labelled items: ``value(hyp, ref) + N(0, noise**2)``."""
        base = self.triples(n, seed, prefix)
        rng = np.random.default_rng([seed, 1])
        eps = rng.normal(0.0, noise, size=n)
        return base.with_segments(
            Segment(id=s.id, hyp=s.hyp, ref=s.ref, human_score=self.value(s.hyp, s.ref) + e,
                    dataset_tag=s.dataset_tag)
            for s, e in zip(base, eps))
