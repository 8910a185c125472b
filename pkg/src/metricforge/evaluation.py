"""Segment-level correlation with human judgements and grouped k-fold splits.

daRR: within each group of hypotheses for the same source item, every pair
whose human scores differ by at least ``pair_threshold`` becomes a relative
ranking judgement. A metric is scored by the Kendall-like
``(concordant - discordant) / (concordant + discordant)``, where metric ties
count as discordant.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset, Segment
from .errors import ConfigError, DataFormatError, DegenerateInputError

DEFAULT_DA_THRESHOLD = 25.0


@dataclass(frozen=True)
class CorrelationReport:
    lang_pair: str
    n_segments: int
    n_darr_pairs: int
    pearson: float | None
    darr_tau: float | None
    n_unscored: int = 0
    warning: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataFormatError("pearson needs two equal-length vectors")
    if x.size < 2:
        raise DegenerateInputError("pearson needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("pearson of a constant vector")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def source_key(seg: Segment) -> tuple:
    return (seg.lang_pair, seg.src or "", seg.ref)


def resolve_threshold(pair_threshold: float | None, z_normalized: bool) -> float:
    if pair_threshold is not None:
        if pair_threshold < 0:
            raise ConfigError("pair threshold must be non-negative")
        return float(pair_threshold)
    if z_normalized:
        raise ConfigError("human scores are Z-normalized: pass an explicit pair threshold "
                          f"(the default {DEFAULT_DA_THRESHOLD:g} is on the raw DA scale)")
    return DEFAULT_DA_THRESHOLD


def darr_pairs(segments: Sequence[Segment], pair_threshold: float | None = DEFAULT_DA_THRESHOLD, *,
               z_normalized: bool = False) -> list[tuple[str, str]]:
    """Relative-ranking pairs, better hypothesis first.

    Segments are grouped by (lang_pair, src, ref); those lacking a human
    score are ignored. Equal human scores never form a pair.
    """
    threshold = resolve_threshold(pair_threshold, z_normalized)
    groups: dict[tuple, list[Segment]] = {}
    for seg in segments:
        if seg.human_score is not None:
            groups.setdefault(source_key(seg), []).append(seg)
    pairs = []
    for members in groups.values():
        for i in range(len(members)):
            a = members[i]
            for j in range(i + 1, len(members)):
                b = members[j]
                gap = a.human_score - b.human_score
                if gap == 0.0 or abs(gap) < threshold:
                    continue
                pairs.append((a.id, b.id) if gap > 0 else (b.id, a.id))
    return pairs


def darr_counts(pairs: Sequence[tuple[str, str]], metric_scores: Mapping[str, float]) -> tuple[int, int]:
    """(concordant, discordant) counts; metric ties are discordant."""
    better = np.fromiter((metric_scores[b] for b, _ in pairs), dtype=np.float64, count=len(pairs))
    worse = np.fromiter((metric_scores[w] for _, w in pairs), dtype=np.float64, count=len(pairs))
    concordant = int(np.count_nonzero(better > worse))
    return concordant, len(pairs) - concordant


def darr_tau(pairs: Sequence[tuple[str, str]], metric_scores: Mapping[str, float]) -> float:
    if not pairs:
        raise DegenerateInputError("daRR tau needs at least one pair")
    missing = {i for p in pairs for i in p} - metric_scores.keys()
    if missing:
        raise DataFormatError(f"no metric score for {sorted(missing)[:5]}")
    c, d = darr_counts(pairs, metric_scores)
    return (c - d) / (c + d)


def evaluate(ds: Dataset, predictions: Mapping[str, float], *, pair_threshold: float | None = None,
             z_normalized: bool = False) -> list[CorrelationReport]:
    """One report per language pair, sorted by language pair."""
    threshold = resolve_threshold(pair_threshold, z_normalized)
    by_lp: dict[str, list[Segment]] = {}
    for seg in ds:
        by_lp.setdefault(seg.lang_pair, []).append(seg)
    reports = []
    for lp in sorted(by_lp):
        segs = by_lp[lp]
        scored = [s for s in segs if s.human_score is not None]
        unscored = len(segs) - len(scored)
        missing = [s.id for s in scored if s.id not in predictions]
        if missing:
            raise DataFormatError(f"{lp}: no prediction for {missing[:5]}")
        if not scored:
            reports.append(CorrelationReport(lp, 0, 0, None, None, unscored, "no human scores; skipped"))
            continue
        warnings = []
        pred = [float(predictions[s.id]) for s in scored]
        try:
            r = pearson(pred, [s.human_score for s in scored])
        except DegenerateInputError as exc:
            r = None
            warnings.append(f"pearson undefined: {exc}")
        pairs = darr_pairs(scored, threshold)
        tau = darr_tau(pairs, predictions) if pairs else None
        if not pairs:
            warnings.append("no daRR pairs")
        reports.append(CorrelationReport(lp, len(scored), len(pairs), r, tau, unscored,
                                         "; ".join(warnings) or None))
    return reports


def kfold_split(ds: Dataset, k: int = 4, seed: int = 0) -> list[Dataset]:
    """Partition into ``k`` folds, never splitting a (src, ref) group.

    Groups are shuffled with ``seed``, ordered largest first (stable), and
    each is placed in the currently smallest fold (lowest index on ties).
    """
    if k < 2:
        raise ConfigError("k must be >= 2")
    groups: dict[tuple, list[int]] = {}
    for i, seg in enumerate(ds):
        groups.setdefault((seg.src or "", seg.ref), []).append(i)
    if len(groups) < k:
        raise DegenerateInputError(f"{len(groups)} (src, ref) groups cannot fill {k} folds")
    members = list(groups.values())
    order = np.random.default_rng(seed).permutation(len(members))
    order = sorted(order.tolist(), key=lambda g: -len(members[g]))
    sizes = [0] * k
    fold_of = [0] * len(ds)
    for g in order:
        f = min(range(k), key=lambda j: (sizes[j], j))
        sizes[f] += len(members[g])
        for i in members[g]:
            fold_of[i] = f
    return [Dataset(f"{ds.tag}.fold{f}", tuple(s for s, fo in zip(ds, fold_of) if fo == f)) for f in range(k)]
