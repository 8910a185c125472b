"""Flag noisy labels by checkpoint ranking disagreement and relabel them.

Each checkpoint's scores over the dataset become normalized ranks in [0, 1];
an item whose rank varies a lot across checkpoints (population variance above
``variance_threshold``) is considered noisy. Flagged items take the mean
checkpoint score as their new label and the dataset is then Z-normalized per
group.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import Dataset, PredictionRecord, zscore_by_group
from .errors import ConfigError, DataFormatError, DegenerateInputError


@dataclass(frozen=True)
class EnsembleMatrix:
    model_ids: tuple[str, ...]
    segment_ids: tuple[str, ...]
    scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "model_ids", tuple(self.model_ids))
        object.__setattr__(self, "segment_ids", tuple(self.segment_ids))
        object.__setattr__(self, "scores", scores)
        if scores.shape != (len(self.model_ids), len(self.segment_ids)):
            raise DataFormatError(f"scores shape {scores.shape} does not match "
                                  f"{len(self.model_ids)} models x {len(self.segment_ids)} segments")
        if len(set(self.model_ids)) != len(self.model_ids) or len(set(self.segment_ids)) != len(self.segment_ids):
            raise DataFormatError("duplicate model or segment ids")
        if not np.all(np.isfinite(scores)):
            raise DataFormatError("non-finite ensemble score")

    @property
    def K(self) -> int:
        return len(self.model_ids)

    @property
    def N(self) -> int:
        return len(self.segment_ids)

    def column(self, segment_ids: Sequence[str]) -> np.ndarray:
        index = {s: i for i, s in enumerate(self.segment_ids)}
        try:
            return self.scores[:, [index[s] for s in segment_ids]]
        except KeyError as exc:
            raise DataFormatError(f"segment {exc.args[0]!r} not in ensemble") from None

    @classmethod
    def from_predictions(cls, records: Iterable[PredictionRecord],
                         segment_ids: Sequence[str] | None = None) -> "EnsembleMatrix":
        """Assemble from prediction records; every model must score every segment."""
        table: dict[str, dict[str, float]] = {}
        order: list[str] = []
        seen = set()
        for r in records:
            row = table.setdefault(r.model_id, {})
            if r.segment_id in row:
                raise DataFormatError(f"model {r.model_id!r} scores {r.segment_id!r} twice")
            row[r.segment_id] = r.score
            if r.segment_id not in seen:
                seen.add(r.segment_id)
                order.append(r.segment_id)
        segs = list(order if segment_ids is None else segment_ids)
        models = list(table)
        scores = np.empty((len(models), len(segs)))
        for k, model in enumerate(models):
            row = table[model]
            missing = [s for s in segs if s not in row]
            if missing:
                raise DataFormatError(f"model {model!r} has no score for {missing[:5]}")
            scores[k] = [row[s] for s in segs]
        return cls(tuple(models), tuple(segs), scores)

    def to_predictions(self) -> list[PredictionRecord]:
        return [PredictionRecord(s, m, float(self.scores[k, i]))
                for k, m in enumerate(self.model_ids) for i, s in enumerate(self.segment_ids)]


@dataclass(frozen=True)
class DenoiseConfig:
    variance_threshold: float = 0.05
    min_models: int = 2
    # also rank the human labels as one more row (model-vs-human reading)
    include_human: bool = False
    group_key: str = "dataset_tag"

    def __post_init__(self):
        if not 0.0 < self.variance_threshold <= 0.25:
            raise ConfigError("variance_threshold must be in (0, 0.25]")
        if self.min_models < 2:
            raise ConfigError("min_models must be >= 2")


def normalized_ranks(scores) -> np.ndarray:
    """Average ranks for ties, scaled so the minimum maps to 0 and the maximum to 1."""
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise DegenerateInputError("normalized ranks need at least 2 scores")
    return (rankdata(x, method="average") - 1.0) / (x.size - 1)


def _rows(m: EnsembleMatrix, cfg: DenoiseConfig, human) -> np.ndarray:
    if m.K < cfg.min_models:
        raise DegenerateInputError(f"{m.K} models; denoising needs at least {cfg.min_models}")
    if m.N < 2:
        raise DegenerateInputError("ranking variance needs at least 2 segments")
    rows = m.scores
    if cfg.include_human:
        if human is None:
            raise ConfigError("include_human needs the human scores")
        human = np.asarray(human, dtype=np.float64)
        if human.shape != (m.N,):
            raise DataFormatError("human score vector does not match the ensemble segments")
        rows = np.vstack([rows, human])
    return rows


def ranking_variance(m: EnsembleMatrix, cfg: DenoiseConfig = DenoiseConfig(), human=None) -> np.ndarray:
    rows = _rows(m, cfg, human)
    ranks = np.vstack([normalized_ranks(r) for r in rows])
    return ranks.var(axis=0)


def flag_noisy(m: EnsembleMatrix, cfg: DenoiseConfig = DenoiseConfig(), human=None) -> set[str]:
    var = ranking_variance(m, cfg, human)
    return {s for s, v in zip(m.segment_ids, var) if v > cfg.variance_threshold}


def human_vector(ds: Dataset, m: EnsembleMatrix) -> np.ndarray:
    segs = ds.by_id()
    try:
        values = [segs[s].human_score for s in m.segment_ids]
    except KeyError as exc:
        raise DataFormatError(f"ensemble segment {exc.args[0]!r} not in dataset") from None
    if any(v is None for v in values):
        raise DataFormatError("include_human needs a human score for every ensemble segment")
    return np.array(values, dtype=np.float64)


def rescore_noisy(ds: Dataset, m: EnsembleMatrix, flagged: Iterable[str], *,
                  group_key: str = "dataset_tag", normalize: bool = True) -> Dataset:
    """Relabel flagged segments with the mean checkpoint score, then Z-score per group."""
    flagged = set(flagged)
    present = set(ds.ids)
    index = {s: i for i, s in enumerate(m.segment_ids)}
    for sid in sorted(flagged):
        if sid not in present:
            raise DataFormatError(f"flagged segment {sid!r} not in dataset")
        if sid not in index:
            raise DataFormatError(f"flagged segment {sid!r} not in ensemble")
    means = m.scores.mean(axis=0)
    out = ds.with_segments(
        replace(seg, human_score=float(means[index[seg.id]])) if seg.id in flagged else seg for seg in ds)
    return zscore_by_group(out, group_key) if normalize else out


def denoise(ds: Dataset, m: EnsembleMatrix, cfg: DenoiseConfig = DenoiseConfig()) -> tuple[Dataset, list[str]]:
    """Flag then rescore; flagged ids are returned in ensemble order."""
    human = human_vector(ds, m) if cfg.include_human else None
    flagged = flag_noisy(m, cfg, human)
    ordered = [s for s in m.segment_ids if s in flagged]
    return rescore_noisy(ds, m, flagged, group_key=cfg.group_key), ordered
