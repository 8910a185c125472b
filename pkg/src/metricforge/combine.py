"""Convex combination of several metric models and dev-set weight tuning."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .denoise import EnsembleMatrix
from .errors import ConfigError, DataFormatError, DegenerateInputError
from .evaluation import darr_pairs, resolve_threshold


@dataclass(frozen=True)
class WeightVector:
    weights: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if not w:
            raise ConfigError("empty weight vector")
        if any(x < 0 or not math.isfinite(x) for x in w):
            raise ConfigError("weights must be finite and non-negative")
        if abs(sum(w) - 1.0) > 1e-9:
            raise ConfigError(f"weights sum to {sum(w)!r}, not 1")

    def __len__(self):
        return len(self.weights)

    def as_array(self) -> np.ndarray:
        return np.array(self.weights)


def uniform_weights(k: int) -> WeightVector:
    return WeightVector((1.0 / k,) * k)


def _standardize_rows(scores: np.ndarray) -> np.ndarray:
    mu = scores.mean(axis=1, keepdims=True)
    sd = scores.std(axis=1, keepdims=True)
    if np.any(sd == 0):
        raise DegenerateInputError("cannot standardize a constant model row")
    return (scores - mu) / sd


def combine_scores(m: EnsembleMatrix, w: WeightVector, *, standardize: bool = False) -> np.ndarray:
    if len(w) != m.K:
        raise DataFormatError(f"{len(w)} weights for {m.K} models")
    scores = _standardize_rows(m.scores) if standardize else m.scores
    return _mix(w.as_array()[None, :], scores)[0]


def _mix(W, scores):
    # explicit accumulation instead of BLAS matmul: each row's result then
    # does not depend on how many weight vectors are evaluated together
    out = np.zeros((W.shape[0], scores.shape[1]))
    for k in range(scores.shape[0]):
        out += W[:, k, None] * scores[k]
    return out


def simplex_grid(k: int, step: float) -> np.ndarray:
    """All weight vectors with entries in multiples of ``step``, lexicographically ascending."""
    n = round(1.0 / step)
    if n < 1 or abs(n * step - 1.0) > 1e-9:
        raise ConfigError(f"grid step {step} must divide 1")

    def parts(remaining, slots):
        if slots == 1:
            yield (remaining,)
            return
        for first in range(remaining + 1):
            for rest in parts(remaining - first, slots - 1):
                yield (first,) + rest

    return np.array(list(parts(n, k)), dtype=np.float64) / n


def _objective(objective, dev: Dataset, segment_ids, threshold, z_normalized):
    labelled = [s for s in dev if s.human_score is not None]
    if len(labelled) < 2:
        raise DegenerateInputError("dev set needs at least 2 human-scored segments")
    col = {s: i for i, s in enumerate(segment_ids)}
    missing = [s.id for s in labelled if s.id not in col]
    if missing:
        raise DataFormatError(f"dev segments missing from the ensemble: {missing[:5]}")
    if objective == "darr":
        pairs = darr_pairs(labelled, resolve_threshold(threshold, z_normalized))
        if not pairs:
            raise DegenerateInputError("no daRR pairs on the dev set; objective undefined")
        better = np.array([col[b] for b, _ in pairs])
        worse = np.array([col[w] for _, w in pairs])

        def score(C):
            conc = np.count_nonzero(C[:, better] > C[:, worse], axis=1)
            return (2 * conc - len(pairs)) / len(pairs)
        return score
    if objective == "pearson":
        idx = np.array([col[s.id] for s in labelled])
        y = np.array([s.human_score for s in labelled])
        y = y - y.mean()
        if not np.any(y):
            raise DegenerateInputError("constant dev labels; pearson undefined")

        def one(row):
            x = row[idx] - row[idx].mean()
            sxx = float(x @ x)
            # constant combinations have no correlation; rank them last
            return float(np.clip((x @ y) / np.sqrt(sxx * float(y @ y)), -1.0, 1.0)) if sxx > 0 else -np.inf

        def score(C):
            # one 1-D row at a time so a vector scores identically alone or inside the grid
            return np.array([one(row) for row in C])
        return score
    raise ConfigError(f"unknown objective {objective!r}")


def objective_values(m: EnsembleMatrix, dev: Dataset, weights: np.ndarray, objective: str = "darr", *,
                     pair_threshold: float | None = None, z_normalized: bool = False,
                     standardize: bool = False) -> np.ndarray:
    """Dev objective for each row of ``weights`` (one weight vector per row)."""
    score = _objective(objective, dev, m.segment_ids, pair_threshold, z_normalized)
    scores = _standardize_rows(m.scores) if standardize else m.scores
    return score(_mix(np.atleast_2d(np.asarray(weights, dtype=np.float64)), scores))


def tune_weights(m: EnsembleMatrix, dev: Dataset, grid_step: float = 0.1, objective: str = "darr", *,
                 pair_threshold: float | None = None, z_normalized: bool = False,
                 standardize: bool = False) -> WeightVector:
    """Exhaustive simplex-grid search; ties go to the lexicographically smallest vector."""
    if m.K == 1:
        return WeightVector((1.0,))
    grid = simplex_grid(m.K, grid_step)
    values = objective_values(m, dev, grid, objective, pair_threshold=pair_threshold,
                              z_normalized=z_normalized, standardize=standardize)
    best = int(np.argmax(values))  # first maximum == lexicographically smallest
    return WeightVector(tuple(grid[best].tolist()))


def weights_to_json(model_ids: Sequence[str], w: WeightVector) -> list[dict]:
    return [{"model_id": mid, "weight": wt} for mid, wt in zip(model_ids, w.weights)]


def weights_from_json(records: list[dict]) -> tuple[list[str], WeightVector]:
    try:
        return [r["model_id"] for r in records], WeightVector(tuple(r["weight"] for r in records))
    except (KeyError, TypeError) as exc:
        raise DataFormatError(f"malformed weights file ({exc})") from None
