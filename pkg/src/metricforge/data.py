"""Segments, datasets, file formats and Z-score normalization.

Two on-disk dataset formats are supported:

* JSONL, one object per line with keys ``id, lang_pair, system_id, src,
  hyp, ref, human_score, dataset_tag``. Optional keys (``src``,
  ``human_score``) may be omitted or ``null``.
* TSV with those same eight columns in that order and a header row. The
  empty string encodes an absent optional field.

Standard deviations are population (divide by N) throughout.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataFormatError, DegenerateInputError

FIELDS = ("id", "lang_pair", "system_id", "src", "hyp", "ref", "human_score", "dataset_tag")
QUAD_FIELDS = ("src", "hyp_noisy", "ref", "pseudo_score")
PRED_FIELDS = ("segment_id", "model_id", "score")
GROUP_KEYS = ("dataset_tag", "lang_pair", "dataset_tag+lang_pair")


@dataclass(frozen=True)
class Segment:
    id: str
    hyp: str
    ref: str
    src: str | None = None
    human_score: float | None = None
    lang_pair: str = "xx-en"
    system_id: str = ""
    dataset_tag: str = ""

    def __post_init__(self):
        if not self.hyp.strip():
            raise DataFormatError(f"segment {self.id!r}: empty hyp")
        if not self.ref.strip():
            raise DataFormatError(f"segment {self.id!r}: empty ref")
        if self.human_score is not None:
            score = float(self.human_score)
            if not math.isfinite(score):
                raise DataFormatError(f"segment {self.id!r}: non-finite human_score")
            object.__setattr__(self, "human_score", score)

    def to_record(self) -> dict:
        rec = {k: getattr(self, k) for k in FIELDS}
        return {k: v for k, v in rec.items() if v is not None}


@dataclass(frozen=True)
class ScoredQuadruple:
    hyp_noisy: str
    ref: str
    pseudo_score: float
    src: str | None = None

    def __post_init__(self):
        if not self.hyp_noisy.strip():
            raise DataFormatError("quadruple with empty hyp_noisy")
        if not math.isfinite(self.pseudo_score):
            raise DataFormatError("quadruple with non-finite pseudo_score")

    # lets quadruples flow through the same formatting path as segments
    @property
    def hyp(self) -> str:
        return self.hyp_noisy

    def to_record(self) -> dict:
        rec = {"src": self.src, "hyp_noisy": self.hyp_noisy, "ref": self.ref,
               "pseudo_score": self.pseudo_score}
        return {k: v for k, v in rec.items() if v is not None}


@dataclass(frozen=True)
class PredictionRecord:
    segment_id: str
    model_id: str
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise DataFormatError(f"prediction for {self.segment_id!r}: non-finite score")


@dataclass(frozen=True)
class Dataset:
    tag: str
    segments: tuple[Segment, ...] = field(default_factory=tuple)

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        seen = set()
        for seg in segs:
            if seg.id in seen:
                raise DataFormatError(f"duplicate segment id {seg.id!r}")
            seen.add(seg.id)

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def __getitem__(self, i):
        return self.segments[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.segments]

    def by_id(self) -> dict[str, Segment]:
        return {s.id: s for s in self.segments}

    def with_segments(self, segments: Iterable[Segment]) -> "Dataset":
        return Dataset(self.tag, tuple(segments))

    def filter(self, pred) -> "Dataset":
        return self.with_segments(s for s in self.segments if pred(s))


# ---------------------------------------------------------------------------
# io


def _detect_format(path, fmt):
    if fmt is not None:
        if fmt not in ("jsonl", "tsv"):
            raise DataFormatError(f"unknown format {fmt!r}")
        return fmt
    suffix = Path(path).suffix.lower()
    return "tsv" if suffix == ".tsv" else "jsonl"


def _opt_str(value):
    if value is None or value == "":
        return None
    return str(value)


def _segment_from_record(rec: dict, where: str) -> Segment:
    if not isinstance(rec, dict):
        raise DataFormatError(f"{where}: expected an object")
    unknown = set(rec) - set(FIELDS)
    if unknown:
        raise DataFormatError(f"{where}: unknown keys {sorted(unknown)}")
    for key in ("hyp", "ref"):
        if not isinstance(rec.get(key), str) or not rec[key].strip():
            raise DataFormatError(f"{where}: missing or empty {key!r}")
    if "id" not in rec or rec["id"] in (None, ""):
        raise DataFormatError(f"{where}: missing 'id'")
    score = rec.get("human_score")
    if score == "":
        score = None
    try:
        score = None if score is None else float(score)
    except (TypeError, ValueError):
        raise DataFormatError(f"{where}: bad human_score {score!r}") from None
    try:
        return Segment(
            id=str(rec["id"]),
            hyp=rec["hyp"],
            ref=rec["ref"],
            src=_opt_str(rec.get("src")),
            human_score=score,
            lang_pair=str(rec.get("lang_pair", "xx-en")),
            system_id=str(rec.get("system_id", "")),
            dataset_tag=str(rec.get("dataset_tag", "")),
        )
    except DataFormatError as exc:
        raise DataFormatError(f"{where}: {exc}") from None


def _check_id_unique(seen, seg, where):
    if seg.id in seen:
        raise DataFormatError(f"{where}: duplicate id {seg.id!r}")
    seen.add(seg.id)


def load_segments(path, format: str | None = None, tag: str | None = None) -> Dataset:
    """Load a dataset; ``format`` defaults from the file suffix."""
    path = Path(path)
    fmt = _detect_format(path, format)
    segments = []
    seen: set[str] = set()
    with open(path, encoding="utf-8", newline="") as fh:
        if fmt == "jsonl":
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                where = f"{path}:line {lineno}"
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataFormatError(f"{where}: invalid JSON ({exc.msg})") from None
                seg = _segment_from_record(rec, where)
                _check_id_unique(seen, seg, where)
                segments.append(seg)
        else:
            lines = fh.read().split("\n")
            if lines and lines[-1] == "":
                lines.pop()
            if not lines or lines[0].split("\t") != list(FIELDS):
                raise DataFormatError(f"{path}:line 1: header must be the columns {', '.join(FIELDS)}")
            for lineno, line in enumerate(lines[1:], start=2):
                where = f"{path}:line {lineno}"
                if line.endswith("\r"):
                    raise DataFormatError(f"{where}: carriage return in record")
                cols = line.split("\t")
                if len(cols) != len(FIELDS):
                    raise DataFormatError(
                        f"{where}: expected {len(FIELDS)} tab-separated columns, got {len(cols)}")
                rec = dict(zip(FIELDS, cols))
                seg = _segment_from_record(rec, where)
                _check_id_unique(seen, seg, where)
                segments.append(seg)
    return Dataset(tag if tag is not None else path.stem, tuple(segments))


def _check_tsv_text(seg: Segment):
    for key in ("id", "lang_pair", "system_id", "src", "hyp", "ref", "dataset_tag"):
        value = getattr(seg, key)
        if value is not None and ("\t" in value or "\n" in value or "\r" in value):
            raise DataFormatError(f"segment {seg.id!r}: {key} contains tab/newline; not TSV-safe")


def dumps_segments(ds: Dataset, format: str = "jsonl") -> str:
    buf = io.StringIO()
    if format == "jsonl":
        for seg in ds:
            buf.write(json.dumps(seg.to_record(), ensure_ascii=False, sort_keys=True))
            buf.write("\n")
    elif format == "tsv":
        buf.write("\t".join(FIELDS) + "\n")
        for seg in ds:
            _check_tsv_text(seg)
            cols = []
            for key in FIELDS:
                value = getattr(seg, key)
                if value is None:
                    cols.append("")
                elif key == "human_score":
                    cols.append(repr(value))
                else:
                    cols.append(value)
            buf.write("\t".join(cols) + "\n")
    else:
        raise DataFormatError(f"unknown format {format!r}")
    return buf.getvalue()


def atomic_write(path, data: str | bytes):
    """Write via temp file + rename so readers never see partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    mode = "wb" if isinstance(data, bytes) else "w"
    kwargs = {} if isinstance(data, bytes) else {"encoding": "utf-8", "newline": ""}
    with open(tmp, mode, **kwargs) as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_segments(ds: Dataset, path, format: str | None = None):
    atomic_write(path, dumps_segments(ds, _detect_format(path, format)))


def dumps_quadruples(quads: Sequence[ScoredQuadruple]) -> str:
    return "".join(json.dumps(q.to_record(), ensure_ascii=False, sort_keys=True) + "\n"
                   for q in quads)


def save_quadruples(quads: Sequence[ScoredQuadruple], path):
    atomic_write(path, dumps_quadruples(quads))


def load_quadruples(path) -> list[ScoredQuadruple]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:line {lineno}"
            try:
                rec = json.loads(line)
                if set(rec) - set(QUAD_FIELDS):
                    raise KeyError(sorted(set(rec) - set(QUAD_FIELDS)))
                out.append(ScoredQuadruple(
                    hyp_noisy=rec["hyp_noisy"], ref=rec["ref"],
                    pseudo_score=float(rec["pseudo_score"]), src=_opt_str(rec.get("src"))))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, DataFormatError) as exc:
                raise DataFormatError(f"{where}: malformed quadruple ({exc})") from None
    return out


def dumps_predictions(preds: Iterable[PredictionRecord]) -> str:
    lines = ["\t".join(PRED_FIELDS)]
    for p in preds:
        if "\t" in p.segment_id or "\t" in p.model_id:
            raise DataFormatError("tab inside prediction ids")
        lines.append(f"{p.segment_id}\t{p.model_id}\t{p.score!r}")
    return "\n".join(lines) + "\n"


def save_predictions(preds: Iterable[PredictionRecord], path):
    atomic_write(path, dumps_predictions(preds))


def load_predictions(path) -> list[PredictionRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header != list(PRED_FIELDS):
            raise DataFormatError(f"{path}:line 1: header must be segment_id, model_id, score")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataFormatError(f"{path}:line {lineno}: expected 3 columns")
            try:
                out.append(PredictionRecord(row[0], row[1], float(row[2])))
            except ValueError as exc:
                raise DataFormatError(f"{path}:line {lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# normalization


def zscore_normalize(scores) -> list[float]:
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise DegenerateInputError("Z-score needs at least 2 values")
    mean = x.mean()
    centered = x - mean
    std = math.sqrt(float(np.dot(centered, centered)) / x.size)
    if not std > 0.0 or not math.isfinite(std):
        raise DegenerateInputError("Z-score of a constant list (zero variance)")
    return (centered / std).tolist()


def group_value(seg: Segment, group_key: str) -> str:
    if group_key == "dataset_tag":
        return seg.dataset_tag
    if group_key == "lang_pair":
        return seg.lang_pair
    if group_key == "dataset_tag+lang_pair":
        return f"{seg.dataset_tag}|{seg.lang_pair}"
    raise ValueError(f"unknown group key {group_key!r}; expected one of {GROUP_KEYS}")


def zscore_by_group(ds: Dataset, group_key: str = "dataset_tag") -> Dataset:
    """Z-score ``human_score`` independently inside each group."""
    groups: dict[str, list[int]] = {}
    for i, seg in enumerate(ds):
        if seg.human_score is not None:
            groups.setdefault(group_value(seg, group_key), []).append(i)
    new = list(ds.segments)
    for name, idx in groups.items():
        try:
            z = zscore_normalize([ds[i].human_score for i in idx])
        except DegenerateInputError as exc:
            raise DegenerateInputError(f"group {group_key}={name!r}: {exc}") from None
        for i, value in zip(idx, z):
            new[i] = replace(new[i], human_score=value)
    return ds.with_segments(new)
