"""Regression head, MSE objective, warmup/decay schedule and the trainer.

The model scores a tuple as ``s = W . X + b`` where ``X`` is the encoder's
position-0 representation and is trained to minimize ``(s - score)**2``
averaged over a mini-batch.

Checkpoint layout: the encoder parameter block (see ``encoder``), then
``d + 1`` little-endian float64 head values (W then b), then a UTF-8 JSON
descriptor, its byte length as uint32, and the trailer ``b"MFRGDSC1"``.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .data import atomic_write
from .encoder import (EncoderConfig, EncoderParams, TokenizerConfig, dropout_masks, encode_batch,
                      format_item, init_params, pack_sequences)
from .errors import ConfigError, DataFormatError, NonFiniteLossError

log = logging.getLogger(__name__)

TRAILER = b"MFRGDSC1"
# schedules for large-GPU runs; desk defaults below are far smaller
FULL_SCALE_PRETRAIN = {"max_lr": 5e-6, "total_steps": 500_000, "warmup_steps": 50_000}
FULL_SCALE_FINETUNE = {"max_lr": 5e-6, "total_steps": 20_000, "warmup_steps": 2_000, "batch_size": 16}


@dataclass
class RegressionHead:
    W: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = float(self.b)
        if self.W.ndim != 1 or not np.all(np.isfinite(self.W)) or not math.isfinite(self.b):
            raise DataFormatError("head must be a finite vector and a finite bias")

    def packed(self) -> np.ndarray:
        return np.concatenate([self.W, [self.b]])

    @classmethod
    def from_packed(cls, v) -> "RegressionHead":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:-1].copy(), float(v[-1]))


@dataclass(frozen=True)
class TrainConfig:
    max_lr: float = 1e-3
    total_steps: int = 5000
    warmup_steps: int = 500
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.total_steps < 1 or self.warmup_steps < 1:
            raise ConfigError("total_steps and warmup_steps must be positive")
        if self.warmup_steps >= self.total_steps:
            raise ConfigError("warmup_steps must be < total_steps")
        # zero is tolerated for the frozen-parameter check; configs require > 0
        if not (self.max_lr >= 0.0 and math.isfinite(self.max_lr)):
            raise ConfigError("max_lr must be finite and non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class ModelBundle:
    tokenizer: TokenizerConfig
    encoder_cfg: EncoderConfig
    params: EncoderParams
    head: RegressionHead
    model_id: str = "model"
    with_src: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.head.W.shape != (self.params.d,):
            raise DataFormatError("head width does not match the encoder hidden size")
        if self.params.V != self.tokenizer.vocab_size or self.params.d != self.encoder_cfg.hidden_size \
                or self.params.P != self.encoder_cfg.max_positions:
            raise DataFormatError("encoder parameters do not match the configs")

    def copy(self, **changes) -> "ModelBundle":
        fields = dict(tokenizer=self.tokenizer, encoder_cfg=self.encoder_cfg, params=self.params.copy(),
                      head=RegressionHead(self.head.W.copy(), self.head.b), model_id=self.model_id,
                      with_src=self.with_src, meta=dict(self.meta))
        fields.update(changes)
        return ModelBundle(**fields)

    def descriptor(self) -> dict:
        return {"model_id": self.model_id, "with_src": self.with_src,
                "tokenizer": asdict(self.tokenizer), "encoder": asdict(self.encoder_cfg),
                "meta": self.meta}


def new_bundle(tokenizer: TokenizerConfig = TokenizerConfig(), encoder_cfg: EncoderConfig = EncoderConfig(),
               *, with_src: bool = False, model_id: str = "model", seed: int | None = None) -> ModelBundle:
    seed = encoder_cfg.seed if seed is None else seed
    params = init_params(tokenizer, encoder_cfg, seed)
    rng = np.random.default_rng([seed, 1])
    head = RegressionHead(rng.uniform(-0.1, 0.1, encoder_cfg.hidden_size), 0.0)
    return ModelBundle(tokenizer, encoder_cfg, params, head, model_id, with_src)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(bundle: ModelBundle) -> bytes:
    desc = json.dumps(bundle.descriptor(), sort_keys=True).encode("utf-8")
    return (bundle.params.to_bytes() + bundle.head.packed().astype("<f8").tobytes()
            + desc + struct.pack("<I", len(desc)) + TRAILER)


def save_checkpoint(bundle: ModelBundle, path):
    atomic_write(path, checkpoint_bytes(bundle))


def read_descriptor(blob: bytes) -> dict:
    if len(blob) < 12 or blob[-8:] != TRAILER:
        raise DataFormatError("not a checkpoint: missing descriptor trailer")
    (n,) = struct.unpack("<I", blob[-12:-8])
    return json.loads(blob[-12 - n:-12].decode("utf-8"))


def checkpoint_from_bytes(blob: bytes) -> ModelBundle:
    desc = read_descriptor(blob)
    params, end = EncoderParams.from_bytes(blob)
    head_end = end + 8 * (params.d + 1)
    head = RegressionHead.from_packed(np.frombuffer(blob, dtype="<f8", count=params.d + 1, offset=end))
    desc_len = struct.unpack("<I", blob[-12:-8])[0]
    if head_end + desc_len + 12 != len(blob):
        raise DataFormatError("checkpoint sections have inconsistent lengths")
    return ModelBundle(TokenizerConfig(**desc["tokenizer"]), EncoderConfig(**desc["encoder"]), params, head,
                       desc["model_id"], bool(desc["with_src"]), desc.get("meta", {}))


def load_checkpoint(path) -> ModelBundle:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# prediction and objective


def item_label(item) -> float:
    if hasattr(item, "pseudo_score"):
        return float(item.pseudo_score)
    score = getattr(item, "human_score", None)
    if score is None:
        raise DataFormatError(f"item {getattr(item, 'id', '?')!r} has no label")
    return float(score)


def format_items(bundle: ModelBundle, items) -> list[list[int]]:
    return [format_item(it, bundle.tokenizer, bundle.encoder_cfg, bundle.with_src) for it in items]


def predict_many(bundle: ModelBundle, items) -> np.ndarray:
    X = encode_batch(format_items(bundle, items), bundle.params)
    return X @ bundle.head.W + bundle.head.b


def predict(bundle: ModelBundle, item) -> float:
    return float(predict_many(bundle, [item])[0])


def mse_loss(s: float, score: float) -> float:
    return (s - score) ** 2


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.max_lr * step / cfg.warmup_steps
    return cfg.max_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    bundle: ModelBundle
    losses: np.ndarray
    best_bundle: ModelBundle | None = None
    best_dev: float | None = None
    dev_history: list[tuple[int, float]] = field(default_factory=list)

    @property
    def steps_run(self) -> int:
        return len(self.losses)


class _Batches:
    """Seeded epoch shuffling; the last short batch of an epoch is kept."""

    def __init__(self, n, batch_size, rng):
        self.n, self.bs, self.rng = n, batch_size, rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos >= self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        rows = self.perm[self.pos:self.pos + self.bs]
        self.pos += self.bs
        return np.ascontiguousarray(rows, dtype=np.int64)


def _dev_scorer(dev, select_metric: str, threshold):
    from .evaluation import darr_pairs, darr_tau, pearson

    labels = np.array([item_label(it) for it in dev])
    if select_metric == "pearson":
        return lambda preds: pearson(preds, labels)
    if select_metric == "darr":
        pairs = darr_pairs(list(dev), pair_threshold=threshold)
        ids = [it.id for it in dev]
        return lambda preds: darr_tau(pairs, dict(zip(ids, preds.tolist())))
    raise ConfigError(f"unknown selection metric {select_metric!r}")


def train(bundle: ModelBundle, data: Sequence, cfg: TrainConfig, dev: Sequence | None = None, *,
          select_metric: str = "pearson", darr_threshold: float = 25.0, eval_every: int | None = None,
          stop_at_dev: float | None = None) -> TrainResult:
    """Mini-batch training of encoder and head; ``bundle`` is not modified.

    With ``dev`` the model is scored at step 0, every ``eval_every`` steps and
    at the end; the best-scoring copy is returned as ``best_bundle``. Training
    stops early once the dev score reaches ``stop_at_dev``.
    """
    if not len(data):
        raise DataFormatError("no training data")
    model = bundle.copy()
    labels = np.array([item_label(it) for it in data], dtype=np.float64)
    if not np.all(np.isfinite(labels)):
        raise DataFormatError("non-finite training label")
    flat, offsets = pack_sequences(format_items(model, data))
    p = model.params
    V, d, P = p.V, p.d, p.P
    theta = p.theta
    head = model.head.packed()
    grad = np.zeros_like(theta)
    ghead = np.zeros_like(head)
    m, v = np.zeros_like(theta), np.zeros_like(theta)
    mh, vh = np.zeros_like(head), np.zeros_like(head)
    rate = model.encoder_cfg.dropout
    rng = np.random.default_rng([cfg.seed, 0])
    batches = _Batches(len(data), cfg.batch_size, rng)

    score_dev = None
    history: list[tuple[int, float]] = []
    best, best_score = None, -math.inf
    if dev is not None and len(dev):
        score_dev = _dev_scorer(dev, select_metric, darr_threshold)
        eval_every = eval_every or max(1, cfg.total_steps // 20)

    def sync():
        model.head = RegressionHead.from_packed(head)

    def evaluate(step):
        nonlocal best, best_score
        sync()
        score = float(score_dev(predict_many(model, dev)))
        history.append((step, score))
        if score > best_score:
            best, best_score = model.copy(), score
        return score

    losses = []
    if score_dev is not None:
        if evaluate(0) >= (math.inf if stop_at_dev is None else stop_at_dev):
            return TrainResult(model, np.array(losses), best, best_score, history)

    for step in range(1, cfg.total_steps + 1):
        rows = batches.next()
        m1, m2 = dropout_masks(d, rate, [cfg.seed, 1, step], n=len(rows))
        grad[:] = 0.0
        ghead[:] = 0.0
        preds = _kernels.mse_batch_grad(flat, offsets, rows, labels, theta, head, grad, ghead, V, d, P, m1, m2)
        with np.errstate(over="ignore", invalid="ignore"):
            loss = float(np.mean((preds - labels[rows]) ** 2))
        if not math.isfinite(loss):
            raise NonFiniteLossError(step, loss)
        losses.append(loss)
        lr = lr_at(step, cfg)
        if cfg.optimizer == "adam":
            _kernels.adam_step(theta, grad, m, v, lr, cfg.beta1, cfg.beta2, cfg.eps, step)
            _kernels.adam_step(head, ghead, mh, vh, lr, cfg.beta1, cfg.beta2, cfg.eps, step)
        else:
            theta -= lr * grad
            head -= lr * ghead
        if score_dev is not None and (step % eval_every == 0 or step == cfg.total_steps):
            score = evaluate(step)
            if stop_at_dev is not None and score >= stop_at_dev:
                break
    sync()
    return TrainResult(model, np.array(losses), best, best_score if best is not None else None, history)


# ---------------------------------------------------------------------------
# gradient verification


def loss_and_grad(bundle: ModelBundle, item, label: float, *, train_mode: bool = True, seed: int = 0):
    """Per-item loss with analytic gradients w.r.t. (encoder theta, head)."""
    ids = np.asarray(format_items(bundle, [item])[0], dtype=np.int64)
    p = bundle.params
    m1, m2 = dropout_masks(p.d, bundle.encoder_cfg.dropout if train_mode else 0.0, seed, n=1)
    head = bundle.head.packed()
    grad, ghead = p.zeros_like(), np.zeros_like(head)
    offsets = np.array([0, ids.size], dtype=np.int64)
    s = _kernels.mse_batch_grad(ids, offsets, np.zeros(1, dtype=np.int64), np.array([label]),
                                p.theta, head, grad, ghead, p.V, p.d, p.P, m1, m2)[0]
    return mse_loss(s, label), grad, ghead, (ids, offsets, m1, m2)


def gradient_errors(bundle: ModelBundle, item, label: float, *, h: float = 1e-5, floor: float = 1e-6,
                    train_mode: bool = True, seed: int = 0):
    """Analytic vs central-difference gradients over every parameter.

    Returns ``(analytic, numeric, relative_error)`` as flat arrays covering the
    encoder parameters followed by the head. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    _, grad, ghead, (ids, offsets, m1, m2) = loss_and_grad(bundle, item, label, train_mode=train_mode, seed=seed)
    p = bundle.params
    theta = p.theta.copy()
    head = bundle.head.packed()

    def score():
        X = _kernels.encode_many(ids, offsets, theta, p.V, p.d, p.P, m1, m2)[0]
        return float(X @ head[:-1]) + head[-1]

    numeric = np.empty(theta.size + head.size)
    for k, vec in enumerate((theta, head)):
        base = 0 if k == 0 else theta.size
        for i in range(vec.size):
            orig = vec[i]
            vec[i] = orig + h
            up = score()
            vec[i] = orig - h
            down = score()
            vec[i] = orig
            # (up - label)^2 - (down - label)^2, factored to avoid cancelling two squares
            numeric[base + i] = (up - down) * (up + down - 2 * label) / (2 * h)
    analytic = np.concatenate([grad, ghead])
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return analytic, numeric, np.abs(analytic - numeric) / denom


def verify_gradients(bundle: ModelBundle, item, label: float, **kwargs) -> float:
    """Maximum relative error between analytic and finite-difference gradients."""
    return float(gradient_errors(bundle, item, label, **kwargs)[2].max())
