"""Hash-vocabulary tokenizer, input assembly and the small attention encoder.

Formatted inputs follow the RoBERTa pair convention::

    <s> hyp </s> </s> ref </s>                    (reference-only)
    <s> src </s> </s> hyp </s> </s> ref </s>      (source-included)

The encoder returns the position-0 output, which serves as the
representation of the whole tuple.

Binary parameter file layout (all little-endian)::

    b"MFRG1" | uint32 V | uint32 d | uint32 max_tokens | float64 x n_params

with parameters flattened in ``PARAM_ORDER``, each array row-major.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError, DataFormatError

BOS_ID = 0
SEP_ID = 1
MAGIC = b"MFRG1"
_HEADER = struct.Struct("<5sIII")

PARAM_ORDER = tuple(name for name, _ in _kernels.param_shapes(3, 2, 1))


@dataclass(frozen=True)
class TokenizerConfig:
    vocab_size: int = 4096
    case_sensitive: bool = True

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must be >= 3")


@dataclass(frozen=True)
class EncoderConfig:
    hidden_size: int = 32
    max_tokens_nosrc: int = 128
    max_tokens_src: int = 192
    num_layers: int = 1
    num_heads: int = 1
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.hidden_size < 2 or self.hidden_size % 2:
            raise ConfigError("hidden_size must be a positive even integer")
        if self.max_tokens_nosrc < 6:
            raise ConfigError("max_tokens_nosrc must leave room for BOS, 3 separators and 2 segments")
        if self.max_tokens_src < self.max_tokens_nosrc:
            raise ConfigError("max_tokens_src must be >= max_tokens_nosrc")
        if self.max_tokens_src < 9:
            raise ConfigError("max_tokens_src must leave room for BOS, 5 separators and 3 segments")
        if self.num_layers != 1 or self.num_heads != 1:
            raise ConfigError("only num_layers=1, num_heads=1 are implemented")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @property
    def max_positions(self) -> int:
        return self.max_tokens_src

    def limit(self, with_src: bool) -> int:
        return self.max_tokens_src if with_src else self.max_tokens_nosrc


class EncoderParams:
    """Flat parameter vector plus named views onto it."""

    def __init__(self, theta: np.ndarray, vocab_size: int, hidden_size: int, max_positions: int):
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        expected = _kernels.n_params(vocab_size, hidden_size, max_positions)
        if theta.shape != (expected,):
            raise DataFormatError(f"expected {expected} encoder parameters, got {theta.shape}")
        self.theta = theta
        self.V = vocab_size
        self.d = hidden_size
        self.P = max_positions

    def views(self, theta: np.ndarray | None = None) -> dict[str, np.ndarray]:
        theta = self.theta if theta is None else theta
        out, o = {}, 0
        for name, shape in _kernels.param_shapes(self.V, self.d, self.P):
            size = int(np.prod(shape))
            out[name] = theta[o:o + size].reshape(shape)
            o += size
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.theta.copy(), self.V, self.d, self.P)

    def zeros_like(self) -> np.ndarray:
        return np.zeros_like(self.theta)

    def __eq__(self, other):
        return (isinstance(other, EncoderParams) and (self.V, self.d, self.P) == (other.V, other.d, other.P)
                and np.array_equal(self.theta, other.theta))

    def to_bytes(self) -> bytes:
        return _HEADER.pack(MAGIC, self.V, self.d, self.P) + self.theta.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["EncoderParams", int]:
        """Parse a parameter block; returns the params and bytes consumed."""
        if len(blob) < _HEADER.size:
            raise DataFormatError("truncated encoder header")
        magic, V, d, P = _HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise DataFormatError(f"bad magic {magic!r}; not an encoder parameter file")
        n = _kernels.n_params(V, d, P)
        end = _HEADER.size + 8 * n
        if len(blob) < end:
            raise DataFormatError("truncated encoder parameters")
        theta = np.frombuffer(blob, dtype="<f8", count=n, offset=_HEADER.size).astype(np.float64)
        return cls(theta, V, d, P), end


def read_header(blob: bytes) -> tuple[int, int, int]:
    magic, V, d, P = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r}")
    return V, d, P


def init_params(tok_cfg: TokenizerConfig, enc_cfg: EncoderConfig, seed: int | None = None) -> EncoderParams:
    """Uniform(-0.1, 0.1) weights; layer-norm gains 1 and biases 0."""
    seed = enc_cfg.seed if seed is None else seed
    V, d, P = tok_cfg.vocab_size, enc_cfg.hidden_size, enc_cfg.max_positions
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-0.1, 0.1, size=_kernels.n_params(V, d, P))
    params = EncoderParams(theta, V, d, P)
    v = params.views()
    for name in ("ln1_g", "ln2_g"):
        v[name][:] = 1.0
    for name in ("ln1_b", "ln2_b"):
        v[name][:] = 0.0
    return params


# ---------------------------------------------------------------------------
# tokenization and formatting


@lru_cache(maxsize=1 << 18)
def _hash_token(token: str, vocab_size: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return 2 + int.from_bytes(digest, "little") % (vocab_size - 2)


def tokenize(text: str, cfg: TokenizerConfig = TokenizerConfig()) -> list[int]:
    if not cfg.case_sensitive:
        text = text.lower()
    return [_hash_token(tok, cfg.vocab_size) for tok in text.split()]


def _truncate(parts: list[list[int]], budget: int) -> list[list[int]]:
    lengths = [len(p) for p in parts]
    excess = sum(lengths) - budget
    while excess > 0:
        # longest first; earliest segment wins ties
        k = max(range(len(lengths)), key=lambda i: (lengths[i], -i))
        lengths[k] -= 1
        excess -= 1
    return [p[:n] for p, n in zip(parts, lengths)]


def format_input(src: Sequence[int] | None, hyp: Sequence[int], ref: Sequence[int],
                 cfg: EncoderConfig = EncoderConfig()) -> list[int]:
    if not hyp:
        raise DataFormatError("empty hyp")
    if not ref:
        raise DataFormatError("empty ref")
    if src is not None and len(src) == 0:
        src = None
    parts = [list(hyp), list(ref)] if src is None else [list(src), list(hyp), list(ref)]
    n_special = 4 if src is None else 6  # BOS plus separators
    limit = cfg.limit(src is not None)
    parts = _truncate(parts, limit - n_special)
    out = [BOS_ID]
    for i, part in enumerate(parts):
        if i:
            out.append(SEP_ID)
        out.extend(part)
        out.append(SEP_ID)
    return out


def format_item(item, tok_cfg: TokenizerConfig, enc_cfg: EncoderConfig, with_src: bool) -> list[int]:
    """Tokenize and format anything with ``hyp``, ``ref`` and optional ``src``."""
    src = None
    if with_src:
        if not getattr(item, "src", None):
            raise DataFormatError(f"item {getattr(item, 'id', '?')!r}: model uses src but item has none")
        src = tokenize(item.src, tok_cfg)
    return format_input(src, tokenize(item.hyp, tok_cfg), tokenize(item.ref, tok_cfg), enc_cfg)


# ---------------------------------------------------------------------------
# forward / backward


def dropout_masks(d: int, rate: float, seed, n: int | None = None):
    """Inverted-dropout masks after the attention and feed-forward sublayers."""
    shape = (d,) if n is None else (n, d)
    if rate == 0.0:
        return np.ones(shape), np.ones(shape)
    rng = np.random.default_rng(seed)
    keep = 1.0 - rate
    m1 = (rng.random(shape) < keep) / keep
    m2 = (rng.random(shape) < keep) / keep
    return m1, m2


def _check_ids(ids, params: EncoderParams, limit: int | None):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 1:
        raise DataFormatError("encode needs at least one token id")
    limit = params.P if limit is None else min(limit, params.P)
    if ids.size > limit:
        raise DataFormatError(f"input of {ids.size} tokens exceeds the {limit}-token limit; format_input truncates")
    if ids.min() < 0 or ids.max() >= params.V:
        raise DataFormatError("token id outside the vocabulary")
    return ids


def encode(ids, params: EncoderParams, train_mode: bool = False, seed: int = 0,
           dropout: float = 0.1, max_tokens: int | None = None) -> np.ndarray:
    ids = _check_ids(ids, params, max_tokens)
    m1, m2 = dropout_masks(params.d, dropout if train_mode else 0.0, seed)
    return _kernels.encode_many(ids, np.array([0, ids.size], dtype=np.int64), params.theta,
                                params.V, params.d, params.P, m1[None, :], m2[None, :])[0]


def encode_backward(ids, params: EncoderParams, dX, train_mode: bool = True, seed: int = 0,
                    dropout: float = 0.1, max_tokens: int | None = None) -> np.ndarray:
    """Gradient of ``X . dX`` w.r.t. the flat parameter vector.

    Masks are regenerated from ``seed`` and so match ``encode`` with the same
    arguments. Use ``params.views(grad)`` for named access.
    """
    ids = _check_ids(ids, params, max_tokens)
    dX = np.asarray(dX, dtype=np.float64)
    if dX.shape != (params.d,):
        raise DataFormatError(f"upstream gradient has shape {dX.shape}, expected ({params.d},)")
    m1, m2 = dropout_masks(params.d, dropout if train_mode else 0.0, seed)
    grad = params.zeros_like()
    _kernels.encode_vjp(ids, params.theta, grad, params.V, params.d, params.P, m1, m2, dX)
    return grad


def pack_sequences(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.zeros(len(seqs) + 1, dtype=np.int64)
    np.cumsum([len(s) for s in seqs], out=offsets[1:])
    flat = np.fromiter((t for s in seqs for t in s), dtype=np.int64, count=int(offsets[-1]))
    return flat, offsets


def encode_batch(seqs: Sequence[Sequence[int]], params: EncoderParams) -> np.ndarray:
    """Inference-mode representations, one row per sequence."""
    if not len(seqs):
        return np.zeros((0, params.d))
    flat, offsets = pack_sequences(seqs)
    ones = np.ones((len(seqs), params.d))
    return _kernels.encode_many(flat, offsets, params.theta, params.V, params.d, params.P, ones, ones)
