"""Encoder forward/backward and Adam kernels.

Every kernel is written in the subset of NumPy that numba's nopython mode
accepts, so the same source serves both paths. Set
``METRICFORGE_DISABLE_NUMBA=1`` before import to run the pure-NumPy path
(used by the benchmark and for debugging); numba not importable has the same
effect.

Parameters are a flat float64 vector; see ``param_shapes`` for the order.
The encoder is one post-norm transformer layer with a single head. Only the
position-0 output is ever consumed, so only the position-0 attention query,
residual, layer norms and feed-forward row are computed; this is exact, not
an approximation, because every later stage of the layer is position-wise.
"""

import math
import os

import numpy as np

LN_EPS = 1e-5
_GELU_K = math.sqrt(2.0 / math.pi)

_DISABLED = os.environ.get("METRICFORGE_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    from numba import njit as _njit

    USING_NUMBA = True

    def jit(fn):
        return _njit(cache=True, nogil=True)(fn)
except ImportError:
    USING_NUMBA = False

    def jit(fn):
        return fn


def param_shapes(V, d, P):
    h = 4 * d
    return (
        ("tok_emb", (V, d)),
        ("pos_emb", (P, d)),
        ("attn_q_w", (d, d)), ("attn_q_b", (d,)),
        ("attn_k_w", (d, d)), ("attn_k_b", (d,)),
        ("attn_v_w", (d, d)), ("attn_v_b", (d,)),
        ("attn_o_w", (d, d)), ("attn_o_b", (d,)),
        ("ln1_g", (d,)), ("ln1_b", (d,)),
        ("ffn_in_w", (d, h)), ("ffn_in_b", (h,)),
        ("ffn_out_w", (h, d)), ("ffn_out_b", (d,)),
        ("ln2_g", (d,)), ("ln2_b", (d,)),
    )


def n_params(V, d, P):
    return V * d + P * d + 4 * (d * d + d) + 2 * d + 2 * (4 * d * d) + 4 * d + d + 2 * d


@jit
def _views(theta, V, d, P):
    h = 4 * d
    o = 0
    tok = theta[o:o + V * d].reshape((V, d)); o += V * d
    pos = theta[o:o + P * d].reshape((P, d)); o += P * d
    wq = theta[o:o + d * d].reshape((d, d)); o += d * d
    bq = theta[o:o + d]; o += d
    wk = theta[o:o + d * d].reshape((d, d)); o += d * d
    bk = theta[o:o + d]; o += d
    wv = theta[o:o + d * d].reshape((d, d)); o += d * d
    bv = theta[o:o + d]; o += d
    wo = theta[o:o + d * d].reshape((d, d)); o += d * d
    bo = theta[o:o + d]; o += d
    g1 = theta[o:o + d]; o += d
    c1 = theta[o:o + d]; o += d
    w1 = theta[o:o + d * h].reshape((d, h)); o += d * h
    b1 = theta[o:o + h]; o += h
    w2 = theta[o:o + h * d].reshape((h, d)); o += h * d
    b2 = theta[o:o + d]; o += d
    g2 = theta[o:o + d]; o += d
    c2 = theta[o:o + d]; o += d
    return tok, pos, wq, bq, wk, bk, wv, bv, wo, bo, g1, c1, w1, b1, w2, b2, g2, c2


@jit
def _embed(ids, tok, pos):
    L = ids.shape[0]
    d = tok.shape[1]
    E = np.empty((L, d))
    for i in range(L):
        E[i] = tok[ids[i]] + pos[i]
    return E


@jit
def _layer_norm(r, g, c):
    mu = r.mean()
    x = r - mu
    var = np.dot(x, x) / r.shape[0]
    rstd = 1.0 / math.sqrt(var + LN_EPS)
    n = x * rstd
    return n * g + c, n, rstd


@jit
def _layer_norm_back(dy, g, n, rstd):
    dn = dy * g
    m = dn.shape[0]
    return rstd * (dn - dn.sum() / m - n * (np.dot(dn, n) / m))


@jit
def _gelu(u):
    t = np.tanh(_GELU_K * (u + 0.044715 * u * u * u))
    return 0.5 * u * (1.0 + t), t


@jit
def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * 0.044715 * u * u)


@jit
def _forward(ids, theta, V, d, P, m1, m2):
    tok, pos, wq, bq, wk, bk, wv, bv, wo, bo, g1, c1, w1, b1, w2, b2, g2, c2 = _views(theta, V, d, P)
    inv = 1.0 / math.sqrt(d)
    E = _embed(ids, tok, pos)
    e0 = E[0].copy()
    q = np.dot(e0, wq) + bq
    K = np.dot(E, wk) + bk
    Vv = np.dot(E, wv) + bv
    sc = np.dot(K, q) * inv
    sc = sc - sc.max()
    a = np.exp(sc)
    a = a / a.sum()
    ctx = np.dot(a, Vv)
    o = np.dot(ctx, wo) + bo
    r1 = e0 + o * m1
    h1, n1, rstd1 = _layer_norm(r1, g1, c1)
    u = np.dot(h1, w1) + b1
    gl, t = _gelu(u)
    f = np.dot(gl, w2) + b2
    r2 = h1 + f * m2
    X, n2, rstd2 = _layer_norm(r2, g2, c2)
    cache = (E, e0, q, K, Vv, a, ctx, h1, n1, rstd1, u, gl, t, n2, rstd2)
    return X, cache


@jit
def _backward(ids, theta, grad, V, d, P, m1, m2, cache, dX):
    tok, pos, wq, bq, wk, bk, wv, bv, wo, bo, g1, c1, w1, b1, w2, b2, g2, c2 = _views(theta, V, d, P)
    (gtok, gpos, gwq, gbq, gwk, gbk, gwv, gbv, gwo, gbo,
     gg1, gc1, gw1, gb1, gw2, gb2, gg2, gc2) = _views(grad, V, d, P)
    E, e0, q, K, Vv, a, ctx, h1, n1, rstd1, u, gl, t, n2, rstd2 = cache
    inv = 1.0 / math.sqrt(d)
    L = ids.shape[0]

    gg2 += dX * n2
    gc2 += dX
    dr2 = _layer_norm_back(dX, g2, n2, rstd2)
    df = dr2 * m2
    gb2 += df
    gw2 += np.outer(gl, df)
    du = np.dot(w2, df) * _gelu_grad(u, t)
    gb1 += du
    gw1 += np.outer(h1, du)
    dh1 = dr2 + np.dot(w1, du)

    gg1 += dh1 * n1
    gc1 += dh1
    dr1 = _layer_norm_back(dh1, g1, n1, rstd1)
    do = dr1 * m1
    gbo += do
    gwo += np.outer(ctx, do)
    dctx = np.dot(wo, do)

    dVv = np.outer(a, dctx)
    da = np.dot(Vv, dctx)
    dsc = a * (da - np.dot(a, da))
    dq = np.dot(dsc, K) * inv
    dK = np.outer(dsc, q) * inv

    Et = E.T.copy()
    gwk += np.dot(Et, dK)
    gbk += dK.sum(axis=0)
    gwv += np.dot(Et, dVv)
    gbv += dVv.sum(axis=0)
    gwq += np.outer(e0, dq)
    gbq += dq

    dE = np.dot(dK, wk.T.copy()) + np.dot(dVv, wv.T.copy())
    dE[0] += dr1 + np.dot(wq, dq)
    for i in range(L):
        gtok[ids[i]] += dE[i]
        gpos[i] += dE[i]


@jit
def encode_many(ids_concat, offsets, theta, V, d, P, m1, m2):
    """Position-0 representations for a batch; row i uses masks m1[i], m2[i]."""
    n = offsets.shape[0] - 1
    out = np.empty((n, d))
    for i in range(n):
        ids = ids_concat[offsets[i]:offsets[i + 1]]
        X, _ = _forward(ids, theta, V, d, P, m1[i], m2[i])
        out[i] = X
    return out


@jit
def encode_vjp(ids, theta, grad, V, d, P, m1, m2, dX):
    """Forward pass, then accumulate d(X . dX)/d(theta) into ``grad``."""
    X, cache = _forward(ids, theta, V, d, P, m1, m2)
    _backward(ids, theta, grad, V, d, P, m1, m2, cache, dX)
    return X


@jit
def mse_batch_grad(ids_concat, offsets, rows, labels, theta, head, grad, ghead, V, d, P, m1, m2):
    """Mean squared error of the head over ``rows``; gradients accumulate in place.

    ``head`` holds W (first d entries) then b.
    """
    B = rows.shape[0]
    preds = np.empty(B)
    w = head[:d]
    b = head[d]
    for j in range(B):
        i = rows[j]
        ids = ids_concat[offsets[i]:offsets[i + 1]]
        X, cache = _forward(ids, theta, V, d, P, m1[j], m2[j])
        s = np.dot(w, X) + b
        preds[j] = s
        ds = 2.0 * (s - labels[i]) / B
        ghead[:d] += ds * X
        ghead[d] += ds
        _backward(ids, theta, grad, V, d, P, m1[j], m2[j], cache, ds * w)
    return preds


def _adam_vectorized(theta, grad, m, v, lr, beta1, beta2, eps, t):
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    theta -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _adam_fused(theta, grad, m, v, lr, beta1, beta2, eps, t):
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i in range(theta.shape[0]):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        theta[i] -= lr * (m[i] / c1) / (math.sqrt(v[i] / c2) + eps)


# elementwise loops only pay off compiled; NumPy path keeps whole-array ops
adam_step = jit(_adam_fused) if USING_NUMBA else _adam_vectorized
