"""Dense-array building blocks with hand-derived backward passes.

Everything here is a pure function pair: ``*_fwd`` returns (output, cache)
and the matching ``*_bwd`` consumes the upstream gradient plus that cache.
Parameters live in a flat dict of float64 arrays keyed by dotted names;
gradients accumulate into a dict of the same shape via :func:`add_grad`.

Masking convention: boolean masks mark REAL positions with True. Attention
scores at masked key positions are driven to -1e30 before the softmax, so
their weights underflow to exactly zero and no gradient crosses the mask.
Every sequence is required to contain at least one real position.
"""

from __future__ import annotations

import numpy as np

Params = dict[str, np.ndarray]

_NEG = -1e30


class ShapeMismatch(Exception):
    """Programming error: an array arrived with an impossible shape."""


def add_grad(grads: Params, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_linear(params: Params, rng: np.random.Generator, name: str, din: int, dout: int) -> None:
    params[f"{name}.W"] = glorot(rng, din, dout)
    params[f"{name}.b"] = np.zeros(dout)


def init_layernorm(params: Params, name: str, dim: int) -> None:
    params[f"{name}.g"] = np.ones(dim)
    params[f"{name}.b"] = np.zeros(dim)


def init_encoder_layer(
    params: Params,
    rng: np.random.Generator,
    prefix: str,
    dim: int,
    n_heads: int,
    ffn_dim: int,
    residual_scale: float = 1.0,
) -> None:
    if dim % n_heads != 0:
        raise ShapeMismatch(f"width {dim} not divisible by {n_heads} heads ({prefix})")
    # Query/key projections start small so attention logits begin near zero;
    # saturated softmaxes at init both stall training and wreck the curvature
    # seen by finite-difference checks. Residual-branch output projections
    # are scaled down with depth so a fresh stack starts close to identity.
    for proj, scale in (("Wq", 0.25), ("Wk", 0.25), ("Wv", 1.0), ("Wo", residual_scale)):
        params[f"{prefix}.attn.{proj}"] = scale * glorot(rng, dim, dim)
    for bias in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}.attn.{bias}"] = np.zeros(dim)
    init_layernorm(params, f"{prefix}.ln1", dim)
    params[f"{prefix}.ffn.W1"] = glorot(rng, dim, ffn_dim)
    params[f"{prefix}.ffn.b1"] = np.zeros(ffn_dim)
    params[f"{prefix}.ffn.W2"] = residual_scale * glorot(rng, ffn_dim, dim)
    params[f"{prefix}.ffn.b2"] = np.zeros(dim)
    init_layernorm(params, f"{prefix}.ln2", dim)


def init_encoder_stack(
    params: Params,
    rng: np.random.Generator,
    prefix: str,
    n_layers: int,
    dim: int,
    n_heads: int,
    ffn_dim: int,
) -> None:
    residual_scale = 1.0 / np.sqrt(2.0 * n_layers)
    for layer in range(n_layers):
        init_encoder_layer(
            params, rng, f"{prefix}.{layer}", dim, n_heads, ffn_dim, residual_scale
        )
    init_layernorm(params, f"{prefix}.ln_f", dim)


# ---------------------------------------------------------------------------
# elementary ops
# ---------------------------------------------------------------------------


def linear_fwd(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    return x @ W + b, (x, W)


def linear_bwd(dy: np.ndarray, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dx = dy @ W.T
    dW = x2.T @ dy2
    db = dy2.sum(axis=0)
    return dx, dW, db


def relu_fwd(x: np.ndarray):
    mask = x > 0.0
    return x * mask, mask


def relu_bwd(dy: np.ndarray, mask: np.ndarray):
    return dy * mask


def layernorm_fwd(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * invstd
    return g * xhat + b, (xhat, invstd, g)


def layernorm_bwd(dy: np.ndarray, cache):
    xhat, invstd, g = cache
    n = xhat.shape[-1]
    dxhat = dy * g
    dg = (dy * xhat).reshape(-1, n).sum(axis=0)
    db = dy.reshape(-1, n).sum(axis=0)
    dx = (
        invstd
        / n
        * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
    )
    return dx, dg, db


def dropout_fwd(x: np.ndarray, rate: float, rng: np.random.Generator | None):
    """Inverted dropout; identity when rate is 0 or no rng is supplied."""
    if rate <= 0.0 or rng is None:
        return x, None
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    return x * keep * scale, keep * scale


def dropout_bwd(dy: np.ndarray, mask):
    return dy if mask is None else dy * mask


def sinusoidal_pe(length: int, dim: int) -> np.ndarray:
    """Fixed sine/cosine position table, (length, dim)."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    pe = np.empty((length, dim))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


# ---------------------------------------------------------------------------
# multi-head self-attention
# ---------------------------------------------------------------------------


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    n, length, dim = x.shape
    return x.reshape(n, length, n_heads, dim // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    n, h, length, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, length, h * dh)


def mha_fwd(
    x: np.ndarray,
    params: Params,
    prefix: str,
    n_heads: int,
    key_mask: np.ndarray,
):
    """Multi-head self-attention over (N, L, D) with a (N, L) key mask.

    No positional information enters anywhere, so the map is permutation
    equivariant along L.
    """
    n, length, dim = x.shape
    if dim % n_heads:
        raise ShapeMismatch(f"width {dim} not divisible by {n_heads} heads")
    q, q_c = linear_fwd(x, params[f"{prefix}.Wq"], params[f"{prefix}.bq"])
    k, k_c = linear_fwd(x, params[f"{prefix}.Wk"], params[f"{prefix}.bk"])
    v, v_c = linear_fwd(x, params[f"{prefix}.Wv"], params[f"{prefix}.bv"])
    qh, kh, vh = _split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads)
    scale = 1.0 / np.sqrt(dim // n_heads)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    scores = np.where(key_mask[:, None, None, :], scores, _NEG)
    scores -= scores.max(axis=-1, keepdims=True)
    expd = np.exp(scores)
    attn = expd / expd.sum(axis=-1, keepdims=True)
    ctx = attn @ vh
    merged = _merge_heads(ctx)
    out, o_c = linear_fwd(merged, params[f"{prefix}.Wo"], params[f"{prefix}.bo"])
    cache = (q_c, k_c, v_c, o_c, qh, kh, vh, attn, scale, n_heads)
    return out, cache


def mha_bwd(dy: np.ndarray, cache, params: Params, prefix: str, grads: Params):
    q_c, k_c, v_c, o_c, qh, kh, vh, attn, scale, n_heads = cache
    dmerged, dWo, dbo = linear_bwd(dy, o_c)
    add_grad(grads, f"{prefix}.Wo", dWo)
    add_grad(grads, f"{prefix}.bo", dbo)

    dctx = _split_heads(dmerged, n_heads)
    dattn = dctx @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ dctx
    # softmax backward; masked positions carry attn == 0 hence no gradient
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores *= scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh

    dx = np.zeros_like(q_c[0])
    for dproj, proj_cache, wname, bname in (
        (_merge_heads(dqh), q_c, "Wq", "bq"),
        (_merge_heads(dkh), k_c, "Wk", "bk"),
        (_merge_heads(dvh), v_c, "Wv", "bv"),
    ):
        dxi, dW, db = linear_bwd(dproj, proj_cache)
        dx += dxi
        add_grad(grads, f"{prefix}.{wname}", dW)
        add_grad(grads, f"{prefix}.{bname}", db)
    return dx


# ---------------------------------------------------------------------------
# transformer encoder layer (pre-layer-norm, final norm on the stack)
# ---------------------------------------------------------------------------
# Normalization precedes each sublayer, so attention and feed-forward always
# see unit-scale inputs even when the raw features mix very different
# magnitudes; the residual stream carries the raw input through. A stack
# applies a final layer norm so consumers get bounded outputs.


def encoder_layer_fwd(
    x: np.ndarray,
    params: Params,
    prefix: str,
    n_heads: int,
    key_mask: np.ndarray,
    eps: float,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
):
    n1, ln1_cache = layernorm_fwd(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"], eps)
    attn_out, attn_cache = mha_fwd(n1, params, f"{prefix}.attn", n_heads, key_mask)
    attn_out, drop1 = dropout_fwd(attn_out, dropout_rate, rng)
    a = x + attn_out
    n2, ln2_cache = layernorm_fwd(a, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"], eps)
    h, h_c = linear_fwd(n2, params[f"{prefix}.ffn.W1"], params[f"{prefix}.ffn.b1"])
    h_act, relu_mask = relu_fwd(h)
    f, f_c = linear_fwd(h_act, params[f"{prefix}.ffn.W2"], params[f"{prefix}.ffn.b2"])
    f, drop2 = dropout_fwd(f, dropout_rate, rng)
    out = a + f
    cache = (ln1_cache, attn_cache, drop1, ln2_cache, h_c, relu_mask, f_c, drop2)
    return out, cache


def encoder_layer_bwd(dy: np.ndarray, cache, params: Params, prefix: str, grads: Params):
    ln1_cache, attn_cache, drop1, ln2_cache, h_c, relu_mask, f_c, drop2 = cache
    da = dy.copy()
    df = dropout_bwd(dy, drop2)
    dh_act, dW2, db_ffn2 = linear_bwd(df, f_c)
    add_grad(grads, f"{prefix}.ffn.W2", dW2)
    add_grad(grads, f"{prefix}.ffn.b2", db_ffn2)
    dh = relu_bwd(dh_act, relu_mask)
    dn2, dW1, db_ffn1 = linear_bwd(dh, h_c)
    add_grad(grads, f"{prefix}.ffn.W1", dW1)
    add_grad(grads, f"{prefix}.ffn.b1", db_ffn1)
    da2, dg2, db2 = layernorm_bwd(dn2, ln2_cache)
    add_grad(grads, f"{prefix}.ln2.g", dg2)
    add_grad(grads, f"{prefix}.ln2.b", db2)
    da += da2
    dx = da.copy()
    dattn = dropout_bwd(da, drop1)
    dn1 = mha_bwd(dattn, attn_cache, params, f"{prefix}.attn", grads)
    dx1, dg1, db1 = layernorm_bwd(dn1, ln1_cache)
    add_grad(grads, f"{prefix}.ln1.g", dg1)
    add_grad(grads, f"{prefix}.ln1.b", db1)
    return dx + dx1


def encoder_stack_fwd(
    x: np.ndarray,
    params: Params,
    prefix: str,
    n_layers: int,
    n_heads: int,
    key_mask: np.ndarray,
    eps: float,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
):
    caches = []
    for layer in range(n_layers):
        x, cache = encoder_layer_fwd(
            x, params, f"{prefix}.{layer}", n_heads, key_mask, eps, dropout_rate, rng
        )
        caches.append(cache)
    out, lnf_cache = layernorm_fwd(x, params[f"{prefix}.ln_f.g"], params[f"{prefix}.ln_f.b"], eps)
    caches.append(lnf_cache)
    return out, caches


def encoder_stack_bwd(dy: np.ndarray, caches, params: Params, prefix: str, grads: Params):
    dy, dgf, dbf = layernorm_bwd(dy, caches[-1])
    add_grad(grads, f"{prefix}.ln_f.g", dgf)
    add_grad(grads, f"{prefix}.ln_f.b", dbf)
    for layer in reversed(range(len(caches) - 1)):
        dy = encoder_layer_bwd(dy, caches[layer], params, f"{prefix}.{layer}", grads)
    return dy


# ---------------------------------------------------------------------------
# masked reductions and embedding lookups
# ---------------------------------------------------------------------------


def masked_sum_fwd(x: np.ndarray, mask: np.ndarray):
    """Sum over axis 1 counting only masked-in rows; cache is the mask."""
    return (x * mask[..., None]).sum(axis=1), mask


def masked_sum_bwd(dy: np.ndarray, mask: np.ndarray):
    return dy[:, None, :] * mask[..., None]


def embedding_fwd(table: np.ndarray, ids: np.ndarray):
    return table[ids], (ids, table.shape)


def embedding_bwd(dy: np.ndarray, cache):
    ids, shape = cache
    dtable = np.zeros(shape)
    np.add.at(dtable, ids.reshape(-1), dy.reshape(-1, shape[-1]))
    return dtable


# ---------------------------------------------------------------------------
# logistic head loss
# ---------------------------------------------------------------------------


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss_and_dlogit(logits: np.ndarray, labels: np.ndarray, pos_weight: float = 1.0):
    """Mean binary cross-entropy on logits; returns (loss, dloss/dlogits).

    Computed via log1p(exp(-|z|)) so the loss stays finite for any finite
    logit. pos_weight scales the positive-class term.
    """
    z = logits
    y = labels
    softplus = np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)  # log(1 + e^z)
    # per-example: -w*y*log(p) - (1-y)*log(1-p)  with p = sigmoid(z)
    losses = pos_weight * y * (softplus - z) + (1.0 - y) * softplus
    p = sigmoid(z)
    dz = (pos_weight * y * (p - 1.0) + (1.0 - y) * p) / z.shape[0]
    return float(losses.mean()), dz
