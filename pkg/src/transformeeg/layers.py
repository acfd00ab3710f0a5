"""Forward/backward pairs for the layers TransformEEG is built from.

Each ``*_fwd`` returns ``(out, cache)``; the matching ``*_bwd`` takes the
upstream gradient and the cache and returns the input gradient (plus
parameter gradients where the layer has any). Arrays are float64.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

BN_EPS = 1e-5
LN_EPS = 1e-5


# --- depthwise conv1d, same padding -----------------------------------------


def dwconv_fwd(x, w, b, mult: int):
    """``x``: (B, Cin, L); ``w``: (Cin*mult, 1, k). Output channel ``o`` reads input ``o // mult``."""
    B, cin, L = x.shape
    cout, _, k = w.shape
    pad = (k - 1) // 2
    xr = np.repeat(x, mult, axis=1) if mult > 1 else x
    xp = np.pad(xr, ((0, 0), (0, 0), (pad, pad)))
    out = np.broadcast_to(b[None, :, None], (B, cout, L)).copy()
    for j in range(k):
        out += w[None, :, 0, j, None] * xp[:, :, j:j + L]
    return out, (xp, w, mult, cin, L)


def dwconv_bwd(dout, cache):
    xp, w, mult, cin, L = cache
    B, cout, _ = dout.shape
    k = w.shape[2]
    pad = (k - 1) // 2
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for j in range(k):
        dw[:, 0, j] = np.einsum("bcl,bcl->c", dout, xp[:, :, j:j + L])
        dxp[:, :, j:j + L] += dout * w[None, :, 0, j, None]
    db = dout.sum(axis=(0, 2))
    dxr = dxp[:, :, pad:pad + L]
    dx = dxr.reshape(B, cin, mult, L).sum(axis=2)
    return dx, dw, db


# --- batch norm over (batch, time) --------------------------------------------


def batchnorm_fwd(x, gamma, beta, training: bool, running_mean=None, running_var=None):
    if training:
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None]) * inv[None, :, None]
    out = gamma[None, :, None] * xhat + beta[None, :, None]
    n = x.shape[0] * x.shape[2]
    stats = (mean, var * n / max(n - 1, 1)) if training else None
    return out, (xhat, inv, gamma, n), stats


def batchnorm_bwd(dout, cache):
    xhat, inv, gamma, n = cache
    dgamma = np.einsum("bcl,bcl->c", dout, xhat)
    dbeta = dout.sum(axis=(0, 2))
    dxhat = dout * gamma[None, :, None]
    s1 = dxhat.sum(axis=(0, 2))
    s2 = np.einsum("bcl,bcl->c", dxhat, xhat)
    dx = (inv / n)[None, :, None] * (n * dxhat - s1[None, :, None] - xhat * s2[None, :, None])
    return dx, dgamma, dbeta


# --- pointwise -----------------------------------------------------------------


def elu_fwd(x):
    out = np.where(x > 0, x, np.expm1(np.minimum(x, 0)))
    return out, (x, out)


def elu_bwd(dout, cache):
    x, out = cache
    return dout * np.where(x > 0, 1.0, out + 1.0)


def relu_fwd(x):
    return np.maximum(x, 0), x


def relu_bwd(dout, x):
    return dout * (x > 0)


def leaky_fwd(x, slope):
    return np.where(x > 0, x, slope * x), (x, slope)


def leaky_bwd(dout, cache):
    x, slope = cache
    return dout * np.where(x > 0, 1.0, slope)


def gelu_fwd(x):
    cdf = 0.5 * (1 + erf(x / np.sqrt(2)))
    return x * cdf, (x, cdf)


def gelu_bwd(dout, cache):
    x, cdf = cache
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)
    return dout * (cdf + x * pdf)


ACTIVATIONS = {
    "relu": (relu_fwd, relu_bwd),
    "gelu": (gelu_fwd, gelu_bwd),
    "elu": (elu_fwd, elu_bwd),
}


def sigmoid(z):
    return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))


# --- pooling / dropout -----------------------------------------------------------


def avgpool_fwd(x, k: int, s: int):
    L = x.shape[-1]
    T = (L - k) // s + 1
    out = np.zeros(x.shape[:-1] + (T,))
    for j in range(k):
        out += x[..., j:j + s * (T - 1) + 1:s]
    return out / k, (x.shape, k, s, T)


def avgpool_bwd(dout, cache):
    shape, k, s, T = cache
    dx = np.zeros(shape)
    for j in range(k):
        dx[..., j:j + s * (T - 1) + 1:s] += dout / k
    return dx


def dropout_mask(shape, p: float, rng: np.random.Generator | None):
    """Inverted-dropout mask, or None when dropout is inactive."""
    if rng is None or p <= 0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


# --- affine / normalization over the last axis -------------------------------------


def linear_fwd(x, w, b):
    return x @ w.T + b, x


def linear_bwd(dout, x, w):
    dw = dout.reshape(-1, dout.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    db = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    return dout @ w, dw, db


def layernorm_fwd(x, gamma, beta):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layernorm_bwd(dout, cache):
    xhat, inv, gamma = cache
    lead = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=lead)
    dbeta = dout.sum(axis=lead)
    dxhat = dout * gamma
    e = xhat.shape[-1]
    dx = (inv / e) * (e * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dx, dgamma, dbeta


# --- multi-head self-attention ------------------------------------------------------


def attention_fwd(x, w_in, b_in, w_out, b_out, n_heads: int):
    B, T, E = x.shape
    dh = E // n_heads
    qkv = x @ w_in.T + b_in
    q, k, v = np.split(qkv, 3, axis=-1)

    def heads(a):
        return a.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = heads(q), heads(k), heads(v)
    scale = 1.0 / np.sqrt(dh)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    P = np.exp(scores)
    P /= P.sum(axis=-1, keepdims=True)
    ctx = (P @ v).transpose(0, 2, 1, 3).reshape(B, T, E)
    out = ctx @ w_out.T + b_out
    return out, (x, q, k, v, P, ctx, scale, w_in, w_out, n_heads)


def attention_bwd(dout, cache):
    x, q, k, v, P, ctx, scale, w_in, w_out, n_heads = cache
    B, T, E = x.shape
    dh = E // n_heads
    flat = dout.reshape(-1, E)
    dw_out = flat.T @ ctx.reshape(-1, E)
    db_out = flat.sum(axis=0)
    dctx = (dout @ w_out).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    dP = dctx @ v.transpose(0, 1, 3, 2)
    dv = P.transpose(0, 1, 3, 2) @ dctx
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True))
    dq = (dS @ k) * scale
    dk = (dS.transpose(0, 1, 3, 2) @ q) * scale

    def merge(a):
        return a.transpose(0, 2, 1, 3).reshape(B, T, E)

    dqkv = np.concatenate([merge(dq), merge(dk), merge(dv)], axis=-1)
    dw_in = dqkv.reshape(-1, 3 * E).T @ x.reshape(-1, E)
    db_in = dqkv.reshape(-1, 3 * E).sum(axis=0)
    dx = dqkv @ w_in
    return dx, dw_in, db_in, dw_out, db_out
