"""Plain-numpy reference formulas, written independently of the autograd code."""

import math

import numpy as np


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def attend(q, k, v, mask=None):
    s = q @ k.T / math.sqrt(q.shape[-1])
    if mask is not None:
        s = np.where(mask, s, -1e9)
    return softmax(s) @ v


def mha(xq, xkv, wq, wk, wv, wo, h, mask=None):
    d = wq.shape[0]
    dk = d // h
    q, k, v = xq @ wq, xkv @ wk, xkv @ wv
    heads = [attend(q[:, i * dk:(i + 1) * dk], k[:, i * dk:(i + 1) * dk], v[:, i * dk:(i + 1) * dk], mask) for i in range(h)]
    out = np.concatenate(heads, axis=1)
    return out if wo is None else out @ wo


def leaky(x, slope=0.01):
    return np.where(x >= 0, x, slope * x)


def mha_arrays(p):
    return p.w_q.data, p.w_k.data, p.w_v.data, None if p.w_o is None else p.w_o.data, p.n_heads


def encoder_layer(x, lp):
    h = layer_norm(x + mha(x, x, *mha_arrays(lp.attn)), lp.norm1.gain.data, lp.norm1.bias.data)
    ff = np.maximum(h @ lp.ff.inner.weight.data + lp.ff.inner.bias.data, 0) @ lp.ff.outer.weight.data + lp.ff.outer.bias.data
    return layer_norm(h + ff, lp.norm2.gain.data, lp.norm2.bias.data)


def camo(v, params, alpha, beta, slope=0.01):
    """Encoder recursion, joint fusion from raw outputs, chained refinement, skip fusion."""
    raw, z = [], v
    for lp in params.layers:
        z = encoder_layer(z, lp)
        raw.append(z)
    joint = np.concatenate(raw, axis=1)
    z_f = leaky(joint @ params.camo.mlp.weight.data + params.camo.mlp.bias.data, slope)
    refined = [raw[0]]
    for i in range(1, len(raw)):
        att = mha(raw[i], refined[i - 1], *mha_arrays(params.camo.refine[i - 1]))
        refined.append(alpha * att + raw[i])
    return raw, z_f, refined, beta * z_f + refined[-1]
