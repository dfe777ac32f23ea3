"""Numpy implementations of the row-wise kernels.

Same signatures and results as the compiled ``_kernels`` module; used when
the extension is not built or when ``RSNMT_PURE_PYTHON=1``.
"""

import numpy as np


def layer_norm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    y = xhat * gain + bias
    return y, xhat, rstd[:, 0]


def layer_norm_bwd(dy, xhat, rstd, gain):
    g = dy * gain
    s1 = g.mean(axis=1, keepdims=True)
    s2 = np.mean(g * xhat, axis=1, keepdims=True)
    dx = rstd[:, None] * (g - s1 - xhat * s2)
    dgain = np.sum(dy * xhat, axis=0)
    dbias = dy.sum(axis=0)
    return dx, dgain, dbias


def softmax_fwd(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    e /= e.sum(axis=1, keepdims=True)
    return e


def softmax_bwd(y, dy):
    return y * (dy - np.sum(y * dy, axis=1, keepdims=True))


def smoothed_ce(logits, gold, epsilon, pad_id):
    n, v = logits.shape
    keep = gold != pad_id
    grad = np.zeros_like(logits)
    count = int(keep.sum())
    if count == 0:
        return 0.0, 0, grad
    rows = logits[keep]
    g = gold[keep]
    shifted = rows - rows.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    off = epsilon / (v - 1) if v > 1 else 0.0
    q = np.full_like(rows, off)
    q[np.arange(len(g)), g] = 1.0 - epsilon
    total = float(-(q * logp).sum(dtype=np.float64))
    grad[keep] = np.exp(logp) - q
    return total, count, grad


def scatter_add_rows(out, ids, rows):
    np.add.at(out, ids, rows)
