"""Pure-numpy reference implementations of the hot kernels.

Model: concat(embeddings of a k-token context) -> tanh hidden -> affine
logits. Gradient layout everywhere is (emb, w1, b1, w2, b2), row-major.
"""

from __future__ import annotations

import numpy as np


def logits_batch(emb, w1, b1, w2, b2, contexts):
    B, k = contexts.shape
    d = emb.shape[1]
    x = emb[contexts].reshape(B, k * d)
    h = np.tanh(x @ w1 + b1)
    return h @ w2 + b2


def probs_batch(emb, w1, b1, w2, b2, contexts):
    logits = logits_batch(emb, w1, b1, w2, b2, contexts)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def score_targets(emb, w1, b1, w2, b2, contexts, targets):
    """Log-probability of each target token given its context row."""
    logits = logits_batch(emb, w1, b1, w2, b2, contexts)
    m = logits.max(axis=1)
    logz = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return logits[np.arange(len(targets)), targets] - logz


def _forward(emb, w1, b1, w2, b2, contexts):
    B, k = contexts.shape
    d = emb.shape[1]
    x = emb[contexts].reshape(B, k * d)
    h = np.tanh(x @ w1 + b1)
    logits = h @ w2 + b2
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    logz = (m + np.log(z))[:, 0]
    return x, h, logits, p, logz


def batch_mean_grad(emb, w1, b1, w2, b2, contexts, targets):
    """Mean cross-entropy over the batch and its gradient."""
    B, k = contexts.shape
    V, d = emb.shape
    x, h, logits, p, logz = _forward(emb, w1, b1, w2, b2, contexts)
    rows = np.arange(B)
    loss = float(np.mean(logz - logits[rows, targets]))
    dlogits = p.copy()
    dlogits[rows, targets] -= 1.0
    dlogits /= B
    gw2 = h.T @ dlogits
    gb2 = dlogits.sum(axis=0)
    dpre = (1.0 - h * h) * (dlogits @ w2.T)
    gw1 = x.T @ dpre
    gb1 = dpre.sum(axis=0)
    dx = (dpre @ w1.T).reshape(B, k, d)
    gemb = np.zeros((V, d))
    np.add.at(gemb, contexts, dx)
    return loss, gemb, gw1, gb1, gw2, gb2


def batch_soft_grad(emb, w1, b1, w2, b2, contexts, ref_probs):
    """Mean KL(ref || current) over the batch and its gradient."""
    B, k = contexts.shape
    V, d = emb.shape
    x, h, logits, p, logz = _forward(emb, w1, b1, w2, b2, contexts)
    logp = logits - logz[:, None]
    mask = ref_probs > 0.0
    kl_terms = np.where(mask, ref_probs * (np.log(np.where(mask, ref_probs, 1.0)) - logp), 0.0)
    loss = float(kl_terms.sum(axis=1).mean())
    dlogits = (p - ref_probs) / B
    gw2 = h.T @ dlogits
    gb2 = dlogits.sum(axis=0)
    dpre = (1.0 - h * h) * (dlogits @ w2.T)
    gw1 = x.T @ dpre
    gb1 = dpre.sum(axis=0)
    dx = (dpre @ w1.T).reshape(B, k, d)
    gemb = np.zeros((V, d))
    np.add.at(gemb, contexts, dx)
    return loss, gemb, gw1, gb1, gw2, gb2


def per_sample_flat_grads(emb, w1, b1, w2, b2, contexts, targets):
    """Per-sample losses and flat per-sample gradients, shape (B, n_params)."""
    B, k = contexts.shape
    V, d = emb.shape
    x, h, logits, p, logz = _forward(emb, w1, b1, w2, b2, contexts)
    rows = np.arange(B)
    losses = logz - logits[rows, targets]
    dlogits = p.copy()
    dlogits[rows, targets] -= 1.0
    gw2 = np.einsum("bh,bv->bhv", h, dlogits)
    dpre = (1.0 - h * h) * (dlogits @ w2.T)
    gw1 = np.einsum("bx,bh->bxh", x, dpre)
    dx = (dpre @ w1.T).reshape(B, k, d)
    gemb = np.zeros((B, V, d))
    np.add.at(gemb, (rows[:, None], contexts), dx)
    flat = np.concatenate(
        [gemb.reshape(B, -1), gw1.reshape(B, -1), dpre, gw2.reshape(B, -1), dlogits],
        axis=1,
    )
    return losses, flat


def clipped_grad_sum(emb, w1, b1, w2, b2, contexts, targets, clip):
    """Per-sample losses and the sum of per-sample L2-clipped gradients."""
    losses, flat = per_sample_flat_grads(emb, w1, b1, w2, b2, contexts, targets)
    norms = np.sqrt((flat * flat).sum(axis=1))
    factors = np.minimum(1.0, np.divide(clip, norms, out=np.ones_like(norms),
                                        where=norms > 0.0))
    return losses, factors @ flat


def lcs_len(a, b):
    """Longest-common-subsequence length of two int sequences."""
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return 0
    prev = np.zeros(m + 1, dtype=np.int64)
    cur = np.zeros(m + 1, dtype=np.int64)
    for i in range(n):
        ai = a[i]
        for j in range(m):
            if ai == b[j]:
                cur[j + 1] = prev[j] + 1
            else:
                cur[j + 1] = max(prev[j + 1], cur[j])
        prev, cur = cur, prev
    return int(prev[m])
