"""Numba-jitted twins of the numpy kernels.

Same signatures and return shapes as np_kernels; loops are written out so the
JIT can fuse them. The clipped sum never materializes per-sample gradients:
outer-product norms factorize as ||u|| * ||v||.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _gather_x(emb, contexts, b, x):
    k = contexts.shape[1]
    d = emb.shape[1]
    for j in range(k):
        row = contexts[b, j]
        for t in range(d):
            x[j * d + t] = emb[row, t]


@njit(cache=True)
def logits_batch(emb, w1, b1, w2, b2, contexts):
    B, k = contexts.shape
    d = emb.shape[1]
    V = w2.shape[1]
    out = np.empty((B, V))
    x = np.empty(k * d)
    for b in range(B):
        _gather_x(emb, contexts, b, x)
        h = np.tanh(np.dot(x, w1) + b1)
        out[b] = np.dot(h, w2) + b2
    return out


@njit(cache=True)
def probs_batch(emb, w1, b1, w2, b2, contexts):
    logits = logits_batch(emb, w1, b1, w2, b2, contexts)
    B, V = logits.shape
    out = np.empty((B, V))
    for b in range(B):
        m = logits[b].max()
        z = 0.0
        for v in range(V):
            out[b, v] = np.exp(logits[b, v] - m)
            z += out[b, v]
        for v in range(V):
            out[b, v] /= z
    return out


@njit(cache=True)
def score_targets(emb, w1, b1, w2, b2, contexts, targets):
    logits = logits_batch(emb, w1, b1, w2, b2, contexts)
    B = logits.shape[0]
    out = np.empty(B)
    for b in range(B):
        m = logits[b].max()
        z = 0.0
        for v in range(logits.shape[1]):
            z += np.exp(logits[b, v] - m)
        out[b] = logits[b, targets[b]] - (m + np.log(z))
    return out


@njit(cache=True)
def batch_mean_grad(emb, w1, b1, w2, b2, contexts, targets):
    B, k = contexts.shape
    V, d = emb.shape
    H = w1.shape[1]
    kd = k * d
    gemb = np.zeros((V, d))
    gw1 = np.zeros((kd, H))
    gb1 = np.zeros(H)
    gw2 = np.zeros((H, V))
    gb2 = np.zeros(V)
    loss = 0.0
    x = np.empty(kd)
    for b in range(B):
        _gather_x(emb, contexts, b, x)
        h = np.tanh(np.dot(x, w1) + b1)
        logits = np.dot(h, w2) + b2
        m = logits.max()
        z = 0.0
        for v in range(V):
            z += np.exp(logits[v] - m)
        logz = m + np.log(z)
        loss += logz - logits[targets[b]]
        dlogits = np.empty(V)
        for v in range(V):
            dlogits[v] = np.exp(logits[v] - logz)
        dlogits[targets[b]] -= 1.0
        for v in range(V):
            dlogits[v] /= B
        for i in range(H):
            hi = h[i]
            for v in range(V):
                gw2[i, v] += hi * dlogits[v]
        for v in range(V):
            gb2[v] += dlogits[v]
        dh = np.dot(w2, dlogits)
        dpre = (1.0 - h * h) * dh
        for i in range(kd):
            xi = x[i]
            for jj in range(H):
                gw1[i, jj] += xi * dpre[jj]
        for jj in range(H):
            gb1[jj] += dpre[jj]
        dx = np.dot(w1, dpre)
        for j in range(k):
            r = contexts[b, j]
            for t in range(d):
                gemb[r, t] += dx[j * d + t]
    return loss / B, gemb, gw1, gb1, gw2, gb2


@njit(cache=True)
def batch_soft_grad(emb, w1, b1, w2, b2, contexts, ref_probs):
    B, k = contexts.shape
    V, d = emb.shape
    H = w1.shape[1]
    kd = k * d
    gemb = np.zeros((V, d))
    gw1 = np.zeros((kd, H))
    gb1 = np.zeros(H)
    gw2 = np.zeros((H, V))
    gb2 = np.zeros(V)
    loss = 0.0
    x = np.empty(kd)
    for b in range(B):
        _gather_x(emb, contexts, b, x)
        h = np.tanh(np.dot(x, w1) + b1)
        logits = np.dot(h, w2) + b2
        m = logits.max()
        z = 0.0
        for v in range(V):
            z += np.exp(logits[v] - m)
        logz = m + np.log(z)
        dlogits = np.empty(V)
        for v in range(V):
            p = np.exp(logits[v] - logz)
            ref = ref_probs[b, v]
            if ref > 0.0:
                loss += ref * (np.log(ref) - (logits[v] - logz))
            dlogits[v] = (p - ref) / B
        for i in range(H):
            hi = h[i]
            for v in range(V):
                gw2[i, v] += hi * dlogits[v]
        for v in range(V):
            gb2[v] += dlogits[v]
        dh = np.dot(w2, dlogits)
        dpre = (1.0 - h * h) * dh
        for i in range(kd):
            xi = x[i]
            for jj in range(H):
                gw1[i, jj] += xi * dpre[jj]
        for jj in range(H):
            gb1[jj] += dpre[jj]
        dx = np.dot(w1, dpre)
        for j in range(k):
            r = contexts[b, j]
            for t in range(d):
                gemb[r, t] += dx[j * d + t]
    return loss / B, gemb, gw1, gb1, gw2, gb2


@njit(cache=True)
def per_sample_flat_grads(emb, w1, b1, w2, b2, contexts, targets):
    B, k = contexts.shape
    V, d = emb.shape
    H = w1.shape[1]
    kd = k * d
    n_params = V * d + kd * H + H + H * V + V
    losses = np.empty(B)
    flat = np.zeros((B, n_params))
    x = np.empty(kd)
    off_w1 = V * d
    off_b1 = off_w1 + kd * H
    off_w2 = off_b1 + H
    off_b2 = off_w2 + H * V
    for b in range(B):
        _gather_x(emb, contexts, b, x)
        h = np.tanh(np.dot(x, w1) + b1)
        logits = np.dot(h, w2) + b2
        m = logits.max()
        z = 0.0
        for v in range(V):
            z += np.exp(logits[v] - m)
        logz = m + np.log(z)
        losses[b] = logz - logits[targets[b]]
        dlogits = np.empty(V)
        for v in range(V):
            dlogits[v] = np.exp(logits[v] - logz)
        dlogits[targets[b]] -= 1.0
        for i in range(H):
            hi = h[i]
            for v in range(V):
                flat[b, off_w2 + i * V + v] = hi * dlogits[v]
        for v in range(V):
            flat[b, off_b2 + v] = dlogits[v]
        dh = np.dot(w2, dlogits)
        dpre = (1.0 - h * h) * dh
        for i in range(kd):
            xi = x[i]
            for jj in range(H):
                flat[b, off_w1 + i * H + jj] = xi * dpre[jj]
        for jj in range(H):
            flat[b, off_b1 + jj] = dpre[jj]
        dx = np.dot(w1, dpre)
        for j in range(k):
            r = contexts[b, j]
            for t in range(d):
                flat[b, r * d + t] += dx[j * d + t]
    return losses, flat


@njit(cache=True)
def clipped_grad_sum(emb, w1, b1, w2, b2, contexts, targets, clip):
    B, k = contexts.shape
    V, d = emb.shape
    H = w1.shape[1]
    kd = k * d
    gemb = np.zeros((V, d))
    gw1 = np.zeros((kd, H))
    gb1 = np.zeros(H)
    gw2 = np.zeros((H, V))
    gb2 = np.zeros(V)
    losses = np.empty(B)
    x = np.empty(kd)
    dxrow = np.empty(d)
    for b in range(B):
        _gather_x(emb, contexts, b, x)
        h = np.tanh(np.dot(x, w1) + b1)
        logits = np.dot(h, w2) + b2
        m = logits.max()
        z = 0.0
        for v in range(V):
            z += np.exp(logits[v] - m)
        logz = m + np.log(z)
        losses[b] = logz - logits[targets[b]]
        dlogits = np.empty(V)
        for v in range(V):
            dlogits[v] = np.exp(logits[v] - logz)
        dlogits[targets[b]] -= 1.0
        dh = np.dot(w2, dlogits)
        dpre = (1.0 - h * h) * dh
        dx = np.dot(w1, dpre)
        # Frobenius norm of outer(u, v) is ||u||*||v||; the embedding part
        # needs same-row contributions merged before squaring.
        xx = 0.0
        for i in range(kd):
            xx += x[i] * x[i]
        hh = 0.0
        for i in range(H):
            hh += h[i] * h[i]
        pp = 0.0
        for i in range(H):
            pp += dpre[i] * dpre[i]
        ll = 0.0
        for v in range(V):
            ll += dlogits[v] * dlogits[v]
        sq = xx * pp + pp + hh * ll + ll
        for j in range(k):
            r = contexts[b, j]
            first = True
            for j2 in range(j):
                if contexts[b, j2] == r:
                    first = False
                    break
            if not first:
                continue
            for t in range(d):
                dxrow[t] = dx[j * d + t]
            for j2 in range(j + 1, k):
                if contexts[b, j2] == r:
                    for t in range(d):
                        dxrow[t] += dx[j2 * d + t]
            for t in range(d):
                sq += dxrow[t] * dxrow[t]
        norm = np.sqrt(sq)
        f = 1.0
        if norm > clip:
            f = clip / norm
        for i in range(H):
            hi = f * h[i]
            for v in range(V):
                gw2[i, v] += hi * dlogits[v]
        for v in range(V):
            gb2[v] += f * dlogits[v]
        for i in range(kd):
            xi = f * x[i]
            for jj in range(H):
                gw1[i, jj] += xi * dpre[jj]
        for jj in range(H):
            gb1[jj] += f * dpre[jj]
        for j in range(k):
            r = contexts[b, j]
            for t in range(d):
                gemb[r, t] += f * dx[j * d + t]
    flat = np.empty(V * d + kd * H + H + H * V + V)
    pos = 0
    for i in range(V):
        for t in range(d):
            flat[pos] = gemb[i, t]
            pos += 1
    for i in range(kd):
        for jj in range(H):
            flat[pos] = gw1[i, jj]
            pos += 1
    for jj in range(H):
        flat[pos] = gb1[jj]
        pos += 1
    for i in range(H):
        for v in range(V):
            flat[pos] = gw2[i, v]
            pos += 1
    for v in range(V):
        flat[pos] = gb2[v]
        pos += 1
    return losses, flat


@njit(cache=True)
def lcs_len(a, b):
    n = len(a)
    m = len(b)
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
        tmp = prev
        prev = cur
        cur = tmp
    return prev[m]
