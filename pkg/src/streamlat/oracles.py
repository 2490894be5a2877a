"""Independent reference computations for validating the fast paths.

Everything here is written as plain loops over Python floats, deliberately
sharing no code with the production implementations it cross-checks.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np


def enumerate_alignment(p: np.ndarray,
                        mask_bounds: Optional[Sequence[int]] = None) -> np.ndarray:
    """Brute-force marginalization over all monotonic halting paths.

    ``p[i, j]`` is the probability of halting decode step ``i`` at frame
    ``j``. A path assigns non-decreasing 1-based frames j_1 <= ... <= j_I,
    anchored at j_0 = 1; its probability is the product over steps of
    p[i, j_i] times (1 - p[i, l]) for every frame l scanned past on the way
    from j_{i-1} to j_i. Returns the (steps, frames) marginal of halting
    step i at frame j. With ``mask_bounds``, paths through frames beyond a
    step's bound are dropped entirely.
    """
    p = np.asarray(p, dtype=np.float64)
    steps, T = p.shape
    alpha = np.zeros((steps, T))

    def walk(i: int, prev_frame: int, prob: float) -> None:
        if i == steps:
            return
        bound = T if mask_bounds is None else min(int(mask_bounds[i]), T)
        cont = 1.0
        for j in range(prev_frame, bound + 1):
            weight = prob * cont * p[i, j - 1]
            alpha[i, j - 1] += weight
            walk(i + 1, j, weight)
            cont *= 1.0 - p[i, j - 1]

    walk(0, 1, 1.0)
    return alpha


def direct_attention(q, k, v) -> np.ndarray:
    """Loop evaluation of softmax(q kᵀ / sqrt(d)) v, no vectorization."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    m, d = q.shape
    n = k.shape[0]
    out = np.zeros((m, v.shape[1]))
    for i in range(m):
        energies = [sum(q[i, t] * k[j, t] for t in range(d)) / math.sqrt(d)
                    for j in range(n)]
        top = max(energies)
        weights = [math.exp(e - top) for e in energies]
        total = sum(weights)
        for j in range(n):
            for c in range(v.shape[1]):
                out[i, c] += (weights[j] / total) * v[j, c]
    return out


def direct_chunkwise_beta(alpha, u, w: int) -> np.ndarray:
    """Literal double-sum evaluation of the chunkwise redistribution."""
    alpha = np.asarray(alpha, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    T = alpha.shape[0]
    beta = np.zeros(T)
    for j in range(1, T + 1):
        acc = 0.0
        for k in range(j, min(j + w - 1, T) + 1):
            denom = sum(math.exp(u[l - 1]) for l in range(max(1, k - w + 1), k + 1))
            acc += alpha[k - 1] * math.exp(u[j - 1]) / denom
        beta[j - 1] = acc
    return beta


def direct_interim_contexts(a, v) -> np.ndarray:
    """Running sums c[j] = sum_{l<=j} a[l] v[l] by explicit accumulation."""
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros_like(v)
    acc = np.zeros(v.shape[1])
    for j in range(v.shape[0]):
        acc = acc + a[j] * v[j]
        out[j] = acc
    return out


def reference_update_decision(old_acc: float, old_cov: float,
                              new_acc: float, new_cov: float,
                              tol: float) -> bool:
    """Straight-line transcription of the fine-tuning update policy table."""
    da = new_acc - old_acc
    dc_ = new_cov - old_cov
    if abs(da) < tol:
        acc_class = "equal"
    elif da > 0:
        acc_class = "up"
    else:
        acc_class = "down"
    if abs(dc_) < tol:
        cov_class = "equal"
    elif dc_ > 0:
        cov_class = "up"
    else:
        cov_class = "down"
    if acc_class == "up":
        return True
    if acc_class == "down":
        return False
    return cov_class == "down"
