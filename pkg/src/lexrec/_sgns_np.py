"""Pure-numpy skip-gram negative-sampling kernel.

Reference implementation of the compiled kernel in `_sgns.pyx`; same update
order, same stable sigmoid/softplus forms, so the two paths agree to float
rounding (the compiled path accumulates dot products in a plain loop, BLAS
may not).
"""

from __future__ import annotations

import math

import numpy as np


def _sigmoid(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def _softplus(x: float) -> float:
    if x >= 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def train_pairs(
    w_in: np.ndarray,
    w_out: np.ndarray,
    centers: np.ndarray,
    contexts: np.ndarray,
    negatives: np.ndarray,
    alpha_start: float,
    alpha_end: float,
    pair_offset: int,
    total_pairs: int,
) -> float:
    """One pass of SGD over (center, context) pairs; updates w_in/w_out in place.

    The learning rate anneals linearly from alpha_start to alpha_end over the
    global pair index. Negatives equal to the positive context are skipped.
    Returns the summed loss (-log sigma(x_pos) - sum log sigma(-x_neg)).
    """
    loss = 0.0
    d_alpha = alpha_end - alpha_start
    n_neg = negatives.shape[1] if negatives.ndim == 2 else 0
    for i in range(len(centers)):
        alpha = alpha_start + d_alpha * ((pair_offset + i) / total_pairs)
        c = int(centers[i])
        o = int(contexts[i])
        h = w_in[c]
        grad_h = np.zeros_like(h)
        for j in range(-1, n_neg):
            if j < 0:
                t, label = o, 1.0
            else:
                t = int(negatives[i, j])
                if t == o:
                    continue
                label = 0.0
            row = w_out[t]
            x = float(h @ row)
            s = _sigmoid(x)
            loss += _softplus(-x) if label == 1.0 else _softplus(x)
            g = (label - s) * alpha
            grad_h += g * row
            row += g * h
        w_in[c] += grad_h
    return loss
