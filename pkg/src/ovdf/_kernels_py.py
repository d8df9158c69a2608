"""Pure-Python kernels: the permutation search inside the Bellman update and
per-tick radio contact detection.

The compiled twin in _kernels.pyx implements the same operations with the
same floating-point evaluation order, so both backends produce bit-identical
results; keep the expression shapes in the two files in sync.

All probability/cost inputs are float64 arrays (or plain sequences); order
arguments are index sequences into them.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def _as_list(values):
    return values.tolist() if hasattr(values, "tolist") else list(values)


def forwarding_probs(c, q, order):
    """Forwarding probability for each scan position of a priority order.

    c[k]/q[k] are the contact and own-move probabilities of candidate k;
    order lists candidate indices from highest to lowest priority. Position
    m of the result is the probability the packet leaves along order[m].
    """
    c = _as_list(c)
    q = _as_list(q)
    prod_c = 1.0
    sum_q = 0.0
    out = []
    for k in _as_list(order):
        ck = c[k]
        qk = q[k]
        p = prod_c * (ck * (1.0 - sum_q) + qk - ck * qk)
        if p < 0.0:
            p = 0.0
        elif p > 1.0:
            p = 1.0
        out.append(p)
        prod_c *= 1.0 - ck
        sum_q += qk
    return np.array(out, dtype=np.float64)


def _decision_value(c, q, w, order) -> float:
    prod_c = 1.0
    sum_q = 0.0
    value = 0.0
    for k in order:
        ck = c[k]
        qk = q[k]
        p = prod_c * (ck * (1.0 - sum_q) + qk - ck * qk)
        if p < 0.0:
            p = 0.0
        elif p > 1.0:
            p = 1.0
        value += p * w[k]
        prod_c *= 1.0 - ck
        sum_q += qk
    return value


def decision_value(c, q, w, order) -> float:
    """Expected cost sum(P_m * w[order[m]]) of scanning candidates in `order`."""
    return _decision_value(_as_list(c), _as_list(q), _as_list(w), _as_list(order))


def best_order_brute(c, q, w):
    """Minimum-cost priority order by exhaustive lexicographic enumeration.

    Ties keep the first (lexicographically smallest) permutation, which in
    canonical candidate order means lower (vtype, destination) wins.
    """
    c = _as_list(c)
    q = _as_list(q)
    w = _as_list(w)
    n = len(c)
    if n == 0:
        return (), math.inf
    best_order = None
    best_value = math.inf
    for order in itertools.permutations(range(n)):
        value = _decision_value(c, q, w, order)
        if value < best_value:
            best_value = value
            best_order = order
    return best_order, best_value


def contact_pairs(x, y, radio_range):
    """Index pairs (i, j), i < j, within the closed radio ball, in row order."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        return []
    dx = x[:, None] - x[None, :]
    dy = y[:, None] - y[None, :]
    close = dx * dx + dy * dy <= radio_range * radio_range
    ii, jj = np.nonzero(np.triu(close, k=1))
    return list(zip(ii.tolist(), jj.tolist()))
