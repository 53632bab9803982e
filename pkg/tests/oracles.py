"""Independent reference computations used by the tests.

Nothing here imports the code paths being checked, except for reading
tensors' ``.data`` in the finite-difference helper.
"""

from __future__ import annotations

import numpy as np


def naive_conv1d(x, w, stride=1, padding=0):
    """Direct sliding dot product, (B, C, T) x (O, C, K)."""
    x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    b, c, t = x.shape
    o, _, k = w.shape
    t_out = (t - k) // stride + 1
    y = np.zeros((b, o, t_out))
    for bi in range(b):
        for oi in range(o):
            for ti in range(t_out):
                s = 0.0
                for ci in range(c):
                    for ki in range(k):
                        s += x[bi, ci, ti * stride + ki] * w[oi, ci, ki]
                y[bi, oi, ti] = s
    return y


def central_diff(loss_fn, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """d loss / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn()
        flat[i] = old - h
        down = loss_fn()
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error between two gradient arrays."""
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    if den == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / den)


def brute_rates(bona, spoof):
    """(thresholds, p_miss, p_fa) by explicit counting at every candidate threshold."""
    bona = np.asarray(bona, float)
    spoof = np.asarray(spoof, float)
    cands = [-np.inf] + sorted(set(bona.tolist()) | set(spoof.tolist())) + [np.inf]
    pm = [np.count_nonzero(bona < t) / bona.size for t in cands]
    pf = [np.count_nonzero(spoof >= t) / spoof.size for t in cands]
    return np.array(cands), np.array(pm), np.array(pf)


def brute_eer_hull(bona, spoof) -> float:
    """Lowest P_miss = P_fa point reachable by mixing any two operating points.

    That is where the diagonal first enters the convex hull of the DET
    points, i.e. the convex-hull EER, found here by enumerating all pairs.
    """
    _, pm, pf = brute_rates(bona, spoof)
    d = pf - pm
    best = np.inf
    on = d == 0
    if on.any():
        best = pf[on].min()
    i, j = np.nonzero((d[:, None] < 0) & (d[None, :] > 0))
    if i.size:
        lam = d[j] / (d[j] - d[i])  # weight of point i
        vals = lam * pf[i] + (1 - lam) * pf[j]
        best = min(best, vals.min())
    return float(best)


def brute_min_tdcf(bona, spoof, c1: float, c2: float) -> float:
    _, pm, pf = brute_rates(bona, spoof)
    return float(np.min((c1 * pm + c2 * pf) / min(c1, c2)))
