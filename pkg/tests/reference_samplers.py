"""Naive reference implementations of the greedy samplers.

These transcribe the selection recursions directly: at every step the whole
penalty/objective is recomputed from scratch against all previously selected
points (O(N * k^2 * D) total work), with no incremental running-max state.
They exist purely as oracles for the optimized implementations and must stay
structurally independent of them.
"""

import numpy as np


def naive_diverse_fg(scores, feats, k):
    """Indices and objective values, recomputed per step."""
    s = np.maximum(np.asarray(scores, dtype=np.float64), 0.0)
    z = np.asarray(feats, dtype=np.float64)
    picked = []
    values = []
    for _ in range(k):
        if picked:
            penalty = np.abs(z @ z[picked].T).max(axis=1)  # from scratch
            objective = s * (1.0 - penalty)
        else:
            objective = s.copy()
        objective[picked] = -np.inf
        i = int(np.argmax(objective))  # lowest index on ties
        picked.append(i)
        values.append(float(objective[i]))
    return picked, values


def naive_diverse_bg(fg_locs, feats, k):
    z = np.asarray(feats, dtype=np.float64)
    picked = []
    values = []
    fg_locs = list(fg_locs)
    for _ in range(k):
        anchors = fg_locs + picked
        worst_sim = np.abs(z @ z[anchors].T).max(axis=1)
        worst_sim[fg_locs + picked] = np.inf
        i = int(np.argmin(worst_sim))
        picked.append(i)
        values.append(float(worst_sim[i]))
    return picked, values


def naive_spatial(scores, shape, k, scale):
    s = np.maximum(np.asarray(scores, dtype=np.float64), 0.0)
    h, w = shape
    rows, cols = np.divmod(np.arange(h * w), w)
    picked = []
    values = []
    for _ in range(k):
        if picked:
            pr, pc = rows[picked], cols[picked]
            d2 = (rows[:, None] - pr) ** 2.0 + (cols[:, None] - pc) ** 2.0
            penalty = np.exp(-d2 / (2.0 * scale * scale)).max(axis=1)
            objective = s * (1.0 - penalty)
        else:
            objective = s.copy()
        objective[picked] = -np.inf
        i = int(np.argmax(objective))
        picked.append(i)
        values.append(float(objective[i]))
    return picked, values


def naive_top_k(scores, k):
    s = np.maximum(np.asarray(scores, dtype=np.float64), 0.0)
    order = sorted(range(s.shape[0]), key=lambda i: (-s[i], i))
    picked = order[:k]
    return picked, [float(s[i]) for i in picked]
