"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` one to one and are used when the compiled
extension is unavailable (or when ``LIDARLOC_PURE_PYTHON=1``).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def line_smoothness(points, half_window):
    """Smoothness of every point on one scan line.

    Entries closer than ``half_window`` to either end are NaN.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    n = pts.shape[0]
    out = np.full(n, np.nan)
    h = int(half_window)
    if n < 2 * h + 1:
        return out
    # windows: (n - 2h, 3, 2h + 1)
    win = sliding_window_view(pts, 2 * h + 1, axis=0)
    centre = pts[h:n - h]
    diff = (2 * h + 1) * centre - win.sum(axis=2)
    norm_c = np.linalg.norm(centre, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[h:n - h] = np.where(norm_c > 0, np.linalg.norm(diff, axis=1) / (2 * h * norm_c), np.nan)
    return out


def connected_components(n, pairs):
    """Label connected components; each label is the smallest member index."""
    labels = np.arange(n, dtype=np.int64)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if n == 0 or pairs.shape[0] == 0:
        return labels
    i, j = pairs[:, 0], pairs[:, 1]
    while True:
        lo = np.minimum(labels[i], labels[j])
        new = labels.copy()
        np.minimum.at(new, i, lo)
        np.minimum.at(new, j, lo)
        # pointer jumping until every node points at a root
        while True:
            jumped = new[new]
            if np.array_equal(jumped, new):
                break
            new = jumped
        if np.array_equal(new, labels):
            return labels
        labels = new


def voxel_mean(points, keys):
    """Average points sharing an integer voxel key.

    Returns ``(means, inverse)`` with voxels in lexicographic key order.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] == 0:
        return np.empty((0, 3)), np.empty(0, dtype=np.int64)
    _, inverse, counts = np.unique(
        np.asarray(keys, dtype=np.int64), axis=0, return_inverse=True, return_counts=True
    )
    inverse = inverse.reshape(-1)
    m = counts.shape[0]
    means = np.empty((m, 3))
    for d in range(3):
        means[:, d] = np.bincount(inverse, weights=pts[:, d], minlength=m) / counts
    return means, inverse.astype(np.int64)
