"""Deterministic 2-D projection of context vectors for trajectory plots.

Mean-centered contexts are projected onto their top-2 principal axes.
Sign convention: each axis is flipped so its first nonzero loading is
positive, making the output reproducible across runs.
"""

from __future__ import annotations

import numpy as np


def pca_project(rows: np.ndarray, k: int = 2) -> np.ndarray:
    """Project rows [M x d] to [M x k] principal-component coordinates."""
    rows = np.asarray(rows, dtype=np.float64)
    m, d = rows.shape
    if m < 2:
        return np.zeros((m, k))
    centered = rows - rows.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:k]
    for i in range(comps.shape[0]):
        nz = np.nonzero(comps[i])[0]
        if nz.size and comps[i, nz[0]] < 0:
            comps[i] = -comps[i]
    coords = centered @ comps.T
    if coords.shape[1] < k:
        coords = np.pad(coords, ((0, 0), (0, k - coords.shape[1])))
    return coords


def trajectory_points(contexts: np.ndarray, speakers: list[str]) -> list[dict]:
    """JSON-ready trajectory: one point per context vector.

    Point 0 precedes the first utterance; point k reflects the state after
    utterance k, so it is labeled with utterance k's speaker.
    """
    coords = pca_project(contexts)
    points = []
    for i in range(coords.shape[0]):
        speaker = "start" if i == 0 else speakers[i - 1] if i - 1 < len(speakers) else "?"
        points.append({"k": i, "x": float(coords[i, 0]), "y": float(coords[i, 1]), "speaker": speaker})
    return points
