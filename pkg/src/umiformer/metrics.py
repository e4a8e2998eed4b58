"""Training loss and reconstruction metrics.

Surface point clouds come from exposed voxel faces (an occupied voxel side
whose neighbour is empty or outside the grid), sampled uniformly by area and
scaled into the unit cube.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import ops
from .autodiff.tensor import ContractError, Tensor

DICE_EPS = 1e-8
FSCORE_DISTANCE = 0.01
SURFACE_POINTS = 8192

# axis, side for faces 0..5: -x, +x, -y, +y, -z, +z
_FACES = [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)]


def _guard(denominator: np.ndarray) -> Tensor:
    return Tensor(np.where(denominator == 0, DICE_EPS, 0.0), dtype=denominator.dtype)


def _safe(denominator: float) -> float:
    return denominator + DICE_EPS if denominator == 0 else denominator


def dice_loss(p: Tensor, gt) -> Tensor:
    """Two-term Dice loss over the last three axes; one value per leading index.

    1 - sum(p gt) / sum(p + gt) - sum((1-p)(1-gt)) / sum(2 - p - gt)

    A denominator that is exactly zero (all-empty or all-full grids) gets
    ``DICE_EPS`` added; nonzero denominators are left untouched so that the
    perfect and inverted predictions give exactly 0 and 1.
    """
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt), dtype=p.dtype)
    if p.shape != gt.shape or p.ndim < 3:
        raise ContractError(f"dice_loss: prediction {p.shape} and target {gt.shape} must match (..., S, S, S)")
    axes = (-3, -2, -1)
    one = ops.constant_like(p, 1.0)
    inter = ops.reduce_sum(ops.mul(p, gt), axes)
    total = ops.reduce_sum(ops.add(p, gt), axes)
    inv_p = ops.sub(one, p)
    inv_gt = ops.sub(one, gt)
    inter_empty = ops.reduce_sum(ops.mul(inv_p, inv_gt), axes)
    total_empty = ops.reduce_sum(ops.add(inv_p, inv_gt), axes)
    ones = ops.constant_like(total, 1.0)
    first = ops.div(inter, ops.add(total, _guard(total.data)))
    second = ops.div(inter_empty, ops.add(total_empty, _guard(total_empty.data)))
    return ops.sub(ops.sub(ones, first), second)


def dice_value(p: np.ndarray, gt: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    first = (p * gt).sum() / _safe((p + gt).sum())
    second = ((1 - p) * (1 - gt)).sum() / _safe((2 - p - gt).sum())
    return float(1.0 - first - second)


def dice_oracle(p: np.ndarray, gt: np.ndarray) -> float:
    """Same loss by explicit triple loop."""
    s = p.shape[0]
    a = b = c = d = 0.0
    for i in range(s):
        for j in range(s):
            for k in range(s):
                pv, gv = float(p[i, j, k]), float(gt[i, j, k])
                a += pv * gv
                b += pv + gv
                c += (1 - pv) * (1 - gv)
                d += 2 - pv - gv
    b = b if b != 0 else DICE_EPS
    d = d if d != 0 else DICE_EPS
    return 1.0 - a / b - c / d


def iou(p: np.ndarray, gt: np.ndarray, t: float = 0.5) -> float:
    """Intersection over union of {p > t} and {gt = 1}; 1.0 when both are empty."""
    pred = np.asarray(p) > t
    target = np.asarray(gt) > 0.5
    if pred.shape != target.shape:
        raise ContractError(f"iou: shapes {pred.shape} and {target.shape} differ")
    union = np.logical_or(pred, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, target).sum() / union)


def iou_oracle(p: np.ndarray, gt: np.ndarray, t: float = 0.5) -> float:
    inter = union = 0
    for pv, gv in zip(np.ravel(p), np.ravel(gt)):
        a, b = float(pv) > t, float(gv) == 1.0
        inter += a and b
        union += a or b
    return 1.0 if union == 0 else inter / union


def exposed_faces(v: np.ndarray) -> np.ndarray:
    """(F, 4) rows of (i, j, k, face) for every exposed face, face in 0..5."""
    occ = np.asarray(v) > 0
    if occ.ndim != 3:
        raise ContractError(f"expected a 3-D grid, got shape {occ.shape}")
    padded = np.pad(occ, 1)
    rows = []
    for face, (axis, side) in enumerate(_FACES):
        shift = [0, 0, 0]
        shift[axis] = 1 if side else -1
        neighbor = padded[
            1 + shift[0] : padded.shape[0] - 1 + shift[0],
            1 + shift[1] : padded.shape[1] - 1 + shift[1],
            1 + shift[2] : padded.shape[2] - 1 + shift[2],
        ]
        idx = np.argwhere(occ & ~neighbor)
        rows.append(np.column_stack([idx, np.full(len(idx), face)]))
    return np.concatenate(rows).astype(np.int64)


def extract_surface_points(v: np.ndarray, m: int = SURFACE_POINTS, seed: int = 0) -> np.ndarray:
    """m points sampled uniformly over the exposed faces, in [0, 1]^3."""
    v = np.asarray(v)
    faces = exposed_faces(v)
    if len(faces) == 0:
        raise ContractError("extract_surface_points: grid has no occupied voxel")
    rng = np.random.default_rng(seed)
    pick = faces[rng.integers(0, len(faces), size=m)]
    uv = rng.random((m, 2))
    pts = pick[:, :3].astype(np.float64)
    for face, (axis, side) in enumerate(_FACES):
        sel = pick[:, 3] == face
        if not sel.any():
            continue
        others = [a for a in range(3) if a != axis]
        pts[sel, axis] += side
        pts[sel, others[0]] += uv[sel, 0]
        pts[sel, others[1]] += uv[sel, 1]
    scale = np.array(v.shape, dtype=np.float64)
    return pts / scale


def _within(src: np.ndarray, dst: np.ndarray, d: float) -> np.ndarray:
    _, nearest = cKDTree(dst).query(src, k=1)
    diff = src - dst[nearest]
    return (diff * diff).sum(axis=1) < d * d


def f_score(r: np.ndarray, g: np.ndarray, d: float = FSCORE_DISTANCE) -> float:
    """Harmonic mean of precision (r near g) and recall (g near r) at distance d."""
    r = np.asarray(r, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if len(r) == 0 or len(g) == 0:
        raise ContractError("f_score: point clouds must be non-empty")
    precision = _within(r, g, d).mean()
    recall = _within(g, r, d).mean()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def f_score_oracle(r: np.ndarray, g: np.ndarray, d: float = FSCORE_DISTANCE) -> float:
    """All-pairs version of :func:`f_score`."""
    r = np.asarray(r, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    diff = r[:, None, :] - g[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    precision = (d2.min(axis=1) < d * d).mean()
    recall = (d2.min(axis=0) < d * d).mean()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def voxel_f_score(pred: np.ndarray, gt: np.ndarray, d: float = FSCORE_DISTANCE, m: int = SURFACE_POINTS, seed: int = 0) -> float:
    """F-Score between two binary grids; 0.0 when the prediction is empty.

    Both surfaces are sampled with the same seed, so identical grids give
    identical clouds.
    """
    if not np.any(pred):
        return 0.0
    return f_score(extract_surface_points(pred, m, seed), extract_surface_points(gt, m, seed), d)
