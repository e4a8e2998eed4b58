"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), with a tiny floor so all-zero gradients compare as equal."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(
    loss_fn: Callable[[], Tensor],
    t: Tensor,
    coords: Optional[Sequence[int]] = None,
    rel_step: float = 1e-6,
) -> np.ndarray:
    """d loss / d t at flat ``coords`` (all when None) with step ``rel_step * max(1, |x|)``."""
    flat = t.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(len(coords))
    for j, i in enumerate(coords):
        orig = flat[i]
        h = rel_step * max(1.0, abs(float(orig)))
        flat[i] = orig + h
        plus = loss_fn().item()
        flat[i] = orig - h
        minus = loss_fn().item()
        flat[i] = orig
        out[j] = (plus - minus) / (2 * h)
    return out


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Relative error between backward() and finite differences, pooled over ``tensors``.

    ``loss_fn`` must rebuild the graph from the current tensor data on every call.
    With ``max_coords`` each tensor is probed at that many random entries.
    """
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    rng = rng or np.random.default_rng(0)
    picked_a, picked_n = [], []
    for t, a in zip(tensors, analytic):
        size = t.data.size
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        else:
            coords = np.arange(size)
        picked_n.append(numeric_grad(loss_fn, t, coords))
        picked_a.append(a.reshape(-1)[coords])
    return relative_error(np.concatenate(picked_a), np.concatenate(picked_n))
