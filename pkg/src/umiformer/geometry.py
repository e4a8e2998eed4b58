"""Token similarity: inter-view nearest neighbours and density-peaks clustering.

Both operate on plain numpy arrays (no gradient flows through index
selection). Ties are always broken toward the lower index. The ``*_oracle``
functions recompute the same outputs with explicit loops over all pairs and
exist only to check the vectorized versions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, TextIO

import numpy as np
from scipy.spatial.distance import cdist

from .autodiff.tensor import ContractError


@dataclass
class NeighborIndex:
    """For anchor (v, t), slot (j, r) is the r-th nearest token in the j-th other view.

    Arrays have shape (n, T, n - 1, k). Other views are listed in increasing
    view order, so the flattened ``k * (n - 1)`` neighbour list of an anchor is
    grouped by view, each group sorted by distance.
    """

    k: int
    views: np.ndarray
    tokens: np.ndarray
    sqdist: np.ndarray

    @property
    def n_views(self) -> int:
        return self.views.shape[0]

    @property
    def tokens_per_view(self) -> int:
        return self.views.shape[1]

    @property
    def distances(self) -> np.ndarray:
        return np.sqrt(self.sqdist)

    def flat_indices(self) -> np.ndarray:
        """(n, T, k(n-1)) indices into the view-major flattened token matrix."""
        n, t = self.views.shape[:2]
        return (self.views * t + self.tokens).reshape(n, t, -1)

    def pairs(self, view: int, token: int) -> list[tuple[int, int, float]]:
        v = self.views[view, token].ravel()
        tk = self.tokens[view, token].ravel()
        d = self.sqdist[view, token].ravel()
        return [(int(a), int(b), float(c)) for a, b, c in zip(v, tk, d)]


def _check_knn_args(tokens: np.ndarray, k: int) -> tuple[int, int, int]:
    if tokens.ndim != 3:
        raise ContractError(f"inter_view_knn: tokens must be (views, tokens, dim), got {tokens.shape}")
    n, t, d = tokens.shape
    if n < 2:
        raise ContractError("inter_view_knn: needs at least 2 views (skip the inter-view block for one view)")
    if not 1 <= k <= t:
        raise ContractError(f"inter_view_knn: k={k} must be in [1, {t}]")
    if not np.isfinite(tokens).all():
        raise ContractError("inter_view_knn: non-finite token values")
    return n, t, d


def inter_view_knn(tokens: np.ndarray, k: int) -> NeighborIndex:
    """k nearest tokens (squared Euclidean) in every other view, for every anchor."""
    tokens = np.asarray(tokens, dtype=np.float64)
    n, t, _ = _check_knn_args(tokens, k)
    views = np.empty((n, t, n - 1, k), dtype=np.int64)
    toks = np.empty_like(views)
    sq = np.empty((n, t, n - 1, k))
    for v in range(n):
        others = [u for u in range(n) if u != v]
        for j, u in enumerate(others):
            d2 = cdist(tokens[v], tokens[u], metric="sqeuclidean")
            order = np.argsort(d2, axis=1, kind="stable")[:, :k]
            toks[v, :, j] = order
            views[v, :, j] = u
            sq[v, :, j] = np.take_along_axis(d2, order, axis=1)
    return NeighborIndex(k=k, views=views, tokens=toks, sqdist=sq)


def knn_oracle(tokens: np.ndarray, k: int) -> NeighborIndex:
    tokens = np.asarray(tokens, dtype=np.float64)
    n, t, d = _check_knn_args(tokens, k)
    views = np.empty((n, t, n - 1, k), dtype=np.int64)
    toks = np.empty_like(views)
    sq = np.empty((n, t, n - 1, k))
    for v in range(n):
        for i in range(t):
            j = 0
            for u in range(n):
                if u == v:
                    continue
                cands = []
                for s in range(t):
                    dist = sum((float(tokens[v, i, c]) - float(tokens[u, s, c])) ** 2 for c in range(d))
                    cands.append((dist, s))
                cands.sort()
                for r, (dist, s) in enumerate(cands[:k]):
                    views[v, i, j, r] = u
                    toks[v, i, j, r] = s
                    sq[v, i, j, r] = dist
                j += 1
    return NeighborIndex(k=k, views=views, tokens=toks, sqdist=sq)


@dataclass
class ClusterAssignment:
    """Partition of N tokens into g groups.

    Group ids are ranks of the centers by decision score rho * delta
    (descending, lower token index first on ties), so they do not depend on
    the order in which tokens were listed.
    """

    g: int
    assignment: np.ndarray
    centers: np.ndarray
    rho: np.ndarray
    delta: np.ndarray
    importance: Optional[np.ndarray] = None

    def members(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == group)

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.g)


def _check_dpc_args(x: np.ndarray, k_dpc: int, g: int) -> int:
    if x.ndim != 2:
        raise ContractError(f"dpc_knn_cluster: tokens must be (N, dim), got {x.shape}")
    n = x.shape[0]
    if not 1 <= g <= n:
        raise ContractError(f"dpc_knn_cluster: g={g} must be in [1, {n}]")
    if not 1 <= k_dpc <= n - 1 and not (n == 1 and k_dpc == 0):
        raise ContractError(f"dpc_knn_cluster: k_dpc={k_dpc} must be in [1, {n - 1}]")
    return n


def _finish(x_d2, log_rho, g, importance, n) -> ClusterAssignment:
    # ranking runs on log(rho): exp(-mean d^2) underflows to 0 for tokens a few
    # units apart, which would leave the centers to the index tie-break
    dist = np.sqrt(x_d2)
    higher = log_rho[None, :] > log_rho[:, None]
    masked = np.where(higher, dist, np.inf)
    delta = masked.min(axis=1)
    no_higher = ~higher.any(axis=1)
    delta[no_higher] = dist[no_higher].max(axis=1) if n > 1 else 0.0
    with np.errstate(divide="ignore"):
        score = log_rho + np.log(delta)
    order = np.lexsort((np.arange(n), -score))
    centers = order[:g]
    # nearest center, ties to the lower token index
    by_index = np.argsort(centers, kind="stable")
    d_centers = x_d2[:, centers[by_index]]
    nearest = by_index[np.argmin(d_centers, axis=1)]
    assignment = nearest.astype(np.int64)
    assignment[centers] = np.arange(g)
    return ClusterAssignment(
        g=g,
        assignment=assignment,
        centers=centers.astype(np.int64),
        rho=np.exp(log_rho),
        delta=delta,
        importance=None if importance is None else np.asarray(importance, dtype=np.float64),
    )


def dpc_knn_cluster(x: np.ndarray, k_dpc: int, g: int, importance: Optional[np.ndarray] = None) -> ClusterAssignment:
    """Density-peaks clustering with KNN density.

    rho_i = exp(-mean of the k_dpc smallest squared distances to other tokens),
    delta_i = distance to the nearest token of strictly higher rho (for tokens
    with no such token: the largest distance to any token). The g tokens with
    the largest rho * delta become centers; every other token joins its
    nearest center.
    """
    x = np.asarray(x, dtype=np.float64)
    n = _check_dpc_args(x, k_dpc, g)
    d2 = cdist(x, x, metric="sqeuclidean")
    if n > 1:
        off = d2.copy()
        np.fill_diagonal(off, np.inf)
        nearest = np.sort(off, axis=1)[:, :k_dpc]
        log_rho = -nearest.mean(axis=1)
    else:
        log_rho = np.zeros(1)
    return _finish(d2, log_rho, g, importance, n)


def dpc_oracle(x: np.ndarray, k_dpc: int, g: int, importance: Optional[np.ndarray] = None) -> ClusterAssignment:
    x = np.asarray(x, dtype=np.float64)
    n = _check_dpc_args(x, k_dpc, g)
    dim = x.shape[1]
    d2 = [[math.fsum((float(x[i, c]) - float(x[j, c])) ** 2 for c in range(dim)) for j in range(n)] for i in range(n)]
    log_rho = []
    for i in range(n):
        others = sorted(d2[i][j] for j in range(n) if j != i)
        log_rho.append(-math.fsum(others[:k_dpc]) / k_dpc if n > 1 else 0.0)
    delta = []
    for i in range(n):
        higher = [math.sqrt(d2[i][j]) for j in range(n) if log_rho[j] > log_rho[i]]
        delta.append(min(higher) if higher else max(math.sqrt(d2[i][j]) for j in range(n)))
    score = [log_rho[i] + math.log(delta[i]) if delta[i] > 0 else -math.inf for i in range(n)]
    ranked = sorted(range(n), key=lambda i: (-score[i], i))
    centers = ranked[:g]
    assignment = []
    for i in range(n):
        if i in centers:
            assignment.append(centers.index(i))
            continue
        best = min(range(g), key=lambda c: (d2[i][centers[c]], centers[c]))
        assignment.append(best)
    return ClusterAssignment(
        g=g,
        assignment=np.array(assignment, dtype=np.int64),
        centers=np.array(centers, dtype=np.int64),
        rho=np.array([math.exp(v) for v in log_rho]),
        delta=np.array(delta),
        importance=None if importance is None else np.asarray(importance, dtype=np.float64),
    )


def write_neighbor_csv(stream: TextIO, index: NeighborIndex, stage: Optional[int] = None) -> int:
    """One row per (anchor, neighbour) pair with the true Euclidean distance. Returns rows written."""
    writer = csv.writer(stream, lineterminator="\r\n")
    head = ["anchor_view", "anchor_token", "neighbor_view", "neighbor_token", "distance"]
    writer.writerow((["stage"] if stage is not None else []) + head)
    n, t = index.views.shape[:2]
    dist = index.distances
    rows = 0
    for v in range(n):
        for i in range(t):
            for j in range(n - 1):
                for r in range(index.k):
                    row = [v, i, int(index.views[v, i, j, r]), int(index.tokens[v, i, j, r]), repr(float(dist[v, i, j, r]))]
                    writer.writerow(([stage] if stage is not None else []) + row)
                    rows += 1
    return rows


def write_cluster_csv(stream: TextIO, clusters: ClusterAssignment, tokens_per_view: Optional[int] = None, grid: Optional[int] = None) -> int:
    """One row per token: group, rho, delta, importance (and view/row/col when the grid is given)."""
    writer = csv.writer(stream, lineterminator="\r\n")
    spatial = tokens_per_view is not None and grid is not None
    head = ["token", "group", "rho", "delta", "importance"]
    writer.writerow(head + (["view", "row", "col"] if spatial else []))
    imp = clusters.importance if clusters.importance is not None else np.zeros(len(clusters.assignment))
    for i, gid in enumerate(clusters.assignment):
        row = [i, int(gid), repr(float(clusters.rho[i])), repr(float(clusters.delta[i])), repr(float(imp[i]))]
        if spatial:
            view, pos = divmod(i, tokens_per_view)
            row += [view, pos // grid, pos % grid]
        writer.writerow(row)
    return len(clusters.assignment)
