"""Match batch clusters to memory pseudo-labels by centroid cosine distance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, MappingError


@dataclass
class ClusterMapping:
    assignment: dict  # batch cluster id -> memory pseudo-label
    cost: float

    def __call__(self, cluster_id: int) -> int:
        return self.assignment[cluster_id]


def cosine_distance_matrix(ct, cm, present_t=None, present_m=None) -> np.ndarray:
    """1 - cos(c_i^t, c_j^m); rows/columns of empty centroids are +inf."""
    ct, cm = np.asarray(ct, dtype=float), np.asarray(cm, dtype=float)
    present_t = np.ones(len(ct), bool) if present_t is None else np.asarray(present_t, bool)
    present_m = np.ones(len(cm), bool) if present_m is None else np.asarray(present_m, bool)
    nt = np.linalg.norm(ct, axis=1)
    nm = np.linalg.norm(cm, axis=1)
    if np.any(nt[present_t] == 0) or np.any(nm[present_m] == 0):
        raise MappingError("zero-norm centroid among non-empty clusters")
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = (ct @ cm.T) / np.outer(nt, nm)
    dist = np.clip(1.0 - cos, 0.0, 2.0)
    dist[~present_t, :] = np.inf
    dist[:, ~present_m] = np.inf
    return dist


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column (rows <= cols).

    Shortest augmenting path with potentials, O(n^2 m).  Returns the column
    chosen for each row.
    """
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    if n > m:
        raise ContractError("more rows than columns")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[j] = 1-based row matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            delta, j1 = np.inf, -1
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while True:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
            if j0 == 0:
                break
    cols = np.full(n, -1)
    for j in range(1, m + 1):
        if owner[j]:
            cols[owner[j] - 1] = j - 1
    return cols


def greedy_match(cost: np.ndarray) -> np.ndarray:
    """Repeatedly take the globally cheapest remaining pair (comparison baseline)."""
    cost = np.array(cost, dtype=float)
    n = cost.shape[0]
    cols = np.full(n, -1)
    work = cost.copy()
    for _ in range(n):
        i, j = np.unravel_index(np.argmin(work), work.shape)
        cols[i] = j
        work[i, :] = np.inf
        work[:, j] = np.inf
    return cols


def match_clusters(distances, rows=None, method: str = "optimal") -> ClusterMapping:
    """One-to-one mapping of ``rows`` (default: all rows) onto columns.

    Infinite entries are forbidden pairs.  Raises ``MappingError`` when a row
    has no finite entry or no complete finite matching exists.
    """
    d = np.asarray(distances, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ContractError("distance matrix must be square")
    rows = list(range(d.shape[0])) if rows is None else [int(r) for r in rows]
    if not rows:
        return ClusterMapping({}, 0.0)
    sub = d[rows]
    if np.any(~np.isfinite(sub).any(axis=1)):
        raise MappingError("a cluster has no admissible memory label")
    finite = np.isfinite(sub)
    big = (np.abs(sub[finite]).sum() + 1.0) * (len(rows) + 1)
    work = np.where(finite, sub, big)
    cols = hungarian(work) if method == "optimal" else greedy_match(np.where(finite, sub, np.inf))
    if np.any(cols < 0) or not np.all(finite[np.arange(len(rows)), cols]):
        raise MappingError("no complete one-to-one matching over admissible pairs")
    assignment = {r: int(c) for r, c in zip(rows, cols)}
    cost = 0.0
    for r, c in zip(rows, cols):
        cost += float(d[r, c])
    return ClusterMapping(assignment, cost)


def match_partial(distances, rows, cols) -> ClusterMapping:
    """Optimal one-to-one matching between ``rows`` and ``cols`` of unequal size.

    Only min(len(rows), len(cols)) rows receive a label; the rest are absent
    from the returned assignment.
    """
    d = np.asarray(distances, dtype=float)
    rows, cols = [int(r) for r in rows], [int(c) for c in cols]
    if not rows or not cols:
        return ClusterMapping({}, 0.0)
    sub = d[np.ix_(rows, cols)]
    if not np.all(np.isfinite(sub)):
        raise MappingError("partial matching needs finite distances")
    if len(rows) <= len(cols):
        pairs = [(rows[i], cols[j]) for i, j in enumerate(hungarian(sub))]
    else:
        pairs = sorted((rows[i], cols[j]) for j, i in enumerate(hungarian(sub.T)))
    return ClusterMapping({r: c for r, c in pairs}, float(sum(d[r, c] for r, c in pairs)))


def assign_pseudo_labels(cluster_labels, mapping: ClusterMapping) -> np.ndarray:
    cluster_labels = np.asarray(cluster_labels, dtype=int)
    missing = set(np.unique(cluster_labels).tolist()) - set(mapping.assignment)
    if missing:
        raise MappingError(f"clusters {sorted(missing)} have no mapping")
    return np.array([mapping.assignment[c] for c in cluster_labels], dtype=int)


def merge_with_memory(batch_x, batch_y, memory_x, memory_y) -> tuple[np.ndarray, np.ndarray]:
    """D = D^t followed by D^m."""
    batch_x, memory_x = np.asarray(batch_x), np.asarray(memory_x)
    if len(memory_x) == 0:
        return batch_x, np.asarray(batch_y, dtype=int)
    if len(batch_x) == 0:
        return memory_x, np.asarray(memory_y, dtype=int)
    return (np.concatenate([batch_x, memory_x]),
            np.concatenate([np.asarray(batch_y, dtype=int), np.asarray(memory_y, dtype=int)]))
