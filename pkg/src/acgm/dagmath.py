"""Adjacency-matrix algebra for action coordination graphs.

Convention: ``A[j, i] == 1`` means agent ``j`` is a parent of agent ``i``
(row = source, column = target).

The continuous constraints operate on any real ``(d, d)`` matrix, and the
value functions also accept stacks shaped ``(..., d, d)``.
"""
from __future__ import annotations

import heapq
from typing import List, Optional, Set

import numpy as np

SERIES_TOL = 1e-12
MIN_SERIES_TERMS = 32


class CyclicGraphError(ValueError):
    """Raised when an operation requires a DAG but got a cyclic graph."""


def _square(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {m.shape}")
    return m


def _binary(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected square matrix, got shape {a.shape}")
    if not np.all((a == 0) | (a == 1)):
        raise ValueError("adjacency entries must be 0 or 1")
    return a.astype(np.int64)


def check_adjacency(a) -> np.ndarray:
    """Validate a binary adjacency matrix and return it as an int array."""
    a = _binary(a)
    if np.any(np.diag(a) != 0):
        raise ValueError("adjacency matrix must have a zero diagonal")
    return a


# ---------------------------------------------------------------------------
# continuous constraints


def matexp(B) -> np.ndarray:
    """exp(B) by the power series.

    Stops once every entry of the m-th term drops below
    ``1e-12 * max(1, |partial sum|)`` or after ``max(4d, 32)`` terms. For
    nilpotent ``B`` the terms vanish and the result is exact.
    """
    B = _square(B)
    d = B.shape[-1]
    term = np.broadcast_to(np.eye(d), B.shape).copy()
    total = term.copy()
    for m in range(1, max(4 * d, MIN_SERIES_TERMS) + 1):
        term = term @ B / m
        total = total + term
        if np.all(np.abs(term) < SERIES_TOL * np.maximum(1.0, np.abs(total))):
            break
    return total


def matexp_trace(B):
    """trace(exp(B)); a float for one matrix, an array for a stack."""
    out = np.trace(matexp(B), axis1=-2, axis2=-1)
    return float(out) if np.ndim(out) == 0 else out


def acyclicity_value(W):
    """g(W) = trace(exp(W * W)) - d; zero exactly on DAGs for binary W."""
    W = _square(W)
    return matexp_trace(W * W) - W.shape[-1]


def acyclicity_grad(W) -> np.ndarray:
    """Gradient of :func:`acyclicity_value`: ``exp(W*W)^T * 2W`` (Hadamard)."""
    W = _square(W)
    E = matexp(W * W)
    return np.swapaxes(E, -1, -2) * 2.0 * W


def _check_k(k: int) -> int:
    if int(k) != k or k < 1:
        raise ValueError(f"depth bound k must be a positive integer, got {k!r}")
    return int(k)


def depth_value(W, k: int):
    """c(W^k): sum of all entries of the k-th matrix power."""
    W = _square(W)
    k = _check_k(k)
    P = np.linalg.matrix_power(W, k) if W.ndim == 2 else _stack_power(W, k)
    out = P.sum(axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


def _stack_power(W: np.ndarray, k: int) -> np.ndarray:
    P = W
    for _ in range(k - 1):
        P = P @ W
    return P


def depth_grad(W, k: int) -> np.ndarray:
    """Exact gradient of :func:`depth_value`.

    ``sum_{m=0}^{k-1} (W^T)^m J (W^T)^{k-1-m}`` with ``J`` all ones. Valid for
    singular ``W``.
    """
    W = _square(W)
    k = _check_k(k)
    d = W.shape[-1]
    Wt = np.swapaxes(W, -1, -2)
    powers = [np.broadcast_to(np.eye(d), W.shape)]
    for _ in range(k - 1):
        powers.append(powers[-1] @ Wt)
    # (W^T)^m J (W^T)^n = outer(row sums of (W^T)^m, column sums of (W^T)^n)
    rows = [p.sum(axis=-1) for p in powers]
    cols = [p.sum(axis=-2) for p in powers]
    G = np.zeros(W.shape)
    for m in range(k):
        G = G + rows[m][..., :, None] * cols[k - 1 - m][..., None, :]
    return G


# ---------------------------------------------------------------------------
# discrete graph routines


def find_cycle(A) -> Optional[List[int]]:
    """Return one directed cycle as a node list ``[v0, v1, ..., v0]``, or None.

    Iterative DFS with white/grey/black marking; nodes and successors are
    visited in ascending index order so the result is deterministic.
    """
    A = _binary(A)
    d = A.shape[0]
    WHITE, GREY, BLACK = 0, 1, 2
    color = [WHITE] * d
    parent = [-1] * d
    succ = [np.flatnonzero(A[v]).tolist() for v in range(d)]
    for root in range(d):
        if color[root] != WHITE:
            continue
        stack = [(root, 0)]
        color[root] = GREY
        while stack:
            v, idx = stack[-1]
            if idx < len(succ[v]):
                stack[-1] = (v, idx + 1)
                w = succ[v][idx]
                if color[w] == WHITE:
                    color[w] = GREY
                    parent[w] = v
                    stack.append((w, 0))
                elif color[w] == GREY:
                    cycle = [w]
                    u = v
                    while u != w:
                        cycle.append(u)
                        u = parent[u]
                    cycle.append(w)
                    cycle.reverse()
                    return cycle
            else:
                color[v] = BLACK
                stack.pop()
    return None


def is_acyclic(A) -> bool:
    return find_cycle(A) is None


def topological_order(A) -> List[int]:
    """Kahn's algorithm; among ready nodes the lowest index goes first."""
    A = _binary(A)
    d = A.shape[0]
    indeg = A.sum(axis=0).tolist()
    ready = [v for v in range(d) if indeg[v] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        v = heapq.heappop(ready)
        order.append(v)
        for w in np.flatnonzero(A[v]):
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(ready, int(w))
    if len(order) != d:
        raise CyclicGraphError("graph contains a directed cycle")
    return order


def is_topological(A, order) -> bool:
    A = _binary(A)
    d = A.shape[0]
    if sorted(order) != list(range(d)):
        return False
    pos = np.empty(d, dtype=int)
    pos[list(order)] = np.arange(d)
    src, dst = np.nonzero(A)
    return bool(np.all(pos[src] < pos[dst]))


def nilpotent_index(A) -> Optional[int]:
    """Smallest k with A^k = O, or None when no k <= d works."""
    A = _binary(A)
    d = A.shape[0]
    P = np.eye(d, dtype=np.int64)
    for k in range(1, d + 1):
        P = np.minimum(P @ A, 1)  # only the zero pattern matters
        if not P.any():
            return k
    return None


def longest_path_edges(A) -> int:
    """Number of edges on the longest directed path (DP over a topological order)."""
    A = _binary(A)
    order = topological_order(A)
    dist = [0] * A.shape[0]
    for v in order:
        for w in np.flatnonzero(A[v]):
            dist[w] = max(dist[w], dist[v] + 1)
    return max(dist, default=0)


def parents_of(A, i: int) -> Set[int]:
    A = _binary(A)
    if not 0 <= i < A.shape[0]:
        raise ValueError(f"agent index {i} out of range for d={A.shape[0]}")
    return set(np.flatnonzero(A[:, i]).tolist())


def edge_count(A) -> int:
    return int(np.asarray(A).sum())


def random_dag(d: int, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    """Random DAG: upper-triangular Bernoulli(p) edges under a random node relabelling."""
    upper = np.triu(rng.random((d, d)) < p, k=1).astype(np.int64)
    perm = rng.permutation(d)
    return upper[np.ix_(perm, perm)]


# ---------------------------------------------------------------------------
# fixed 10-agent baseline graph (28 edges)

G528 = np.array(
    [
        [0, 1, 0, 1, 0, 1, 1, 0, 1, 0],
        [0, 0, 0, 1, 0, 1, 1, 0, 1, 0],
        [0, 1, 0, 1, 0, 1, 1, 0, 1, 0],
        [0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        [0, 1, 0, 1, 0, 0, 0, 0, 1, 0],
        [0, 0, 0, 1, 0, 0, 0, 0, 1, 0],
        [0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        [0, 1, 0, 1, 0, 1, 1, 0, 1, 0],
        [0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        [0, 1, 0, 1, 0, 1, 0, 0, 1, 0],
    ],
    dtype=np.int64,
)
G528_EDGES = 28
G528_DEPTH_BOUND = 5


def load_g528() -> np.ndarray:
    """The fixed baseline DAG, checked on every load.

    Checks: 28 edges, acyclic, and the depth-5 constraint ``A^5 = O``.
    (Its nilpotent index is 4: the longest path has 3 edges.)
    """
    A = G528.copy()
    if edge_count(A) != G528_EDGES:
        raise AssertionError(f"G528 has {edge_count(A)} edges, expected {G528_EDGES}")
    if not is_acyclic(A):
        raise AssertionError("G528 is cyclic")
    if depth_value(A, G528_DEPTH_BOUND) != 0:
        raise AssertionError("G528 violates its depth bound")
    return A
