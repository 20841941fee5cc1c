"""Closed walks covering every edge of a weighted multigraph (route inspection)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components, shortest_path

from ..errors import ValidationError

EXACT_ODD_LIMIT = 14


@dataclass
class Tour:
    walk: list[int]  # visited vertices, first == last
    edges: list[int]  # index into the input edge list per step
    length: float
    base_length: float
    duplicated: list[int] = field(default_factory=list)  # input edges traversed twice or more
    optimal: bool = True

    def to_dict(self) -> dict:
        return {"walk": self.walk, "edges": self.edges, "length": self.length, "base_length": self.base_length,
                "duplicated": self.duplicated, "optimal": self.optimal}


def _check(n: int, edges: list[tuple[int, int, float]]) -> None:
    for u, v, w in edges:
        if not (0 <= u < n and 0 <= v < n):
            raise ValidationError(f"edge ({u}, {v}) references a missing vertex")
        if not w > 0:
            raise ValidationError("edge weights must be positive")
    if n > 1:
        adj = _adjacency(n, edges)
        if connected_components(adj, directed=False)[0] != 1:
            raise ValidationError("graph is disconnected")


def _adjacency(n: int, edges) -> sparse.csr_matrix:
    """Cheapest parallel edge per vertex pair; self loops never shorten a path."""
    best: dict[tuple[int, int], float] = {}
    for u, v, w in edges:
        if u == v:
            continue
        key = (min(u, v), max(u, v))
        best[key] = min(best.get(key, math.inf), w)
    if not best:
        return sparse.csr_matrix((n, n))
    keys = np.array(list(best), dtype=np.int64)
    vals = np.array(list(best.values()))
    return sparse.csr_matrix((vals, (keys[:, 0], keys[:, 1])), shape=(n, n))


def min_pairing(odd: list[int], dist: np.ndarray) -> tuple[list[tuple[int, int]], bool]:
    """Minimum-weight perfect pairing of ``odd`` vertices under ``dist``.

    Exact bitmask DP (always pairing the lowest unpaired vertex) up to
    EXACT_ODD_LIMIT vertices, greedy closest-pair above; the flag says which.
    """
    m = len(odd)
    if m == 0:
        return [], True
    if m > EXACT_ODD_LIMIT:
        left = list(odd)
        pairs = []
        while left:
            best = min(((dist[a, b], i, j) for i, a in enumerate(left) for j, b in enumerate(left) if i < j))
            _, i, j = best
            pairs.append((left[i], left[j]))
            left = [x for k, x in enumerate(left) if k not in (i, j)]
        return pairs, False
    full = (1 << m) - 1
    cost = [math.inf] * (1 << m)
    choice = [(-1, -1)] * (1 << m)
    cost[0] = 0.0
    for mask in range(1 << m):
        if cost[mask] == math.inf:
            continue
        free = [i for i in range(m) if not mask >> i & 1]
        if not free:
            continue
        i = free[0]
        for j in free[1:]:
            nm = mask | 1 << i | 1 << j
            c = cost[mask] + dist[odd[i], odd[j]]
            if c < cost[nm]:
                cost[nm] = c
                choice[nm] = (i, j)
    pairs = []
    mask = full
    while mask:
        i, j = choice[mask]
        pairs.append((odd[i], odd[j]))
        mask &= ~(1 << i | 1 << j)
    return pairs[::-1], True


def _path(pred: np.ndarray, a: int, b: int) -> list[int]:
    out = [b]
    while out[-1] != a:
        out.append(int(pred[a, out[-1]]))
    return out[::-1]


def chinese_postman(n: int, edges: list[tuple[int, int, float]], start: int | None = None) -> Tour:
    """Shortest closed walk over ``n`` vertices traversing every edge at least once."""
    _check(n, edges)
    base = float(sum(w for _, _, w in edges))
    if not edges:
        v = 0 if start is None else start
        return Tour([v] if n else [], [], 0.0, 0.0)
    deg = np.zeros(n, dtype=np.int64)
    for u, v, _ in edges:
        deg[u] += 1
        deg[v] += 1
    odd = [int(v) for v in np.flatnonzero(deg % 2)]
    dist, pred = shortest_path(_adjacency(n, edges), directed=False, return_predecessors=True)
    pairs, optimal = min_pairing(odd, dist)
    cheapest: dict[tuple[int, int], int] = {}
    for k, (u, v, w) in enumerate(edges):
        key = (min(u, v), max(u, v))
        if key not in cheapest or w < edges[cheapest[key]][2]:
            cheapest[key] = k
    multi = list(range(len(edges)))
    for a, b in pairs:
        p = _path(pred, a, b)
        multi += [cheapest[(min(x, y), max(x, y))] for x, y in zip(p, p[1:])]
    walk, used = _euler_circuit(edges, multi, edges[0][0] if start is None else start)
    counts = np.bincount(used, minlength=len(edges))
    return Tour(walk, used, float(sum(edges[k][2] for k in used)), base,
                [int(k) for k in np.flatnonzero(counts > 1)], optimal)


def _euler_circuit(edges, multi: list[int], start: int) -> tuple[list[int], list[int]]:
    """Hierholzer on the multiset ``multi`` of edge indices; neighbours taken in insertion order."""
    inc: dict[int, list[tuple[int, int]]] = {}
    for slot, k in enumerate(multi):
        u, v, _ = edges[k]
        inc.setdefault(u, []).append((slot, v))
        if u != v:
            inc.setdefault(v, []).append((slot, u))
    if start not in inc:
        raise ValidationError(f"start vertex {start} has no edges")
    ptr = {v: 0 for v in inc}
    done = [False] * len(multi)
    stack = [(start, -1)]
    walk, used = [], []
    while stack:
        v, via = stack[-1]
        lst = inc[v]
        while ptr[v] < len(lst) and done[lst[ptr[v]][0]]:
            ptr[v] += 1
        if ptr[v] == len(lst):
            stack.pop()
            walk.append(v)
            if via >= 0:
                used.append(multi[via])
        else:
            slot, w = lst[ptr[v]]
            done[slot] = True
            stack.append((w, slot))
    return walk[::-1], used[::-1]
