"""Shared graph plumbing over bond matrices.

Adjacency views, connected components, a deterministic smallest-cycle basis,
and the iterative neighborhood-refinement (WL-style) labeling used for both
motif signatures and whole-molecule canonical hashes.
"""

from __future__ import annotations

import hashlib
from collections import deque

import numpy as np


def adjacency_lists(bonds: np.ndarray) -> list[list[int]]:
    """Sorted neighbor lists for every atom (bond type >= 1)."""
    n = bonds.shape[0]
    return [sorted(np.nonzero(bonds[i] > 0)[0].tolist()) for i in range(n)]


def connected_components(bonds: np.ndarray, subset: list[int] | None = None) -> list[list[int]]:
    """Connected components of the bond graph, optionally restricted to a subset.

    Components are sorted by smallest member; members are sorted.
    """
    n = bonds.shape[0]
    nodes = sorted(subset) if subset is not None else list(range(n))
    node_set = set(nodes)
    seen: set[int] = set()
    comps = []
    for start in nodes:
        if start in seen:
            continue
        comp = []
        queue = deque([start])
        seen.add(start)
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v in np.nonzero(bonds[u] > 0)[0]:
                v = int(v)
                if v in node_set and v not in seen:
                    seen.add(v)
                    queue.append(v)
        comps.append(sorted(comp))
    return comps


def _shortest_path(adj: list[list[int]], src: int, dst: int,
                   banned_edge: tuple[int, int]) -> list[int] | None:
    """BFS shortest path src -> dst avoiding one edge; None if unreachable."""
    prev = {src: -1}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        if u == dst:
            break
        for v in adj[u]:
            if (u, v) == banned_edge or (v, u) == banned_edge:
                continue
            if v not in prev:
                prev[v] = u
                queue.append(v)
    if dst not in prev:
        return None
    path = [dst]
    while path[-1] != src:
        path.append(prev[path[-1]])
    return path[::-1]


def _cycle_edge_ids(cycle: list[int], edge_id: dict[tuple[int, int], int]) -> frozenset[int]:
    ids = []
    for a, b in zip(cycle, cycle[1:] + cycle[:1]):
        ids.append(edge_id[(a, b) if a < b else (b, a)])
    return frozenset(ids)


def cycle_basis(bonds: np.ndarray) -> list[list[int]]:
    """Smallest-cycle basis of the bond graph as ordered atom cycles.

    Candidate cycles are the shortest cycle through each edge (BFS on the
    graph minus that edge); candidates are taken in (length, atom tuple)
    order and kept while independent over GF(2) edge space.  BFS-tree
    fundamental cycles top up the basis if the candidates do not reach the
    full cycle-space rank.  Deterministic for a fixed input.
    """
    n = bonds.shape[0]
    adj = adjacency_lists(bonds)
    edges = [(i, int(j)) for i in range(n) for j in np.nonzero(bonds[i] > 0)[0] if i < j]
    edge_id = {e: k for k, e in enumerate(edges)}
    n_comp = len(connected_components(bonds))
    rank = len(edges) - n + n_comp
    if rank <= 0:
        return []

    candidates = []
    for (u, v) in edges:
        path = _shortest_path(adj, u, v, banned_edge=(u, v))
        if path is not None:
            candidates.append(path)
    # fundamental cycles from a BFS forest guarantee a full-rank candidate set
    parent: dict[int, int] = {}
    order: dict[int, int] = {}
    for start in range(n):
        if start in order:
            continue
        parent[start] = -1
        order[start] = len(order)
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in order:
                    parent[v] = u
                    order[v] = len(order)
                    queue.append(v)
    for (u, v) in edges:
        if parent.get(v) == u or parent.get(u) == v:
            continue
        up_u, up_v = [u], [v]
        while up_u[-1] != -1:
            up_u.append(parent[up_u[-1]])
        while up_v[-1] != -1:
            up_v.append(parent[up_v[-1]])
        common = set(up_u) & set(up_v)
        lca = next(x for x in up_u if x in common)
        path_u = up_u[:up_u.index(lca) + 1]
        path_v = up_v[:up_v.index(lca)]
        candidates.append(path_u + path_v[::-1])

    def sort_key(cycle):
        return (len(cycle), tuple(sorted(cycle)), tuple(cycle))

    basis: list[list[int]] = []
    pivots: dict[int, int] = {}  # lowest set bit -> reduced bitmask
    seen: set[frozenset[int]] = set()
    for cycle in sorted(candidates, key=sort_key):
        eids = _cycle_edge_ids(cycle, edge_id)
        if eids in seen:
            continue
        seen.add(eids)
        mask = 0
        for k in eids:
            mask |= 1 << k
        while mask:
            low = mask & -mask
            other = pivots.get(low)
            if other is None:
                break
            mask ^= other
        if mask:
            pivots[mask & -mask] = mask
            basis.append(cycle)
            if len(basis) == rank:
                break
    return basis


# ---------------------------------------------------------------------------
# iterative neighborhood refinement


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def wl_refine(bonds: np.ndarray, seeds: list[str], rounds: int) -> list[str]:
    """Iteratively refine per-atom labels by hashing sorted neighbor labels.

    ``seeds`` are the initial labels; each round appends every bonded
    neighbor's (bond type, label) in sorted order and re-hashes.
    """
    labels = [_digest(s) for s in seeds]
    n = bonds.shape[0]
    neighbors = [
        [(int(bonds[i, j]), int(j)) for j in np.nonzero(bonds[i] > 0)[0]]
        for i in range(n)
    ]
    for _ in range(rounds):
        labels = [
            _digest(labels[i] + "|" + ";".join(
                sorted(f"{k}:{labels[j]}" for k, j in neighbors[i])))
            for i in range(n)
        ]
    return labels


def wl_hash(bonds: np.ndarray, seeds: list[str], rounds: int | None = None) -> str:
    """Digest of the sorted refined-label multiset (permutation invariant)."""
    n = bonds.shape[0]
    if rounds is None:
        rounds = n
    labels = wl_refine(bonds, seeds, rounds)
    return _digest(f"n={n}|" + ",".join(sorted(labels)))
