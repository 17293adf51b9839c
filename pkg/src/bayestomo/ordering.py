"""Approximate minimum degree ordering on a quotient graph.

Variables are eliminated greedily by smallest approximate external degree.
Eliminated variables become *elements*; a variable's adjacency is kept as a
set of still-uncovered variable neighbours plus a set of adjacent elements,
so the explicit elimination graph (and its fill) is never formed. Element
absorption keeps the element lists short. Degree ties go to the lowest
index, which makes the ordering deterministic.
"""

from __future__ import annotations

import heapq

import numpy as np


def approximate_minimum_degree(n: int, adjacency: list[set[int]]) -> np.ndarray:
    """Return an elimination order (``order[k]`` = k-th eliminated node).

    ``adjacency[i]`` holds the off-diagonal neighbours of node ``i`` in a
    structurally symmetric pattern. The input sets are not modified.
    """
    var_adj = [set(a) for a in adjacency]
    for i in range(n):
        var_adj[i].discard(i)
    elem_adj: list[set[int]] = [set() for _ in range(n)]
    members: dict[int, set[int]] = {}
    degree = [len(a) for a in var_adj]
    alive = np.ones(n, dtype=bool)
    heap = [(degree[i], i) for i in range(n)]
    heapq.heapify(heap)
    order = np.empty(n, dtype=np.int64)
    n_alive = n

    for k in range(n):
        while True:
            d, p = heapq.heappop(heap)
            if alive[p] and d == degree[p]:
                break
        alive[p] = False
        n_alive -= 1
        order[k] = p

        pivot_set = set(var_adj[p])
        for e in elem_adj[p]:
            pivot_set |= members.pop(e)
        pivot_set.discard(p)
        absorbed = elem_adj[p]
        var_adj[p] = set()
        elem_adj[p] = set()
        members[p] = pivot_set

        counts: dict[int, int] = {}
        for i in pivot_set:
            a = var_adj[i]
            a -= pivot_set
            a.discard(p)
            ei = elem_adj[i]
            ei -= absorbed
            for e in ei:
                counts[e] = counts.get(e, 0) + 1
            ei.add(p)

        # external size |L_e \ L_p| of every element touching the pivot set
        external = {e: len(members[e]) - c for e, c in counts.items()}
        for e, ext in external.items():
            if ext == 0:
                # aggressive absorption: L_e is contained in L_p
                for i in members.pop(e):
                    elem_adj[i].discard(e)

        lp = len(pivot_set)
        for i in pivot_set:
            bound = len(var_adj[i]) + lp - 1
            for e in elem_adj[i]:
                if e != p:
                    bound += external[e]
            d_new = min(n_alive - 1, degree[i] + lp - 1, bound)
            if d_new != degree[i]:
                degree[i] = d_new
            heapq.heappush(heap, (degree[i], i))
    return order
