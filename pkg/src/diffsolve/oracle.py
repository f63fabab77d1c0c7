"""Reference solvers used to label training data and measure gaps.

The exact solvers are a bitmask dynamic program for TSP (n <= 20) and a
branch-and-bound for MIS (n <= 60); both report ``exact=True``. The heuristic
solvers (nearest-neighbor + 2-opt, min-degree greedy) cover larger inputs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Union

import numpy as np

from .decoding import two_opt
from .instances import IndependentSet, MisInstance, Tour, TspInstance

TSP_EXACT_MAX_N = 20
MIS_EXACT_MAX_N = 60


@dataclass
class OracleReport:
    solution: Union[Tour, IndependentSet]
    exact: bool
    runtime: float


def solve_tsp_exact(instance: TspInstance) -> OracleReport:
    """Provably optimal tour via the Held-Karp subset dynamic program.

    Memory and time grow as O(2^n * n); refuses n above TSP_EXACT_MAX_N.
    """
    n = instance.n
    if n > TSP_EXACT_MAX_N:
        raise ValueError(
            f"exact TSP solver is capped at n <= {TSP_EXACT_MAX_N} (got n={n}); "
            "use solve_tsp_heuristic for larger instances"
        )
    start = time.perf_counter()
    if n == 2:
        tour = Tour.from_order(instance.coords, [0, 1])
        return OracleReport(tour, True, time.perf_counter() - start)

    dist = instance.dist_matrix()
    size = 1 << n
    dp = np.full((size, n), np.inf)
    parent = np.full((size, n), -1, dtype=np.int8)
    for j in range(1, n):
        dp[(1 << j) | 1, j] = dist[0, j]

    # dp[mask, j]: shortest path 0 -> j visiting exactly the nodes in mask.
    for mask in range(3, size, 2):  # masks containing node 0
        members = [j for j in range(1, n) if mask & (1 << j)]
        if len(members) < 2:
            continue
        mem = np.array(members)
        # cand[a, b] = dp[mask without j_a, ending at k_b] + dist[k_b, j_a]
        prev_masks = mask ^ (1 << mem)
        cand = dp[prev_masks][:, mem] + dist[np.ix_(mem, mem)].T
        best = np.argmin(cand, axis=1)
        rows = np.arange(len(members))
        dp[mask, mem] = cand[rows, best]
        parent[mask, mem] = mem[best]

    full = size - 1
    closing = dp[full, 1:] + dist[1:, 0]
    last = 1 + int(np.argmin(closing))
    order = [last]
    mask = full
    while parent[mask, order[-1]] >= 0:
        nxt = int(parent[mask, order[-1]])
        mask ^= 1 << order[-1]
        order.append(nxt)
    order.append(0)
    order.reverse()
    tour = Tour.from_order(instance.coords, order)
    return OracleReport(tour, True, time.perf_counter() - start)


def _nearest_neighbor_order(dist: np.ndarray, start: int) -> list[int]:
    n = dist.shape[0]
    visited = np.zeros(n, dtype=bool)
    order = [start]
    visited[start] = True
    for _ in range(n - 1):
        d = dist[order[-1]].copy()
        d[visited] = np.inf
        nxt = int(np.argmin(d))
        order.append(nxt)
        visited[nxt] = True
    return order


def solve_tsp_heuristic(instance: TspInstance, restarts: int = 10,
                        seed: int = 0) -> OracleReport:
    """Best of several nearest-neighbor tours, each refined to a 2-opt optimum."""
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    starts = rng.permutation(instance.n)
    if restarts > instance.n:
        starts = np.concatenate([starts] * (restarts // instance.n + 1))
    dist = instance.dist_matrix()
    best: Tour | None = None
    for s in starts[:restarts]:
        tour = Tour.from_order(instance.coords, _nearest_neighbor_order(dist, int(s)))
        tour = two_opt(tour, instance, max_passes=10_000)
        if best is None or tour.length < best.length:
            best = tour
    assert best is not None
    return OracleReport(best, False, time.perf_counter() - start)


def solve_mis_exact(instance: MisInstance) -> OracleReport:
    """Maximum independent set by branch and bound over neighbor bitmasks.

    Branches on the highest-degree remaining vertex; vertices of degree <= 1
    are always taken (a maximum solution never loses by including them).
    """
    n = instance.n
    if n > MIS_EXACT_MAX_N:
        raise ValueError(
            f"exact MIS solver is capped at n <= {MIS_EXACT_MAX_N} (got n={n}); "
            "use solve_mis_heuristic for larger instances"
        )
    start = time.perf_counter()
    adj = instance.adjacency_masks()
    best_size = 0
    best_nodes = 0

    def bb(avail: int, chosen: int, size: int) -> None:
        nonlocal best_size, best_nodes
        while avail:
            remaining = avail.bit_count()
            if size + remaining <= best_size:
                return
            # pick the max-degree vertex within the remaining subgraph
            pick, pick_deg = -1, -1
            m = avail
            while m:
                v = (m & -m).bit_length() - 1
                m &= m - 1
                deg = (adj[v] & avail).bit_count()
                if deg > pick_deg:
                    pick, pick_deg = v, deg
            if pick_deg <= 1:
                # degree <= 1: including the vertex is never worse
                avail &= ~((adj[pick] & avail) | (1 << pick))
                chosen |= 1 << pick
                size += 1
                continue
            bb(avail & ~(adj[pick] | (1 << pick)), chosen | (1 << pick), size + 1)
            avail &= ~(1 << pick)
        if size > best_size:
            best_size, best_nodes = size, chosen

    bb((1 << n) - 1, 0, 0)
    nodes = [v for v in range(n) if best_nodes & (1 << v)]
    report = OracleReport(IndependentSet(nodes=nodes), True,
                          time.perf_counter() - start)
    report.solution.validate(instance)
    return report


def solve_mis_heuristic(instance: MisInstance, seed: int = 0) -> OracleReport:
    """Maximal independent set by min-degree greedy; ties broken at random
    (deterministically under ``seed``)."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    n = instance.n
    alive = np.ones(n, dtype=bool)
    degree = np.zeros(n, dtype=np.int64)
    neigh = instance.neighbor_lists()
    for u, ns in enumerate(neigh):
        degree[u] = len(ns)
    chosen: list[int] = []
    remaining = n
    while remaining > 0:
        deg = np.where(alive, degree, np.iinfo(np.int64).max)
        lo = deg.min()
        candidates = np.nonzero(deg == lo)[0]
        v = int(rng.choice(candidates))
        chosen.append(v)
        removed = [v] + [u for u in neigh[v] if alive[u]]
        for u in removed:
            alive[u] = False
            remaining -= 1
            for w in neigh[u]:
                if alive[w]:
                    degree[w] -= 1
    solution = IndependentSet(nodes=sorted(chosen))
    solution.validate(instance)
    return OracleReport(solution, False, time.perf_counter() - start)


def label_tsp(instance: TspInstance, seed: int = 0) -> Tour:
    """Exact label when within the DP cap, heuristic otherwise."""
    if instance.n <= TSP_EXACT_MAX_N:
        return solve_tsp_exact(instance).solution
    return solve_tsp_heuristic(instance, restarts=10, seed=seed).solution


def label_mis(instance: MisInstance, seed: int = 0) -> IndependentSet:
    if instance.n <= MIS_EXACT_MAX_N:
        return solve_mis_exact(instance).solution
    return solve_mis_heuristic(instance, seed=seed).solution
