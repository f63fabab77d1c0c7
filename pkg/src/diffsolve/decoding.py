"""From reverse diffusion to feasible solutions.

A reverse chain walks the inference schedule from pure noise down to a
clean-data prediction and keeps the final per-variable confidence as a
heatmap (probability of bit 1 for the discrete branch, the rescaled signed
reconstruction for the continuous branch). Greedy decoders then build
feasible solutions: TSP edges are ranked by symmetrized score over distance
and inserted when they keep a valid partial tour; MIS nodes are ranked by
score and inserted when no neighbor was taken. 2-opt refinement and
best-of-k sampling are layered on top.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .denoiser import (DenoiserParams, forward, predict_eps, predict_x0_probs)
from .diffusion import (InferenceSchedule, NoiseSchedule,
                        continuous_reverse_step, discrete_reverse_step)
from .instances import (IndependentSet, MisInstance, SparseGraph, Tour,
                        TspInstance, dense_graph, mis_graph)


@dataclass(eq=False)
class Heatmap:
    """Per-variable confidence scores in [0, 1].

    For TSP one score per directed edge of the sparse graph (aligned with its
    edge arrays); for MIS one score per node.
    """

    task: str
    scores: np.ndarray


def run_reverse_chain(params: DenoiserParams, sched: NoiseSchedule,
                      inf_sched: InferenceSchedule,
                      instance: Union[TspInstance, MisInstance],
                      rng: np.random.Generator, *,
                      graph: Optional[SparseGraph] = None,
                      cont_mode: str = "ddim",
                      denoiser=None) -> Heatmap:
    """Denoise from t = T to 0 along the schedule and return the heatmap.

    One denoiser evaluation per hop. ``denoiser`` may override the network
    with any callable ``(x_t, t) -> per-variable outputs`` (used by tests and
    oracle rigs); it must match the branch's output convention.
    """
    if inf_sched.tau[-1] != sched.T:
        raise ValueError(f"inference schedule ends at {inf_sched.tau[-1]}, "
                         f"noise schedule has T={sched.T}")
    if graph is None:
        if isinstance(instance, TspInstance):
            graph = dense_graph(instance)
        else:
            graph = mis_graph(instance)
    coords = instance.coords if isinstance(instance, TspInstance) else None
    task = "tsp" if isinstance(instance, TspInstance) else "mis"
    n_vars = graph.n_edges if task == "tsp" else graph.n

    if denoiser is None:
        if params.task != task:
            raise ValueError(f"model is for task {params.task!r}, "
                             f"instance is {task!r}")

        def denoiser(x_t, t):
            out, _ = forward(params, graph, x_t, t, coords=coords,
                             train_mode=False)
            return out

    branch = params.branch
    if branch == "discrete":
        x = (rng.random(n_vars) < 0.5).astype(np.int64)
        scores = None
        for t, t_prev in inf_sched.hops():
            x0_probs = predict_x0_probs(denoiser(x, t))
            if t_prev == 0:
                scores = x0_probs[:, 1]
            else:
                x = discrete_reverse_step(x, x0_probs, t_prev, t, sched,
                                          rng, mode="sample")
    else:
        x = rng.standard_normal(n_vars)
        for t, t_prev in inf_sched.hops():
            eps_hat = predict_eps(denoiser(x, t))
            x = continuous_reverse_step(x, eps_hat, t_prev, t, sched,
                                        mode=cont_mode, rng=rng)
        scores = np.clip(0.5 * (x + 1.0), 0.0, 1.0)
    return Heatmap(task=task, scores=scores)


# ---------------------------------------------------------------------------
# TSP decoding


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        self.parent[self.find(a)] = self.find(b)


def ranked_tsp_edges(heatmap: Heatmap, instance: TspInstance,
                     graph: SparseGraph) -> list[tuple[int, int]]:
    """Candidate pairs (i, j), i < j, by descending (A_ij + A_ji) / dist.

    Coincident endpoints rank first; ties break to the lower (i, j).
    """
    index = graph.edge_index()
    iu, ju = graph.undirected_pairs()
    scores = np.empty(iu.shape[0])
    for p, (i, j) in enumerate(zip(iu, ju)):
        scores[p] = (heatmap.scores[index[(int(i), int(j))]]
                     + heatmap.scores[index[(int(j), int(i))]])
    dist = np.linalg.norm(instance.coords[iu] - instance.coords[ju], axis=1)
    with np.errstate(divide="ignore"):
        ratio = np.where(dist > 0.0, scores / np.maximum(dist, 1e-300), np.inf)
    order = np.lexsort((ju, iu, -ratio))
    return [(int(iu[p]), int(ju[p])) for p in order]


def tsp_greedy_decode(heatmap: Heatmap, instance: TspInstance,
                      graph: SparseGraph) -> Tour:
    """Ranked insertion under the degree-2 / no-subcycle rules, then a
    nearest-endpoint fallback to close any remaining gaps.

    The fallback may use edges outside the sparse graph at their true
    Euclidean weight, so decoding always completes.
    """
    n = instance.n
    if heatmap.task != "tsp":
        raise ValueError("heatmap is not a TSP heatmap")
    if heatmap.scores.shape[0] != graph.n_edges:
        raise ValueError("heatmap does not cover the sparse edge set")
    if n == 2:
        return Tour.from_order(instance.coords, [0, 1])

    adj: list[list[int]] = [[] for _ in range(n)]
    deg = [0] * n
    uf = _UnionFind(n)
    added = 0

    def insert(u: int, v: int) -> None:
        nonlocal added
        adj[u].append(v)
        adj[v].append(u)
        deg[u] += 1
        deg[v] += 1
        uf.union(u, v)
        added += 1

    for u, v in ranked_tsp_edges(heatmap, instance, graph):
        if added == n:
            break
        if deg[u] >= 2 or deg[v] >= 2:
            continue
        same = uf.find(u) == uf.find(v)
        if same and added != n - 1:
            continue  # would close a short cycle
        insert(u, v)

    if added < n:
        _close_fragments(instance, adj, deg, uf, insert)
    return Tour.from_order(instance.coords, _walk_cycle(adj, n))


def _close_fragments(instance: TspInstance, adj, deg, uf, insert) -> None:
    """Join open path endpoints greedily by Euclidean distance."""
    n = instance.n
    dist = instance.dist_matrix()
    while True:
        ends = [v for v in range(n) if deg[v] < 2]
        if len(ends) == 2:
            insert(ends[0], ends[1])  # final closing edge
            return
        best = None
        for a in range(len(ends)):
            for b in range(a + 1, len(ends)):
                u, v = ends[a], ends[b]
                if uf.find(u) == uf.find(v):
                    continue
                key = (dist[u, v], u, v)
                if best is None or key < best:
                    best = key
        _, u, v = best
        insert(u, v)


def _walk_cycle(adj: list[list[int]], n: int) -> list[int]:
    order = [0]
    prev = -1
    while len(order) < n:
        here = order[-1]
        nxt = adj[here][0] if adj[here][0] != prev else adj[here][1]
        order.append(nxt)
        prev = here
    return order


def two_opt(tour: Tour, instance: TspInstance, max_passes: int = 100) -> Tour:
    """Best-improvement segment reversal until no move improves the length
    (or the pass cap is hit). Each pass applies the single best move; ties
    break to the lexicographically first position pair."""
    n = len(tour.order)
    if n < 4:
        return Tour.from_order(instance.coords, tour.order)
    dist = instance.dist_matrix()
    order = np.array(tour.order)
    invalid = ~np.triu(np.ones((n, n), dtype=bool), k=1)
    for _ in range(max_passes):
        a = order
        b = np.roll(order, -1)
        d_ab = dist[a, b]
        # gain of replacing edges (a_i, b_i), (a_k, b_k) by (a_i, a_k), (b_i, b_k)
        gain = (d_ab[:, None] + d_ab[None, :]
                - dist[np.ix_(a, a)] - dist[np.ix_(b, b)])
        gain[invalid] = -np.inf
        flat = int(np.argmax(gain))
        i, k = divmod(flat, n)
        if gain[i, k] <= 1e-12:
            break
        order[i + 1:k + 1] = order[i + 1:k + 1][::-1]
    return Tour.from_order(instance.coords, order)


# ---------------------------------------------------------------------------
# MIS decoding


def mis_greedy_decode(heatmap: Heatmap, instance: MisInstance
                      ) -> IndependentSet:
    """Visit nodes by descending score (ties to the lower index); take a node
    when none of its neighbors was taken. No local search afterwards."""
    if heatmap.task != "mis":
        raise ValueError("heatmap is not a MIS heatmap")
    if heatmap.scores.shape[0] != instance.n:
        raise ValueError("heatmap does not cover all nodes")
    order = np.lexsort((np.arange(instance.n), -heatmap.scores))
    neigh = instance.neighbor_lists()
    chosen = np.zeros(instance.n, dtype=bool)
    blocked = np.zeros(instance.n, dtype=bool)
    for v in order:
        if blocked[v]:
            continue
        chosen[v] = True
        for u in neigh[int(v)]:
            blocked[u] = True
    return IndependentSet(nodes=[int(v) for v in np.nonzero(chosen)[0]])


# ---------------------------------------------------------------------------
# end-to-end solving


def decode_heatmap(heatmap: Heatmap,
                   instance: Union[TspInstance, MisInstance],
                   graph: Optional[SparseGraph] = None,
                   use_two_opt: bool = False
                   ) -> Union[Tour, IndependentSet]:
    if isinstance(instance, TspInstance):
        tour = tsp_greedy_decode(heatmap, instance,
                                 graph if graph is not None
                                 else dense_graph(instance))
        if use_two_opt:
            tour = two_opt(tour, instance)
        return tour
    return mis_greedy_decode(heatmap, instance)


def objective(solution: Union[Tour, IndependentSet]) -> float:
    """Scalar to minimize: tour length, or negated set size."""
    if isinstance(solution, Tour):
        return solution.length
    return -float(solution.size)


def multi_sample_solve(params: DenoiserParams,
                       instance: Union[TspInstance, MisInstance],
                       sched: NoiseSchedule, inf_sched: InferenceSchedule,
                       samples: int, seed: int, use_two_opt: bool = True, *,
                       graph: Optional[SparseGraph] = None,
                       cont_mode: str = "ddim", denoiser=None
                       ) -> tuple[Union[Tour, IndependentSet], list]:
    """Best of ``samples`` independent reverse chains.

    Chain k draws from a stream keyed by (seed, k), so enlarging the sample
    set keeps earlier chains identical and the best objective can only
    improve. Returns (best solution, all candidates in chain order).
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if graph is None and isinstance(instance, TspInstance):
        graph = dense_graph(instance)
    if graph is None:
        graph = mis_graph(instance)
    candidates = []
    for k in range(samples):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(k,)))
        heatmap = run_reverse_chain(params, sched, inf_sched, instance, rng,
                                    graph=graph, cont_mode=cont_mode,
                                    denoiser=denoiser)
        candidates.append(decode_heatmap(heatmap, instance, graph,
                                         use_two_opt=use_two_opt))
    best = min(candidates, key=objective)
    return best, candidates
