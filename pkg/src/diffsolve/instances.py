"""Problem instances: generation, sparsification, and plain-text serialization.

Two problem families are supported:

* Euclidean TSP on points in the unit square (solution = a tour).
* Maximal independent set on an undirected graph (solution = a node subset).

Instance files are line oriented, one instance per line:

    tsp <n> <x1> <y1> ... <xn> <yn> [sol <i1> ... <in>]
    mis <n> <m> <u1> <v1> ... <um> <vm> [sol <i1> ... <ik>]

The optional ``sol`` block carries the label (a node permutation for TSP, a
node subset for MIS). All numbers are decimal, space separated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np


class ParseError(ValueError):
    """Raised when an instance file cannot be parsed; names the bad line."""


def tour_length(coords: np.ndarray, order: Sequence[int]) -> float:
    """Length of the cyclic tour visiting ``order``, including the return edge."""
    pts = np.asarray(coords, dtype=float)[list(order)]
    return float(np.linalg.norm(pts - np.roll(pts, -1, axis=0), axis=1).sum())


@dataclass
class Tour:
    """A cyclic permutation of node indices with its Euclidean length."""

    order: list[int]
    length: float

    @classmethod
    def from_order(cls, coords: np.ndarray, order: Sequence[int]) -> "Tour":
        return cls(order=[int(i) for i in order], length=tour_length(coords, order))

    def validate(self, instance: "TspInstance", tol: float = 1e-9) -> None:
        """Check the tour invariants against its instance; raise on violation."""
        if sorted(self.order) != list(range(instance.n)):
            raise ValueError("tour is not a permutation of all nodes")
        recomputed = tour_length(instance.coords, self.order)
        if abs(recomputed - self.length) > tol:
            raise ValueError(
                f"stored tour length {self.length} != recomputed {recomputed}"
            )


@dataclass
class IndependentSet:
    """A subset of nodes, no two of which may be adjacent."""

    nodes: list[int]

    @property
    def size(self) -> int:
        return len(self.nodes)

    def validate(self, instance: "MisInstance") -> None:
        members = set(self.nodes)
        if len(members) != len(self.nodes):
            raise ValueError("independent set contains duplicate nodes")
        if members and (min(members) < 0 or max(members) >= instance.n):
            raise ValueError("independent set references an unknown node")
        for u, v in instance.edges:
            if u in members and v in members:
                raise ValueError(f"nodes {u} and {v} are adjacent")


@dataclass(eq=False)
class TspInstance:
    """A set of points in the unit square with all-pairs Euclidean edges."""

    n: int
    coords: np.ndarray  # (n, 2) float64 in [0, 1]^2
    id: str = ""
    label: Optional[Tour] = None
    _dist: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def dist_matrix(self) -> np.ndarray:
        if self._dist is None:
            diff = self.coords[:, None, :] - self.coords[None, :, :]
            self._dist = np.sqrt((diff * diff).sum(axis=2))
        return self._dist

    def edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Dense candidate edge list (i, j, weight) over all pairs i < j."""
        i, j = np.triu_indices(self.n, k=1)
        return i, j, self.dist_matrix()[i, j]


@dataclass(eq=False)
class MisInstance:
    """An undirected simple graph; edges stored once with u < v."""

    n: int
    edges: np.ndarray  # (m, 2) int64, u < v, no duplicates, no self-loops
    id: str = ""
    label: Optional[IndependentSet] = None

    def neighbor_lists(self) -> list[list[int]]:
        neigh: list[list[int]] = [[] for _ in range(self.n)]
        for u, v in self.edges:
            neigh[int(u)].append(int(v))
            neigh[int(v)].append(int(u))
        return [sorted(ns) for ns in neigh]

    def adjacency_masks(self) -> list[int]:
        """Per-node neighbor bitmask; only sensible for small n."""
        masks = [0] * self.n
        for u, v in self.edges:
            masks[int(u)] |= 1 << int(v)
            masks[int(v)] |= 1 << int(u)
        return masks


@dataclass(eq=False)
class SparseGraph:
    """Directed candidate-edge graph consumed by the denoiser and decoders.

    Built either by k-nearest-neighbor sparsification of a TSP instance
    (symmetrized: edge (i, j) is kept iff j is among i's k nearest or vice
    versa) or directly from a MIS instance's adjacency. Directed edges are
    sorted by (src, dst), which fixes the variable order everywhere.
    """

    n: int
    src: np.ndarray  # (E,) int64
    dst: np.ndarray  # (E,) int64
    weight: np.ndarray  # (E,) float64
    k: int = 0  # sparsification parameter; 0 when not built by k-NN
    _index: Optional[dict] = field(default=None, repr=False, compare=False)

    @property
    def n_edges(self) -> int:
        return int(self.src.shape[0])

    def edge_index(self) -> dict:
        """Map (src, dst) -> position in the directed edge arrays."""
        if self._index is None:
            self._index = {
                (int(s), int(d)): e
                for e, (s, d) in enumerate(zip(self.src, self.dst))
            }
        return self._index

    def undirected_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique (i, j) with i < j present in either direction."""
        lo = np.minimum(self.src, self.dst)
        hi = np.maximum(self.src, self.dst)
        pairs = np.unique(np.stack([lo, hi], axis=1), axis=0)
        return pairs[:, 0], pairs[:, 1]


def generate_tsp(n: int, seed: int) -> TspInstance:
    """Sample ``n`` points i.i.d. uniform on the unit square."""
    if n < 2:
        raise ValueError(f"TSP instance needs n >= 2 nodes, got {n}")
    rng = np.random.default_rng(seed)
    coords = rng.random((n, 2))
    return TspInstance(n=n, coords=coords, id=f"tsp{n}-s{seed}")


def generate_er(n_min: int, n_max: int, p: float, seed: int) -> MisInstance:
    """Erdos-Renyi G(n, p) with the node count uniform in [n_min, n_max]."""
    if not (2 <= n_min <= n_max):
        raise ValueError(f"need 2 <= n_min <= n_max, got [{n_min}, {n_max}]")
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"connection probability must be in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(n_min, n_max + 1))
    upper = rng.random((n, n))
    iu, ju = np.triu_indices(n, k=1)
    keep = upper[iu, ju] < p
    edges = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)
    return MisInstance(n=n, edges=edges, id=f"er{n}-p{p}-s{seed}")


def sparsify(instance: TspInstance, k: int) -> SparseGraph:
    """Keep each node's k nearest neighbors (ties to the lower index), then
    symmetrize by union of both directions."""
    n = instance.n
    if not (1 <= k < n):
        raise ValueError(f"k must satisfy 1 <= k < n, got k={k}, n={n}")
    dist = instance.dist_matrix()
    keep = np.zeros((n, n), dtype=bool)
    for i in range(n):
        d = dist[i].copy()
        d[i] = np.inf
        # stable argsort keeps the lower node index first among equal distances
        nearest = np.argsort(d, kind="stable")[:k]
        keep[i, nearest] = True
    keep = keep | keep.T
    src, dst = np.nonzero(keep)
    order = np.lexsort((dst, src))
    src, dst = src[order].astype(np.int64), dst[order].astype(np.int64)
    return SparseGraph(n=n, src=src, dst=dst, weight=dist[src, dst], k=k)


def dense_graph(instance: TspInstance) -> SparseGraph:
    """All directed pairs; equivalent to sparsify with k = n - 1."""
    return sparsify(instance, instance.n - 1)


def mis_graph(instance: MisInstance) -> SparseGraph:
    """Directed version of a MIS instance's adjacency (unit weights)."""
    if len(instance.edges) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return SparseGraph(n=instance.n, src=empty, dst=empty.copy(),
                           weight=np.zeros(0), k=0)
    u, v = instance.edges[:, 0], instance.edges[:, 1]
    src = np.concatenate([u, v]).astype(np.int64)
    dst = np.concatenate([v, u]).astype(np.int64)
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    return SparseGraph(n=instance.n, src=src, dst=dst,
                       weight=np.ones(len(src)), k=0)


Instance = Union[TspInstance, MisInstance]


def _fmt(x: float) -> str:
    """Shortest decimal string that round-trips the double exactly."""
    return repr(float(x))


def format_instance(inst: Instance) -> str:
    if isinstance(inst, TspInstance):
        parts = ["tsp", str(inst.n)]
        for x, y in inst.coords:
            parts.append(_fmt(x))
            parts.append(_fmt(y))
        if inst.label is not None:
            parts.append("sol")
            parts.extend(str(i) for i in inst.label.order)
        return " ".join(parts)
    if isinstance(inst, MisInstance):
        parts = ["mis", str(inst.n), str(len(inst.edges))]
        for u, v in inst.edges:
            parts.append(str(int(u)))
            parts.append(str(int(v)))
        if inst.label is not None:
            parts.append("sol")
            parts.extend(str(i) for i in sorted(inst.label.nodes))
        return " ".join(parts)
    raise TypeError(f"unknown instance type {type(inst)!r}")


def save_instances(path, instances: Iterable[Instance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(format_instance(inst))
            fh.write("\n")


def _parse_tsp_line(tokens: list[str], lineno: int, ident: str) -> TspInstance:
    try:
        n = int(tokens[1])
        if n < 2:
            raise ValueError
        need = 2 + 2 * n
        coords = np.array([float(t) for t in tokens[2:need]], dtype=float)
        if coords.size != 2 * n:
            raise ValueError
    except (ValueError, IndexError):
        raise ParseError(f"line {lineno}: malformed tsp instance") from None
    inst = TspInstance(n=n, coords=coords.reshape(n, 2), id=ident)
    rest = tokens[need:]
    if rest:
        if rest[0] != "sol" or len(rest) != 1 + n:
            raise ParseError(f"line {lineno}: malformed tsp label")
        try:
            order = [int(t) for t in rest[1:]]
        except ValueError:
            raise ParseError(f"line {lineno}: malformed tsp label") from None
        if sorted(order) != list(range(n)):
            raise ParseError(f"line {lineno}: tsp label is not a permutation")
        inst.label = Tour.from_order(inst.coords, order)
    return inst


def _parse_mis_line(tokens: list[str], lineno: int, ident: str) -> MisInstance:
    try:
        n, m = int(tokens[1]), int(tokens[2])
        if n < 1 or m < 0:
            raise ValueError
        need = 3 + 2 * m
        flat = [int(t) for t in tokens[3:need]]
        if len(flat) != 2 * m:
            raise ValueError
    except (ValueError, IndexError):
        raise ParseError(f"line {lineno}: malformed mis instance") from None
    edges = []
    seen = set()
    for e in range(m):
        u, v = flat[2 * e], flat[2 * e + 1]
        if u == v or not (0 <= u < n and 0 <= v < n):
            raise ParseError(f"line {lineno}: bad edge ({u}, {v})")
        u, v = min(u, v), max(u, v)
        if (u, v) in seen:
            raise ParseError(f"line {lineno}: duplicate edge ({u}, {v})")
        seen.add((u, v))
        edges.append((u, v))
    arr = np.array(edges, dtype=np.int64) if edges else np.zeros((0, 2), np.int64)
    inst = MisInstance(n=n, edges=arr, id=ident)
    rest = tokens[need:]
    if rest:
        if rest[0] != "sol":
            raise ParseError(f"line {lineno}: malformed mis label")
        try:
            nodes = [int(t) for t in rest[1:]]
        except ValueError:
            raise ParseError(f"line {lineno}: malformed mis label") from None
        inst.label = IndependentSet(nodes=nodes)
        try:
            inst.label.validate(inst)
        except ValueError as exc:
            raise ParseError(f"line {lineno}: infeasible mis label: {exc}") from None
    return inst


def load_instances(path) -> list[Instance]:
    """Parse an instance file; raises ParseError naming the offending line."""
    out: list[Instance] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            kind = tokens[0]
            ident = f"{kind}-{len(out)}"
            if kind == "tsp":
                out.append(_parse_tsp_line(tokens, lineno, ident))
            elif kind == "mis":
                out.append(_parse_mis_line(tokens, lineno, ident))
            else:
                raise ParseError(f"line {lineno}: unknown instance kind {kind!r}")
    return out
