"""Garment graph, body edges and the nested coarse-level hierarchy.

A coarse level keeps the nodes at even hop distance from a graph center and
replaces every odd-distance node by edges joining its inward neighbours to its
outward neighbours. Applied recursively this gives node sets with
``V[l + 1] ⊂ V[l]``, so coarse levels share node latents with the fine level
and no transfer operators are needed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from .assets import TriMesh, unique_edges

GARMENT, PINNED, BODY = 0, 1, 2
NODE_TYPES = ("garment", "pinned", "body")


class GraphError(ValueError):
    pass


@dataclass
class GarmentGraph:
    node_count: int
    fine_edges: np.ndarray  # (E, 2), i < j
    node_type: np.ndarray   # (N,) GARMENT or PINNED

    @property
    def pinned(self) -> np.ndarray:
        return np.flatnonzero(self.node_type == PINNED)


@dataclass
class CoarseLevel:
    level: int
    kept_nodes: np.ndarray  # sorted original node ids
    edges: np.ndarray       # (E, 2) original node ids, i < j
    centers: tuple = ()


@dataclass
class HierarchicalGraph:
    base: GarmentGraph
    levels: list            # levels[0] is the fine graph itself
    deepest_level: np.ndarray

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def num_coarse_levels(self) -> int:
        return len(self.levels) - 1

    def to_dict(self) -> dict:
        return {
            "node_count": int(self.base.node_count),
            "levels": [
                {
                    "level": lv.level,
                    "centers": [int(c) for c in lv.centers],
                    "nodes": lv.kept_nodes.tolist(),
                    "edges": lv.edges.tolist(),
                }
                for lv in self.levels
            ],
            "deepest_level": self.deepest_level.tolist(),
        }

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


@dataclass
class BodyEdgeSet:
    garment: np.ndarray  # (K,) garment node ids
    body: np.ndarray     # (K,) body vertex ids
    distance: np.ndarray

    def __len__(self):
        return len(self.garment)


class Schedule:
    """Ordered message-passing steps, each a sorted tuple of graph levels."""

    def __init__(self, steps: Iterable[Iterable[int]]):
        self.steps = [tuple(sorted(set(int(l) for l in s))) for s in steps]
        for i, s in enumerate(self.steps):
            if not s or min(s) < 0:
                raise GraphError(f"step {i} has no valid levels")
        for i in range(1, len(self.steps)):
            if not set(self.steps[i - 1]) & set(self.steps[i]):
                raise GraphError(f"steps {i - 1} and {i} share no level")

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def __eq__(self, other):
        return isinstance(other, Schedule) and self.steps == other.steps

    def __repr__(self):
        return f"Schedule({[list(s) for s in self.steps]})"

    @property
    def max_level(self) -> int:
        return max((max(s) for s in self.steps), default=0)

    def to_list(self):
        return [list(s) for s in self.steps]

    @classmethod
    def load(cls, path) -> "Schedule":
        with open(path) as fh:
            data = json.load(fh)
        if isinstance(data, dict):
            data = data["schedule"]
        return cls(data)

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump({"schedule": self.to_list()}, fh)


# UNet-like: down to level 2, eight coarse steps, back up; radius 48 in 15 steps
DEFAULT_SCHEDULE = (
    [(0,), (0, 1), (1, 2)] + [(2,)] * 8 + [(1, 2), (1,), (0, 1), (0,)]
)


def default_schedule() -> Schedule:
    return Schedule(DEFAULT_SCHEDULE)


def fine_schedule(n: int) -> Schedule:
    return Schedule([(0,)] * n)


def propagation_radius(schedule: Schedule) -> int:
    # a level-l edge spans 2**l fine edges
    return int(sum(2 ** max(step) for step in schedule))


def build_garment_graph(mesh: TriMesh, pinned: Sequence[int] = ()) -> GarmentGraph:
    node_type = np.full(mesh.num_vertices, GARMENT, dtype=np.int64)
    pinned = np.asarray(list(pinned), dtype=np.int64)
    if len(pinned) and (pinned.min() < 0 or pinned.max() >= mesh.num_vertices):
        raise GraphError("pinned index out of range")
    node_type[pinned] = PINNED
    return GarmentGraph(mesh.num_vertices, unique_edges(mesh.faces), node_type)


def _adjacency(nodes, edges):
    """CSR adjacency over local indices 0..len(nodes)-1."""
    nodes = np.asarray(nodes)
    local = np.searchsorted(nodes, edges) if len(edges) else np.zeros((0, 2), dtype=np.int64)
    n = len(nodes)
    rows = np.concatenate([local[:, 0], local[:, 1]])
    cols = np.concatenate([local[:, 1], local[:, 0]])
    return coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()


def _eccentricities(adj, chunk=256) -> np.ndarray:
    n = adj.shape[0]
    ecc = np.empty(n)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        ecc[idx] = shortest_path(adj, unweighted=True, directed=False, indices=idx).max(axis=1)
    return ecc


def _bfs_distances(adj, source) -> np.ndarray:
    return shortest_path(adj, unweighted=True, directed=False, indices=[source])[0]


def _pick_center(adj, rng) -> int:
    ecc = _eccentricities(adj)
    candidates = np.flatnonzero(ecc == ecc.min())
    return int(candidates[rng.integers(len(candidates))])


def _as_node_edges(graph):
    if isinstance(graph, GarmentGraph):
        return np.arange(graph.node_count), graph.fine_edges
    if isinstance(graph, CoarseLevel):
        return graph.kept_nodes, graph.edges
    nodes, edges = graph
    return np.asarray(nodes, dtype=np.int64), np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def graph_center(graph, seed=0) -> int:
    """A node whose eccentricity equals the graph radius, drawn uniformly with ``seed``.

    ``graph`` is a GarmentGraph, a CoarseLevel or a ``(nodes, edges)`` pair;
    the returned id is in the graph's own node numbering.
    """
    nodes, edges = _as_node_edges(graph)
    if len(nodes) == 0:
        raise GraphError("empty graph has no center")
    adj = _adjacency(nodes, edges)
    ncomp, _ = connected_components(adj, directed=False)
    if ncomp > 1:
        raise GraphError(f"graph is disconnected ({ncomp} components)")
    return int(nodes[_pick_center(adj, np.random.default_rng(seed))])


def coarsen(graph, seed=0, level=1, allow_disconnected=False) -> CoarseLevel:
    """One coarsening pass: keep even-distance nodes, bridge over odd ones.

    With ``allow_disconnected`` every connected component gets its own center
    and is coarsened independently; otherwise a disconnected input raises.
    """
    nodes, edges = _as_node_edges(graph)
    rng = np.random.default_rng(seed)
    adj = _adjacency(nodes, edges)
    ncomp, labels = connected_components(adj, directed=False)
    if ncomp > 1 and not allow_disconnected:
        raise GraphError(f"graph is disconnected ({ncomp} components)")

    dist = np.full(len(nodes), -1, dtype=np.int64)
    centers = []
    for comp in range(ncomp):
        members = np.flatnonzero(labels == comp)
        sub = adj[members][:, members]
        c = members[_pick_center(sub, rng)]
        centers.append(int(nodes[c]))
        d = _bfs_distances(adj, c)
        dist[members] = d[members].astype(np.int64)

    keep = dist % 2 == 0
    coarse = set()
    indptr, indices = adj.indptr, adj.indices
    for i in np.flatnonzero(~keep):
        nbrs = indices[indptr[i]:indptr[i + 1]]
        inward = nbrs[dist[nbrs] == dist[i] - 1]
        outward = nbrs[dist[nbrs] == dist[i] + 1]
        for j in inward:
            for k in outward:
                a, b = nodes[j], nodes[k]
                coarse.add((a, b) if a < b else (b, a))
    coarse_edges = np.array(sorted(coarse), dtype=np.int64).reshape(-1, 2)
    return CoarseLevel(level, nodes[keep].copy(), coarse_edges, tuple(centers))


def build_hierarchy(graph: GarmentGraph, num_coarse_levels=2, seed=0) -> HierarchicalGraph:
    if num_coarse_levels < 0:
        raise GraphError("num_coarse_levels must be >= 0")
    levels = [CoarseLevel(0, np.arange(graph.node_count), graph.fine_edges)]
    # one generator drives all levels so a seed fixes the whole hierarchy
    rng = np.random.default_rng(seed)
    for l in range(1, num_coarse_levels + 1):
        levels.append(coarsen(levels[-1], seed=rng.integers(2**63), level=l, allow_disconnected=True))
    deepest = np.zeros(graph.node_count, dtype=np.int64)
    for lv in levels[1:]:
        deepest[lv.kept_nodes] = lv.level
    return HierarchicalGraph(graph, levels, deepest)


def build_body_edges(garment_positions, body_positions, r, chunk=2048) -> BodyEdgeSet:
    """Nearest body vertex per garment node, kept if closer than ``r``; ties go to the lower index."""
    if r <= 0:
        raise ValueError("radius must be positive")
    g = np.asarray(garment_positions, dtype=np.float64)
    b = np.asarray(body_positions, dtype=np.float64)
    if len(b) == 0:
        raise GraphError("body mesh has no vertices")
    nearest = np.empty(len(g), dtype=np.int64)
    dist = np.empty(len(g))
    for s in range(0, len(g), chunk):
        d2 = ((g[s:s + chunk, None, :] - b[None, :, :]) ** 2).sum(-1)
        idx = np.argmin(d2, axis=1)
        nearest[s:s + chunk] = idx
        dist[s:s + chunk] = np.sqrt(d2[np.arange(len(idx)), idx])
    sel = np.flatnonzero(dist < r)
    return BodyEdgeSet(sel, nearest[sel], dist[sel])


def restrict_body_edges(body_edges: BodyEdgeSet, active_nodes) -> BodyEdgeSet:
    mask = np.isin(body_edges.garment, np.asarray(list(active_nodes) if not isinstance(active_nodes, np.ndarray) else active_nodes))
    return BodyEdgeSet(body_edges.garment[mask], body_edges.body[mask], body_edges.distance[mask])


def path_graph(n: int) -> GarmentGraph:
    edges = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1) if n > 1 else np.zeros((0, 2), dtype=np.int64)
    return GarmentGraph(n, edges, np.zeros(n, dtype=np.int64))


def graph_from_edges(n: int, edges) -> GarmentGraph:
    e = np.sort(np.asarray(edges, dtype=np.int64).reshape(-1, 2), axis=1)
    e = np.unique(e, axis=0) if len(e) else e
    return GarmentGraph(n, e, np.zeros(n, dtype=np.int64))
