"""Input features for the garment graph, its coarse levels and the body edges.

Features are built with torch ops on the two history frames so that, when
those frames are themselves network predictions, gradients flow through.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from ..assets import compute_normals, TriMesh
from ..energy import BodyFrames, Physics
from ..graph import BODY, PINNED, HierarchicalGraph, build_body_edges

DTYPE = torch.float64

EDGE_WIDTH = 12
BODY_EDGE_WIDTH = 9


def node_width(num_levels: int) -> int:
    """velocity 3, normal 3, mass 1, materials 3, alpha 1, type 3, level one-hot (levels + body code)."""
    return 3 + 3 + 1 + 3 + 1 + 3 + num_levels + 1


def _t(a, dtype=DTYPE):
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def _directed(edges) -> torch.Tensor:
    """(2, 2E) sender/receiver rows with both directions of every undirected edge."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    both = np.concatenate([e, e[:, ::-1]], axis=0)
    return torch.as_tensor(both.T.copy())


@dataclass
class GarmentTopology:
    """Everything about one garment sample that stays fixed over a rollout."""

    hierarchy: HierarchicalGraph
    faces: torch.Tensor          # (F, 3)
    rest_positions: torch.Tensor  # (N, 3)
    masses: torch.Tensor          # (N,)
    material: torch.Tensor        # (N, 3) mu, lam, k_bending
    pinned: torch.Tensor          # (P,)
    static_nodes: torch.Tensor    # (N, 3 + L + 1) type and level one-hots
    level_edges: list             # per level, (2, E) directed sender/receiver
    level_nodes: list             # per level, kept node ids
    level_rest: list              # per level, (E, 4) rest offset and length
    level_material: list          # per level, (E, 3) endpoint-mean materials
    physics: Physics
    faces_np: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.masses)

    @property
    def num_levels(self) -> int:
        return self.hierarchy.num_levels

    @classmethod
    def build(cls, physics: Physics, hierarchy: HierarchicalGraph) -> "GarmentTopology":
        rest = physics.rest
        n = hierarchy.base.node_count
        if len(rest.rest_positions) != n:
            raise ValueError("hierarchy and rest geometry disagree on the node count")
        L = hierarchy.num_levels
        node_type = np.asarray(hierarchy.base.node_type).copy()
        node_type[physics.pinned] = PINNED
        static = np.zeros((n, 3 + L + 1))
        static[np.arange(n), node_type] = 1.0
        static[np.arange(n), 3 + hierarchy.deepest_level] = 1.0
        mat = np.stack([physics.material.mu, physics.material.lam, physics.material.k_bending], axis=1)
        mat = np.broadcast_to(mat, (n, 3)) if len(mat) == 1 else mat
        x0 = np.asarray(rest.rest_positions)
        edges, nodes, rest_f, mat_f = [], [], [], []
        for lv in hierarchy.levels:
            d = _directed(lv.edges)
            s, r = d.numpy()
            off = x0[r] - x0[s]
            rest_f.append(_t(np.concatenate([off, np.linalg.norm(off, axis=1, keepdims=True)], axis=1)))
            mat_f.append(_t(0.5 * (mat[s] + mat[r])))
            edges.append(d)
            nodes.append(torch.as_tensor(np.asarray(lv.kept_nodes, dtype=np.int64)))
        return cls(hierarchy, torch.as_tensor(np.asarray(rest.faces, dtype=np.int64)), _t(x0),
                   _t(physics.masses), _t(mat), torch.as_tensor(physics.pinned), _t(static),
                   edges, nodes, rest_f, mat_f, physics, np.asarray(rest.faces))


@dataclass
class FeatureSet:
    node: torch.Tensor          # (N + Nb, node_width)
    edges: list                 # per level (E_l, 12)
    body_edges: torch.Tensor    # (K, 9)
    body_index: torch.Tensor    # (2, K) sender (body node, offset by N) / receiver (garment node)
    num_garment: int

    @property
    def widths(self):
        return self.node.shape[1], (self.edges[0].shape[1] if self.edges else EDGE_WIDTH), self.body_edges.shape[1]


def vertex_normals(x: torch.Tensor, faces: torch.Tensor) -> torch.Tensor:
    """Area-weighted unit vertex normals (differentiable); isolated vertices get +z."""
    n = torch.zeros_like(x)
    if len(faces):
        a, b, c = x[faces[:, 0]], x[faces[:, 1]], x[faces[:, 2]]
        fn = torch.linalg.cross(b - a, c - a, dim=1)
        for k in range(3):
            n = n.index_add(0, faces[:, k], fn)
    norm = torch.linalg.norm(n, dim=1, keepdim=True)
    up = torch.zeros_like(x)
    up[:, 2] = 1.0
    ok = norm > 1e-12
    return torch.where(ok, n / torch.where(ok, norm, torch.ones_like(norm)), up)


def build_features(topo: GarmentTopology, x_prev: torch.Tensor, x_curr: torch.Tensor, dt: float, alpha: float,
                   body: Optional[BodyFrames] = None, radius: Optional[float] = None) -> FeatureSet:
    """Node, per-level garment-edge and body-edge feature rows for one step.

    Body rows carry -1 in the mass and material slots and the body code in
    the last level slot. Body velocity is the body's motion over the step.
    """
    n = topo.num_nodes
    L = topo.num_levels
    radius = topo.physics.body_edge_radius if radius is None else radius
    vel = (x_curr - x_prev) / dt
    nrm = vertex_normals(x_curr, topo.faces)
    alpha_col = torch.full((n, 1), float(alpha), dtype=DTYPE)
    garment_rows = torch.cat([vel, nrm, topo.masses[:, None], topo.material, alpha_col, topo.static_nodes], dim=1)

    edges = []
    for d, rest_f, mat_f in zip(topo.level_edges, topo.level_rest, topo.level_material):
        s, r = d
        off = x_curr[r] - x_curr[s]
        a = torch.full((len(s), 1), float(alpha), dtype=DTYPE)
        edges.append(torch.cat([off, torch.linalg.norm(off, dim=1, keepdim=True), rest_f, mat_f, a], dim=1))

    if body is None:
        return FeatureSet(garment_rows, edges, torch.zeros((0, BODY_EDGE_WIDTH), dtype=DTYPE),
                          torch.zeros((2, 0), dtype=torch.int64), n)

    nb = len(body.curr)
    b_curr = _t(body.curr)
    b_next = _t(body.next)
    b_nrm = _t(compute_normals(TriMesh(body.curr, body.faces)))
    b_rows = torch.zeros((nb, node_width(L)), dtype=DTYPE)
    b_rows[:, 0:3] = (b_next - b_curr) / dt
    b_rows[:, 3:6] = b_nrm
    b_rows[:, 6:10] = -1.0
    b_rows[:, 10] = float(alpha)
    b_rows[:, 11 + BODY] = 1.0
    b_rows[:, -1] = 1.0
    node = torch.cat([garment_rows, b_rows], dim=0)

    be = build_body_edges(x_curr.detach().numpy(), body.curr, radius)
    gi = torch.as_tensor(be.garment)
    bj = torch.as_tensor(be.body)
    d1 = x_curr[gi] - b_curr[bj]
    d2 = x_curr[gi] - b_next[bj]
    a = torch.full((len(gi), 1), float(alpha), dtype=DTYPE)
    body_edges = torch.cat([d1, torch.linalg.norm(d1, dim=1, keepdim=True),
                            d2, torch.linalg.norm(d2, dim=1, keepdim=True), a], dim=1)
    return FeatureSet(node, edges, body_edges, torch.stack([bj + n, gi]), n)


def skinned_accelerations(frames, dt) -> np.ndarray:
    """Per-node accelerations of a skinned frame sequence, stacked over time."""
    x = np.asarray(frames)
    if len(x) < 3:
        return np.zeros((0, 3))
    return ((x[2:] - 2 * x[1:-1] + x[:-2]) / dt**2).reshape(-1, 3)

