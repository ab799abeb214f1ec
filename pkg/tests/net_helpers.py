"""Small garments, topologies and the structural reach oracle shared by the net tests."""
import numpy as np
import torch

from hiercloth.assets import TriMesh, compute_rest_geometry
from hiercloth.energy import BodyFrames, MaterialField, Physics
from hiercloth.graph import build_garment_graph, build_hierarchy, path_graph
from hiercloth.net import ClothNet, GarmentTopology, NetConfig, node_width
from hiercloth.scenes import grid_mesh


def grid_topology(n=4, spacing=0.1, levels=2, pinned=(), seed=0, material=None):
    mesh = grid_mesh(n, n, spacing)
    mat = material or MaterialField.uniform(n * n)
    rest = compute_rest_geometry(mesh, mat.density)
    physics = Physics(rest, mat, pinned=list(pinned), body_edge_radius=0.05, collision_eps=0.01)
    hier = build_hierarchy(build_garment_graph(mesh, pinned), levels, seed=seed)
    return GarmentTopology.build(physics, hier), mesh


def ground_plate(z=-0.02, shift=(0.0, 0.0, 0.0)):
    """A flat body grid under the garment with vertices dense enough for body edges."""
    g = grid_mesh(9, 9, 0.06, origin=(-0.09, -0.09, z))
    return BodyFrames(g.faces, g.positions, g.positions + np.asarray(shift))


def path_topology(n=100, levels=2, seed=0):
    hier = build_hierarchy(path_graph(n), levels, seed=seed)
    pos = np.zeros((n, 3))
    pos[:, 0] = np.arange(n) * 0.01
    rest = compute_rest_geometry(TriMesh(pos, np.zeros((0, 3), dtype=np.int64)), 0.2)
    physics = Physics(rest, MaterialField.uniform(n), mass_override=np.full(n, 1e-3))
    return GarmentTopology.build(physics, hier), pos


def wavefront(hier, schedule, p):
    """Nodes a signal starting at p can reach when each step crosses one edge of each of its levels."""
    reached = {p}
    for step in schedule:
        new = set(reached)
        for l in step:
            for a, b in hier.levels[l].edges.tolist():
                if a in reached:
                    new.add(b)
                if b in reached:
                    new.add(a)
        reached = new
    return reached


def influence_matrix(model, topo, pos):
    """M[q, p] is True when node p's input features structurally influence node q's final latent."""
    n = topo.num_nodes
    xs = torch.as_tensor(pos)
    pert = torch.zeros(n, node_width(topo.num_levels), dtype=torch.float64, requires_grad=True)
    v, _ = model.latents(topo, xs, xs, 1 / 30, 1.0, node_perturbation=pert)
    M = np.zeros((n, n), dtype=bool)
    for q in range(n):
        g, = torch.autograd.grad(v[q].sum(), pert, retain_graph=True)
        M[q] = (g != 0).any(1).numpy()
    return M


def measured_reach(schedule, n=100, hidden=8, seed=0):
    """Largest fine-hop distance any input influences, plus the count of nodes whose
    forward reach differs from the wavefront oracle."""
    topo, pos = path_topology(n)
    torch.manual_seed(seed)
    model = ClothNet(NetConfig(hidden=hidden, schedule=[list(s) for s in schedule]))
    M = influence_matrix(model, topo, pos)
    reach, mismatches = 0, 0
    for p in range(n):
        hit = np.flatnonzero(M[:, p])
        reach = max(reach, int(np.abs(hit - p).max()))
        mismatches += set(hit.tolist()) != wavefront(topo.hierarchy, schedule, p)
    return reach, mismatches
