"""Procedural garments, bodies and the shipped desk-scale scenes."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .assets import RestGeometry, SceneConfig, TriMesh, compute_rest_geometry, load_obj, save_frame
from .energy import BodyFrames, MaterialField, Physics, SimState
from .skinning import GarmentSkin, SkinnedBody, diffuse_weights, nearest_vertex_weights, skin


def grid_mesh(nu, nv, spacing, origin=(0.0, 0.0, 0.0), u_axis=(1.0, 0.0, 0.0), v_axis=(0.0, 1.0, 0.0)) -> TriMesh:
    """Regular triangulated grid; vertex (i, j) has id ``i * nv + j``. Faces wind CCW about u x v."""
    u = np.asarray(u_axis, dtype=np.float64)
    v = np.asarray(v_axis, dtype=np.float64)
    i, j = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    pos = np.asarray(origin) + spacing * (i.reshape(-1, 1) * u + j.reshape(-1, 1) * v)
    faces = []
    for a in range(nu - 1):
        for b in range(nv - 1):
            p, q, r, s = a * nv + b, (a + 1) * nv + b, a * nv + b + 1, (a + 1) * nv + b + 1
            # alternate the diagonal so the grid has no preferred shear direction
            if (a + b) % 2 == 0:
                faces += [(p, q, s), (p, s, r)]
            else:
                faces += [(p, q, r), (q, s, r)]
    return TriMesh(pos, np.array(faces))


def icosphere(radius=1.0, subdivisions=3, center=(0.0, 0.0, 0.0)) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriMesh(radius * np.array(verts) + np.asarray(center), np.array(faces))


def capsule(radius=0.1, half_length=0.2, n_around=24, n_cap=6, axis=1) -> TriMesh:
    """Closed capsule along coordinate ``axis``, outward-facing triangles."""
    lat = []
    for k in range(1, n_cap + 1):
        phi = -0.5 * math.pi + 0.5 * math.pi * k / n_cap
        lat.append((-half_length + radius * math.sin(phi), radius * math.cos(phi)))
    for k in range(0, n_cap):
        phi = 0.5 * math.pi * k / n_cap
        lat.append((half_length + radius * math.sin(phi), radius * math.cos(phi)))
    ang = 2 * math.pi * np.arange(n_around) / n_around
    pts = [(-half_length - radius, 0.0, 0.0)]
    for h, rho in lat:
        for a in ang:
            pts.append((h, rho * math.cos(a), rho * math.sin(a)))
    pts.append((half_length + radius, 0.0, 0.0))
    pts = np.array(pts)
    n_r = len(lat)
    faces = []
    for a in range(n_around):
        b = (a + 1) % n_around
        faces.append((0, 1 + b, 1 + a))
    for r in range(n_r - 1):
        base0, base1 = 1 + r * n_around, 1 + (r + 1) * n_around
        for a in range(n_around):
            b = (a + 1) % n_around
            faces += [(base0 + a, base0 + b, base1 + b), (base0 + a, base1 + b, base1 + a)]
    top = len(pts) - 1
    last = 1 + (n_r - 1) * n_around
    for a in range(n_around):
        b = (a + 1) % n_around
        faces.append((top, last + a, last + b))
    # local frame (h, c, s) -> world with the capsule running along ``axis``
    order = {0: [0, 1, 2], 1: [1, 2, 0], 2: [2, 0, 1]}[axis]
    world = np.empty_like(pts)
    world[:, order] = pts
    faces = np.array(faces)
    mesh = TriMesh(world, faces)
    if _signed_volume(mesh) < 0:
        mesh = TriMesh(world, faces[:, ::-1])
    return mesh


def _signed_volume(mesh: TriMesh) -> float:
    p = mesh.positions[mesh.faces]
    return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)


def translation(t) -> np.ndarray:
    m = np.eye(4)
    m[:3, 3] = t
    return m


def rotation_y(angle, pivot=(0.0, 0.0, 0.0)) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    r = np.eye(4)
    r[:3, :3] = [[c, 0, s], [0, 1, 0], [-s, 0, c]]
    return translation(pivot) @ r @ translation(-np.asarray(pivot))


def rigid_body(mesh: TriMesh, offsets, dt) -> SkinnedBody:
    """Single-bone body translated by ``offsets[t]`` at frame t."""
    T = np.stack([translation(o)[None] for o in np.asarray(offsets, dtype=np.float64)])
    return SkinnedBody(mesh, np.ones((mesh.num_vertices, 1)), T, dt)


def two_bone_cylinder(radius=0.05, length=0.4, n_around=16, n_len=9, frames=30, bend=0.6, dt=1 / 30) -> SkinnedBody:
    """Tube along x split at its midpoint; bone 1 bends the far half about y."""
    xs = np.linspace(0.0, length, n_len)
    ang = 2 * math.pi * np.arange(n_around) / n_around
    pts = np.array([(x, radius * math.cos(a), radius * math.sin(a)) for x in xs for a in ang])
    faces = []
    for i in range(n_len - 1):
        for a in range(n_around):
            b = (a + 1) % n_around
            p, q, r, s = i * n_around + a, i * n_around + b, (i + 1) * n_around + a, (i + 1) * n_around + b
            faces += [(p, q, s), (p, s, r)]
    mesh = TriMesh(pts, np.array(faces))
    t = np.clip((pts[:, 0] - 0.35 * length) / (0.3 * length), 0.0, 1.0)
    weights = np.stack([1 - t, t], axis=1)
    T = np.zeros((frames, 2, 4, 4))
    for f in range(frames):
        T[f, 0] = np.eye(4)
        T[f, 1] = rotation_y(bend * f / max(frames - 1, 1), pivot=(0.5 * length, 0, 0))
    return SkinnedBody(mesh, weights, T, dt)


@dataclass
class Scene:
    """Runtime scene: rest garment, skinned obstacle and the physical constants."""

    name: str
    garment: TriMesh
    config: SceneConfig
    body: Optional[SkinnedBody] = None
    rest: Optional[RestGeometry] = None
    skin_nearest: Optional[GarmentSkin] = None
    skin_diffused: Optional[GarmentSkin] = None
    diffuse_samples: int = 2000

    def __post_init__(self):
        if self.rest is None:
            self.rest = compute_rest_geometry(self.garment, self.config.density)
        if self.body is not None:
            if self.skin_nearest is None:
                self.skin_nearest = nearest_vertex_weights(self.garment.positions, self.body)
        self.pinned = np.asarray(self.config.pinned, dtype=np.int64)

    @property
    def dt(self) -> float:
        return self.config.dt

    @property
    def num_nodes(self) -> int:
        return self.garment.num_vertices

    @property
    def num_frames(self) -> int:
        """Number of simulation frames covered by the body motion."""
        if self.body is None:
            return 10**9
        return int(math.floor((self.body.num_frames - 1) * self.body.dt / self.dt + 1e-9)) + 1

    def material(self) -> MaterialField:
        c = self.config
        return MaterialField.uniform(self.num_nodes, c.mu, c.lam, c.k_bending, c.density)

    def physics(self, material: Optional[MaterialField] = None, rest: Optional[RestGeometry] = None) -> Physics:
        c = self.config
        return Physics(rest or self.rest, material or self.material(), c.gravity, c.collision_eps,
                       c.collision_stiffness, c.friction, c.body_edge_radius, self.pinned)

    def body_positions(self, frame: int) -> Optional[np.ndarray]:
        if self.body is None:
            return None
        return self.body.positions_at(frame * self.dt)

    def body_frames(self, frame: int) -> Optional[BodyFrames]:
        """Body at the start (frame) and end (frame + 1) of a step."""
        if self.body is None:
            return None
        return BodyFrames(self.body.faces, self.body_positions(frame), self.body_positions(frame + 1))

    def skinned(self, frame: int, diffused=False, scale=1.0) -> np.ndarray:
        """Garment positions by linear blend skinning at ``frame``; ``scale`` resizes the rest garment."""
        x0 = self.garment.positions
        if self.body is None:
            return x0.copy()
        sk = self.diffused_skin() if diffused else self.skin_nearest
        if scale != 1.0:
            c = x0.mean(0)
            sk = GarmentSkin(c + scale * (x0 - c), sk.weights)
        return skin(sk, self.body.transforms_at(frame * self.dt))

    def diffused_skin(self) -> GarmentSkin:
        if self.skin_diffused is None:
            self.skin_diffused = diffuse_weights(self.garment.positions, self.body, self.diffuse_samples, seed=0)
        return self.skin_diffused

    def pinned_positions(self, frame: int) -> np.ndarray:
        return self.skinned(frame)[self.pinned]

    def initial_state(self, alpha=1.0) -> SimState:
        x = self.skinned(0)
        return SimState(x.copy(), x.copy(), self.dt, alpha)

    def with_config(self, **changes) -> "Scene":
        cfg = replace(self.config, **changes)
        return Scene(self.name, self.garment, cfg, self.body, None, self.skin_nearest, self.skin_diffused,
                     self.diffuse_samples)

    def save(self, directory):
        """Write garment OBJ, body JSON/OBJ and the scene JSON into ``directory``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_frame(self.garment.positions, self.garment.faces, d / f"{self.name}_garment.obj")
        cfg = self.config.to_dict()
        cfg["garment"] = f"{self.name}_garment.obj"
        if self.body is not None:
            self.body.save(d / f"{self.name}_body.json", f"{self.name}_body.obj")
            cfg["body_motion"] = f"{self.name}_body.json"
        path = d / f"{self.name}.json"
        path.write_text(json.dumps(cfg, indent=2))
        return path


def load_scene(path) -> Scene:
    cfg = SceneConfig.load(path)
    garment = load_obj(cfg.garment)
    body = SkinnedBody.load(cfg.body_motion) if cfg.body_motion else None
    return Scene(Path(path).stem, garment, cfg, body)


def drape_scene(n=21, frames=201, dt=1 / 30) -> Scene:
    """Square cloth dropped onto a static sphere."""
    radius, spacing = 0.25, 0.04
    half = 0.5 * spacing * (n - 1)
    garment = grid_mesh(n, n, spacing, origin=(-half, -half, radius + 0.02))
    sphere = icosphere(radius, 3)
    body = rigid_body(sphere, np.zeros((frames, 3)), dt)
    cfg = SceneConfig(garment="drape_garment.obj", dt=dt)
    return Scene("drape", garment, cfg, body)


def toy_scene(n=21, frames=241, dt=1 / 30) -> Scene:
    """Square cloth hanging from its two top corners beside a sphere that sways and bobs.

    The corners are skinned to the sphere, so the cloth is carried along.
    """
    radius, spacing = 0.2, 0.03
    half = 0.5 * spacing * (n - 1)
    # cloth in the x-z plane at y = -(radius + gap); rows run down from the top edge
    gap = 0.02
    top = 0.0
    garment = grid_mesh(n, n, spacing, origin=(-half, -(radius + gap), top),
                        u_axis=(1.0, 0.0, 0.0), v_axis=(0.0, 0.0, -1.0))
    # grid winding is CCW about u x v = (0, 1, 0): flip so normals face away from the sphere
    garment = TriMesh(garment.positions, garment.faces[:, ::-1])
    t = np.arange(frames) * dt
    offsets = np.stack([0.15 * np.sin(2 * math.pi * 0.4 * t),
                        0.05 * np.sin(2 * math.pi * 0.25 * t),
                        0.08 * np.sin(2 * math.pi * 0.6 * t)], axis=1)
    body = rigid_body(icosphere(radius, 3), offsets, dt)
    pinned = [0, (n - 1) * n]  # the two corners on the top edge
    cfg = SceneConfig(garment="toy_garment.obj", dt=dt, pinned=pinned)
    return Scene("toy", garment, cfg, body)


def strip_scene(width=5, length=41, frames=241, dt=1 / 30) -> Scene:
    """Long narrow strip hanging over the side of a moving capsule, top row pinned to it."""
    radius, spacing, gap = 0.1, 0.025, 0.01
    w = spacing * (width - 1)
    garment = grid_mesh(width, length, spacing, origin=(radius + gap, -0.5 * w, 0.0),
                        u_axis=(0.0, 1.0, 0.0), v_axis=(0.0, 0.0, -1.0))
    # u x v = (-1, 0, 0) already faces the capsule; flip to face outward
    garment = TriMesh(garment.positions, garment.faces[:, ::-1])
    body_mesh = capsule(radius, 0.5 * w + 0.05, n_around=24, n_cap=6, axis=1)
    t = np.arange(frames) * dt
    offsets = np.stack([0.12 * np.sin(2 * math.pi * 0.5 * t + 0.3),
                        np.zeros_like(t),
                        0.1 * np.sin(2 * math.pi * 0.8 * t)], axis=1)
    body = rigid_body(body_mesh, offsets, dt)
    pinned = [i * length for i in range(width)]  # top row
    cfg = SceneConfig(garment="strip_garment.obj", dt=dt, pinned=pinned, mu=300.0, lam=300.0)
    return Scene("strip", garment, cfg, body)


SCENES = {"drape": drape_scene, "toy": toy_scene, "strip": strip_scene}


def get_scene(name_or_path) -> Scene:
    if name_or_path in SCENES:
        return SCENES[name_or_path]()
    return load_scene(name_or_path)


def write_all(directory):
    return [SCENES[name]().save(directory) for name in SCENES]


if __name__ == "__main__":
    import sys

    for p in write_all(sys.argv[1] if len(sys.argv) > 1 else "assets"):
        print(p)
