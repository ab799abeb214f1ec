"""Linear blend skinning for garment initialisation and pinned vertices."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .assets import BodyMotion, TriMesh, face_centroids, face_normals, load_obj, save_frame


def _check_weights(w, what):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"{what} weights must be a 2D array")
    if (w < -1e-12).any():
        raise ValueError(f"{what} weights must be non-negative")
    if not np.allclose(w.sum(1), 1.0, atol=1e-9):
        raise ValueError(f"{what} weight rows must sum to 1")
    return w


@dataclass
class SkinnedBody:
    """Rest body mesh, per-vertex bone weights and per-frame 4x4 bone transforms."""

    mesh: TriMesh
    weights: np.ndarray     # (Nb, B)
    transforms: np.ndarray  # (T, B, 4, 4)
    dt: float = 1.0 / 30.0

    def __post_init__(self):
        self.weights = _check_weights(self.weights, "body")
        self.transforms = np.asarray(self.transforms, dtype=np.float64)
        if self.transforms.ndim == 3:
            self.transforms = self.transforms[None]
        if self.transforms.shape[1:] != (self.num_bones, 4, 4):
            raise ValueError("transforms must have shape (T, B, 4, 4)")
        if np.any(np.abs(np.linalg.det(self.transforms)) < 1e-12):
            raise ValueError("bone transforms must be invertible")

    @property
    def num_bones(self) -> int:
        return self.weights.shape[1]

    @property
    def num_frames(self) -> int:
        return len(self.transforms)

    @property
    def faces(self) -> np.ndarray:
        return self.mesh.faces

    def transforms_at(self, t: float) -> np.ndarray:
        """Bone transforms at time ``t``, entrywise-interpolated between frames, clamped at the ends."""
        s = min(max(t / self.dt, 0.0), self.num_frames - 1)
        i = min(int(np.floor(s)), max(self.num_frames - 2, 0))
        w = s - i
        if self.num_frames == 1 or w <= 0:
            return self.transforms[i]
        return (1 - w) * self.transforms[i] + w * self.transforms[i + 1]

    def positions_at(self, t: float) -> np.ndarray:
        return lbs(self.mesh.positions, self.weights, self.transforms_at(t))

    def frame(self, i: int) -> np.ndarray:
        return lbs(self.mesh.positions, self.weights, self.transforms[i])

    def to_motion(self) -> BodyMotion:
        return BodyMotion(np.stack([self.frame(i) for i in range(self.num_frames)]), self.mesh.faces, self.dt)

    def save(self, path, mesh_name=None):
        """Write the rest mesh as OBJ next to a JSON file holding weights and transforms."""
        path = Path(path)
        mesh_name = mesh_name or path.with_suffix(".obj").name
        save_frame(self.mesh.positions, self.mesh.faces, path.parent / mesh_name)
        doc = {
            "mesh": mesh_name,
            "dt": self.dt,
            "weights": self.weights.tolist(),
            "transforms": self.transforms.tolist(),
        }
        path.write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "SkinnedBody":
        path = Path(path)
        doc = json.loads(path.read_text())
        mesh = load_obj(path.parent / doc["mesh"])
        return cls(mesh, np.array(doc["weights"]), np.array(doc["transforms"]), float(doc["dt"]))


@dataclass
class GarmentSkin:
    rest_positions: np.ndarray
    weights: np.ndarray  # (N, B)

    def __post_init__(self):
        self.rest_positions = np.asarray(self.rest_positions, dtype=np.float64)
        self.weights = _check_weights(self.weights, "garment")


def lbs(rest, weights, transforms) -> np.ndarray:
    rest = np.asarray(rest, dtype=np.float64)
    T = np.asarray(transforms, dtype=np.float64)
    blended = np.einsum("nb,bij->nij", weights, T)
    return np.einsum("nij,nj->ni", blended[:, :3, :3], rest) + blended[:, :3, 3]


def _nearest_vertex(points, targets):
    """Nearest target index per point, ties resolved to the lowest index."""
    d2 = ((points[:, None, :] - targets[None, :, :]) ** 2).sum(-1)
    idx = np.argmin(d2, axis=1)
    return idx, np.sqrt(d2[np.arange(len(points)), idx])


def nearest_vertex_weights(garment_rest, body: SkinnedBody) -> GarmentSkin:
    x = np.asarray(garment_rest, dtype=np.float64)
    idx, _ = _nearest_vertex(x, body.mesh.positions)
    return GarmentSkin(x, body.weights[idx].copy())


def diffuse_weights(garment_rest, body: SkinnedBody, samples_m=10000, seed=0) -> GarmentSkin:
    """Monte-Carlo diffused weights.

    For a node at distance d from the body, M points are drawn from an
    isotropic Gaussian centred on the node with standard deviation d and the
    weight rows of their nearest body vertices are averaged. Nodes lying on
    the body (d = 0) keep their nearest-vertex row.
    """
    if samples_m < 1:
        raise ValueError("samples_m must be >= 1")
    x = np.asarray(garment_rest, dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx, dist = _nearest_vertex(x, body.mesh.positions)
    out = body.weights[idx].copy()
    tree = cKDTree(body.mesh.positions)
    for i in np.flatnonzero(dist > 0):
        q = x[i] + dist[i] * rng.standard_normal((samples_m, 3))
        _, nn = tree.query(q)
        row = body.weights[nn].mean(0)
        out[i] = row / row.sum()
    return GarmentSkin(x, out)


def skin(garment: GarmentSkin, bone_transforms) -> np.ndarray:
    T = np.asarray(bone_transforms, dtype=np.float64)
    if T.shape[0] != garment.weights.shape[1]:
        raise ValueError(f"expected {garment.weights.shape[1]} transforms, got {T.shape[0]}")
    return lbs(garment.rest_positions, garment.weights, T)


def signed_distances(positions, body_positions, faces):
    """Signed distance to the plane of the face whose centroid is nearest, plus that face's normal."""
    x = np.asarray(positions, dtype=np.float64)
    cen = face_centroids(body_positions, faces)
    nrm = face_normals(body_positions, faces)
    _, idx = cKDTree(cen).query(x)
    d = ((x - cen[idx]) * nrm[idx]).sum(1)
    return d, nrm[idx]


def untangle(positions, body_positions, faces, eps, passes=3) -> np.ndarray:
    """Push vertices closer than ``eps`` to the body out along the face normal, to distance ``eps``."""
    x = np.array(positions, dtype=np.float64)
    for _ in range(passes):
        d, n = signed_distances(x, body_positions, faces)
        inside = d < eps
        if not inside.any():
            break
        x[inside] += (eps - d[inside])[:, None] * n[inside]
    return x
