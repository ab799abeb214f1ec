"""Mesh and scene I/O, rest geometry, vertex masses and normals."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DEGENERATE_AREA = 1e-12


class MeshError(ValueError):
    pass


class ObjParseError(MeshError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


@dataclass
class TriMesh:
    positions: np.ndarray
    faces: np.ndarray
    uv: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.uv is not None:
            self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)

    @property
    def num_vertices(self) -> int:
        return len(self.positions)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def validate(self):
        """Raise MeshError on out-of-range or repeated face indices."""
        n = self.num_vertices
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= n):
            bad = int(np.flatnonzero((self.faces < 0).any(1) | (self.faces >= n).any(1))[0])
            raise MeshError(f"face {bad} references a vertex outside [0, {n})")
        f = self.faces
        degen = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if degen.any():
            raise MeshError(f"face {int(np.flatnonzero(degen)[0])} repeats a vertex index")
        return self

    def is_consistently_oriented(self) -> bool:
        # each directed half-edge must occur at most once
        he = directed_edges(self.faces)
        keys = he[:, 0] * max(self.num_vertices, 1) + he[:, 1]
        return len(np.unique(keys)) == len(keys)


@dataclass
class RestGeometry:
    rest_positions: np.ndarray
    faces: np.ndarray
    rest2d: np.ndarray          # (F, 2, 2) inverse of the flattened edge matrix
    rest_areas: np.ndarray      # (F,)
    hinges: np.ndarray          # (H, 4) shared edge a-b, opposite vertices c, d
    rest_dihedrals: np.ndarray  # (H,)
    hinge_lengths: np.ndarray   # (H,) rest length of the shared edge
    hinge_areas: np.ndarray     # (H,) sum of the two rest triangle areas
    vertex_areas: np.ndarray    # (N,) one third of the adjacent rest areas
    masses: np.ndarray          # (N,)

    @property
    def num_vertices(self) -> int:
        return len(self.rest_positions)


@dataclass
class BodyMotion:
    """Keyframed obstacle: shared topology, one position array per frame."""

    frames: np.ndarray
    faces: np.ndarray
    dt: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise MeshError("body frames must have shape (T, N, 3)")
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not self.dt > 0:
            raise MeshError("body motion dt must be positive")

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def duration(self) -> float:
        return (self.num_frames - 1) * self.dt

    def at(self, t: float) -> np.ndarray:
        """Positions at time t, linearly interpolated between keyframes and clamped at the ends."""
        s = min(max(t / self.dt, 0.0), self.num_frames - 1)
        i = min(int(math.floor(s)), self.num_frames - 2) if self.num_frames > 1 else 0
        w = s - i
        if self.num_frames == 1 or w <= 0.0:
            return self.frames[i].copy()
        return (1.0 - w) * self.frames[i] + w * self.frames[i + 1]

    def mesh(self, frame: int = 0) -> TriMesh:
        return TriMesh(self.frames[frame], self.faces)


@dataclass
class SceneConfig:
    garment: str
    body_motion: Optional[str] = None
    density: float = 0.2
    mu: float = 100.0
    lam: float = 100.0
    k_bending: float = 1e-4
    dt: float = 1.0 / 30.0
    collision_eps: float = 4e-3
    collision_stiffness: float = 1e4
    body_edge_radius: float = 3e-2
    friction: float = 0.5
    gravity: Sequence[float] = (0.0, 0.0, -9.81)
    pinned: Sequence[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.collision_eps > 0:
            raise ValueError("collision_eps must be positive")
        if not self.body_edge_radius > self.collision_eps:
            raise ValueError("body_edge_radius must exceed collision_eps")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        self.gravity = tuple(float(g) for g in self.gravity)
        if len(self.gravity) != 3:
            raise ValueError("gravity must be a 3-vector")
        self.pinned = [int(i) for i in self.pinned]

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown scene config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "SceneConfig":
        path = Path(path)
        cfg = cls.from_dict(json.loads(path.read_text()))
        # relative asset paths resolve against the config file
        base = path.parent
        if not Path(cfg.garment).is_absolute():
            cfg.garment = str(base / cfg.garment)
        if cfg.body_motion and not Path(cfg.body_motion).is_absolute():
            cfg.body_motion = str(base / cfg.body_motion)
        return cfg

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["gravity"] = list(self.gravity)
        d["pinned"] = list(self.pinned)
        return d


def load_obj(path) -> TriMesh:
    """Read positions and triangles from an ASCII OBJ file.

    ``v``, ``vt`` and ``f`` records are honoured; texture/normal slots of face
    records are dropped and every other statement is ignored. Polygons with
    more than three corners are fan-triangulated.
    """
    positions, uvs, faces, face_lines = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            toks = line.split("#", 1)[0].split()
            if not toks:
                continue
            tag = toks[0]
            try:
                if tag == "v":
                    if len(toks) < 4:
                        raise ValueError("vertex needs three coordinates")
                    positions.append([float(t) for t in toks[1:4]])
                elif tag == "vt":
                    uvs.append([float(t) for t in toks[1:3]])
                elif tag == "f":
                    idx = []
                    for t in toks[1:]:
                        i = int(t.split("/")[0])
                        # negative indices count back from the latest vertex
                        idx.append(i - 1 if i > 0 else len(positions) + i)
                    if len(idx) < 3:
                        raise ValueError("face needs at least three vertices")
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
                        face_lines.append(lineno)
            except ValueError as exc:
                raise ObjParseError(path, lineno, str(exc)) from None
    n = len(positions)
    for face, lineno in zip(faces, face_lines):
        if min(face) < 0 or max(face) >= n:
            raise ObjParseError(path, lineno, f"face index out of range (file has {n} vertices)")
    uv = np.array(uvs) if uvs and len(uvs) == n else None
    return TriMesh(np.array(positions, dtype=np.float64).reshape(-1, 3), np.array(faces).reshape(-1, 3), uv)


def save_frame(positions, faces, path):
    positions = np.asarray(positions, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    lines = [f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}" for p in positions]
    lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in faces]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def directed_edges(faces) -> np.ndarray:
    f = np.asarray(faces)
    return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)


def unique_edges(faces) -> np.ndarray:
    """Undirected mesh edges as sorted (i, j) pairs, i < j, in lexicographic order."""
    he = np.sort(directed_edges(faces), axis=1)
    if len(he) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(he, axis=0)


def find_hinges(faces) -> np.ndarray:
    """Interior edges as rows (a, b, c, d).

    Face one traverses a->b with third vertex c, face two traverses b->a with
    third vertex d. Edges shared by non-opposing half-edges (inconsistent
    orientation) or by more than two faces are skipped.
    """
    faces = np.asarray(faces)
    owner = {}
    for f in faces:
        for k in range(3):
            owner.setdefault((int(f[k]), int(f[(k + 1) % 3])), []).append(int(f[(k + 2) % 3]))
    hinges = []
    for (a, b), opp in owner.items():
        if a < b and (b, a) in owner and len(opp) == 1 and len(owner[(b, a)]) == 1:
            hinges.append((a, b, opp[0], owner[(b, a)][0]))
    hinges.sort()
    return np.array(hinges, dtype=np.int64).reshape(-1, 4)


def triangle_areas(positions, faces) -> np.ndarray:
    p = np.asarray(positions)
    f = np.asarray(faces)
    n = np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]])
    return 0.5 * np.linalg.norm(n, axis=1)


def dihedral_angles(positions, hinges) -> np.ndarray:
    """Interior angle at each hinge; pi when the two triangles are coplanar."""
    x = np.asarray(positions)
    a, b, c, d = (x[hinges[:, k]] for k in range(4))
    e = b - a
    n1 = np.cross(e, c - a)
    n2 = np.cross(a - b, d - b)
    eh = e / np.linalg.norm(e, axis=1, keepdims=True)
    sin = np.einsum("ij,ij->i", np.cross(n1, n2), eh)
    cos = np.einsum("ij,ij->i", n1, n2)
    return np.pi - np.arctan2(sin, cos)


def flatten_triangles(positions, faces) -> np.ndarray:
    """Isometric 2D edge matrices (F, 2, 2): columns are the two edges from vertex 0."""
    p = np.asarray(positions)
    f = np.asarray(faces)
    e1 = p[f[:, 1]] - p[f[:, 0]]
    e2 = p[f[:, 2]] - p[f[:, 0]]
    l1 = np.linalg.norm(e1, axis=1)
    u = e1 / np.maximum(l1, 1e-300)[:, None]
    along = np.einsum("ij,ij->i", e2, u)
    across = np.linalg.norm(e2 - along[:, None] * u, axis=1)
    dm = np.zeros((len(f), 2, 2))
    dm[:, 0, 0] = l1
    dm[:, 0, 1] = along
    dm[:, 1, 1] = across
    return dm


def compute_rest_geometry(mesh: TriMesh, density=1.0) -> RestGeometry:
    """Rest frames, hinge data and lumped masses from the mesh's own 3D geometry.

    ``density`` is kg/m^2, either a scalar or one value per vertex.
    """
    mesh.validate()
    x = mesh.positions
    areas = triangle_areas(x, mesh.faces)
    bad = np.flatnonzero(areas < DEGENERATE_AREA)
    if len(bad):
        raise MeshError(f"face {int(bad[0])} is degenerate (area {areas[bad[0]]:.3e} m^2)")
    density = np.broadcast_to(np.asarray(density, dtype=np.float64), (mesh.num_vertices,))
    if (density <= 0).any():
        raise ValueError("density must be positive")
    dm = flatten_triangles(x, mesh.faces)
    vertex_area = np.zeros(mesh.num_vertices)
    np.add.at(vertex_area, mesh.faces.ravel(), np.repeat(areas / 3.0, 3))
    hinges = find_hinges(mesh.faces)
    h_len = np.linalg.norm(x[hinges[:, 1]] - x[hinges[:, 0]], axis=1)
    face_of = _hinge_faces(mesh.faces, hinges)
    h_area = areas[face_of[:, 0]] + areas[face_of[:, 1]] if len(hinges) else np.zeros(0)
    return RestGeometry(
        rest_positions=x.copy(),
        faces=mesh.faces.copy(),
        rest2d=np.linalg.inv(dm),
        rest_areas=areas,
        hinges=hinges,
        rest_dihedrals=dihedral_angles(x, hinges),
        hinge_lengths=h_len,
        hinge_areas=h_area,
        vertex_areas=vertex_area,
        masses=density * vertex_area,
    )


def _hinge_faces(faces, hinges) -> np.ndarray:
    lookup = {}
    for fi, f in enumerate(faces):
        for k in range(3):
            lookup[(int(f[k]), int(f[(k + 1) % 3]))] = fi
    return np.array([(lookup[(a, b)], lookup[(b, a)]) for a, b, _, _ in hinges], dtype=np.int64).reshape(-1, 2)


def face_normals(positions, faces, normalize=True) -> np.ndarray:
    p = np.asarray(positions)
    f = np.asarray(faces)
    n = np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]])
    if normalize:
        n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    return n


def compute_normals(mesh: TriMesh, positions=None) -> np.ndarray:
    """Area-weighted unit vertex normals; vertices without a usable normal get +z."""
    x = mesh.positions if positions is None else np.asarray(positions, dtype=np.float64)
    # unnormalised cross products already carry twice the face area
    fn = face_normals(x, mesh.faces, normalize=False)
    vn = np.zeros_like(x)
    for k in range(3):
        np.add.at(vn, mesh.faces[:, k], fn)
    norm = np.linalg.norm(vn, axis=1)
    out = np.tile([0.0, 0.0, 1.0], (len(x), 1))
    ok = norm > 1e-12
    out[ok] = vn[ok] / norm[ok, None]
    return out


def face_centroids(positions, faces) -> np.ndarray:
    p = np.asarray(positions)
    return p[np.asarray(faces)].mean(axis=1)
