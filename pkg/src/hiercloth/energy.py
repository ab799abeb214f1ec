"""Incremental potential for one implicit Euler step.

Every term returns ``(value, gradient)`` with the gradient taken with respect
to the end-of-step positions ``x_next``. Body geometry is kinematic: nothing
flows into the body. The potential is

    stretching + bending + gravity + friction + collision + inertia

and its minimiser over ``x_next`` is the implicit Euler update.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .assets import RestGeometry, face_centroids, face_normals

log = logging.getLogger(__name__)

TERMS = ("stretching", "bending", "gravity", "inertia", "collision", "friction")
MIN_HINGE_HEIGHT = 1e-9


@dataclass
class MaterialField:
    """Per-node material: Lamé parameters (Pa·m), bending stiffness (N·m), density (kg/m²)."""

    mu: np.ndarray
    lam: np.ndarray
    k_bending: np.ndarray
    density: np.ndarray

    def __post_init__(self):
        for name in ("mu", "lam", "k_bending", "density"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            if (v <= 0).any():
                raise ValueError(f"material {name} must be strictly positive")
            setattr(self, name, v)

    @classmethod
    def uniform(cls, n, mu=100.0, lam=100.0, k_bending=1e-4, density=0.2) -> "MaterialField":
        return cls(*(np.broadcast_to(np.asarray(v, dtype=np.float64), (n,)).copy() for v in (mu, lam, k_bending, density)))

    def per_face(self, faces):
        f = np.asarray(faces)
        return self.mu[f].mean(1), self.lam[f].mean(1), self.k_bending[f].mean(1)

    def per_edge(self, edges):
        e = np.asarray(edges)
        return self.mu[e].mean(1), self.lam[e].mean(1), self.k_bending[e].mean(1)

    def masses(self, rest: RestGeometry) -> np.ndarray:
        return self.density * rest.vertex_areas

    def scaled(self, **factors) -> "MaterialField":
        kw = {k: getattr(self, k) * factors.get(k, 1.0) for k in ("mu", "lam", "k_bending", "density")}
        return MaterialField(**kw)


@dataclass
class SimState:
    x_prev: np.ndarray
    x_curr: np.ndarray
    dt: float
    alpha: float = 1.0

    def __post_init__(self):
        self.x_prev = np.asarray(self.x_prev, dtype=np.float64)
        self.x_curr = np.asarray(self.x_curr, dtype=np.float64)
        if self.x_prev.shape != self.x_curr.shape:
            raise ValueError("x_prev and x_curr differ in shape")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")

    @property
    def extrapolated(self) -> np.ndarray:
        return 2.0 * self.x_curr - self.x_prev


@dataclass
class BodyFrames:
    """Obstacle surface at the start (``curr``) and end (``next``) of the step."""

    faces: np.ndarray
    curr: np.ndarray
    next: np.ndarray

    def translated(self, t) -> "BodyFrames":
        return BodyFrames(self.faces, self.curr + t, self.next + t)

    # per-frame geometry reused by every evaluation within a step
    @cached_property
    def centroids_curr(self):
        return face_centroids(self.curr, self.faces)

    @cached_property
    def centroids_next(self):
        return face_centroids(self.next, self.faces)

    @cached_property
    def tree_curr(self):
        return cKDTree(self.centroids_curr)

    @cached_property
    def tree_next(self):
        return cKDTree(self.centroids_next)

    @cached_property
    def normals_curr(self):
        return face_normals(self.curr, self.faces)

    @cached_property
    def normals_next(self):
        return face_normals(self.next, self.faces)


@dataclass
class CollisionSet:
    garment: np.ndarray   # (K,) node ids
    face: np.ndarray      # (K,) body face ids
    centroid: np.ndarray  # (K, 3) face centroid at end of step
    normal: np.ndarray    # (K, 3) unit face normal at end of step

    def __len__(self):
        return len(self.garment)

    @classmethod
    def empty(cls) -> "CollisionSet":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 3)))


@dataclass
class Physics:
    """Everything the potential needs that stays fixed over a rollout."""

    rest: RestGeometry
    material: MaterialField
    gravity: Sequence[float] = (0.0, 0.0, -9.81)
    collision_eps: float = 4e-3
    collision_stiffness: float = 1e4
    friction: float = 0.5
    body_edge_radius: float = 3e-2
    pinned: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    terms: Sequence[str] = TERMS
    # explicit lumped masses, e.g. for meshes without faces
    mass_override: Optional[np.ndarray] = None

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=np.float64)
        self.pinned = np.asarray(self.pinned, dtype=np.int64).reshape(-1)
        unknown = set(self.terms) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown energy terms {sorted(unknown)}")
        self.terms = tuple(t for t in TERMS if t in self.terms)
        if self.mass_override is not None:
            self.masses = np.asarray(self.mass_override, dtype=np.float64).copy()
        else:
            self.masses = self.material.masses(self.rest)

    def with_material(self, material: MaterialField) -> "Physics":
        return Physics(self.rest, material, self.gravity, self.collision_eps, self.collision_stiffness,
                       self.friction, self.body_edge_radius, self.pinned, self.terms, self.mass_override)


@dataclass
class EnergyBreakdown:
    stretching: float
    bending: float
    gravity: float
    inertia: float
    collision: float
    friction: float
    total: float
    gradient: np.ndarray
    # derivatives with respect to the two history frames, used when the
    # potential is a training loss over an unrolled sequence
    grad_curr: Optional[np.ndarray] = None
    grad_prev: Optional[np.ndarray] = None

    def terms(self) -> dict:
        return {t: getattr(self, t) for t in TERMS}

    def to_row(self) -> dict:
        row = self.terms()
        row["total"] = self.total
        row["grad_norm"] = float(np.linalg.norm(self.gradient))
        return row


def stretching_energy(x_next, rest: RestGeometry, mat: MaterialField):
    """St. Venant-Kirchhoff membrane energy over rest-area-weighted triangles."""
    x = np.asarray(x_next)
    f = rest.faces
    dx = np.stack([x[f[:, 1]] - x[f[:, 0]], x[f[:, 2]] - x[f[:, 0]]], axis=2)  # (F, 3, 2)
    F = dx @ rest.rest2d
    G = 0.5 * (np.swapaxes(F, 1, 2) @ F - np.eye(2))
    trG = G[:, 0, 0] + G[:, 1, 1]
    mu, lam, _ = mat.per_face(f)
    psi = 0.5 * lam * trG**2 + mu * (G**2).sum(axis=(1, 2))
    energy = float(np.dot(rest.rest_areas, psi))

    S = 2.0 * mu[:, None, None] * G + (lam * trG)[:, None, None] * np.eye(2)
    H = rest.rest_areas[:, None, None] * (F @ S) @ np.swapaxes(rest.rest2d, 1, 2)
    grad = np.zeros_like(x)
    np.add.at(grad, f[:, 1], H[:, :, 0])
    np.add.at(grad, f[:, 2], H[:, :, 1])
    np.add.at(grad, f[:, 0], -H[:, :, 0] - H[:, :, 1])
    return energy, grad


def _hinge_geometry(x, hinges):
    a, b, c, d = (x[hinges[:, k]] for k in range(4))
    e = b - a
    n1 = np.cross(e, c - a)
    n2 = np.cross(a - b, d - b)
    return a, b, c, d, e, n1, n2


def bending_energy(x_next, rest: RestGeometry, mat: MaterialField, return_skipped=False):
    """Discrete-shells hinge energy ``k (theta - theta_rest)^2 * 3|e|^2 / (A1 + A2)``."""
    x = np.asarray(x_next)
    grad = np.zeros_like(x)
    if len(rest.hinges) == 0:
        return (0.0, grad, 0) if return_skipped else (0.0, grad)
    h = rest.hinges
    a, b, c, d, e, n1, n2 = _hinge_geometry(x, h)
    el = np.linalg.norm(e, axis=1)
    nn1 = (n1 * n1).sum(1)
    nn2 = (n2 * n2).sum(1)
    # |n| / |e| is the triangle height over the shared edge
    ok = (np.sqrt(nn1) > MIN_HINGE_HEIGHT * el) & (np.sqrt(nn2) > MIN_HINGE_HEIGHT * el) & (el > 0)
    skipped = int((~ok).sum())
    if skipped:
        log.warning("bending: skipped %d near-degenerate hinges", skipped)
    eh = e / np.where(el > 0, el, 1.0)[:, None]
    sin = (np.cross(n1, n2) * eh).sum(1)
    cos = (n1 * n2).sum(1)
    theta = np.pi - np.arctan2(sin, cos)

    k = mat.k_bending[h[:, :2]].mean(1)
    weight = 3.0 * rest.hinge_lengths**2 / rest.hinge_areas
    delta = np.where(ok, theta - rest.rest_dihedrals, 0.0)
    energy = float(np.sum(k * weight * delta**2))

    # derivatives of the signed angle phi = pi - theta
    safe1 = np.where(ok, nn1, 1.0)
    safe2 = np.where(ok, nn2, 1.0)
    q1 = n1 / safe1[:, None]
    q2 = n2 / safe2[:, None]
    el_s = np.where(el > 0, el, 1.0)
    dc = -el_s[:, None] * q1
    dd = -el_s[:, None] * q2
    da = -(((c - b) * e).sum(1) / el_s)[:, None] * q1 - (((d - b) * e).sum(1) / el_s)[:, None] * q2
    db = (((c - a) * e).sum(1) / el_s)[:, None] * q1 + (((d - a) * e).sum(1) / el_s)[:, None] * q2
    coef = (-2.0 * k * weight * delta)[:, None]  # dE/dtheta * dtheta/dphi
    for col, g in zip(range(4), (da, db, dc, dd)):
        np.add.at(grad, h[:, col], coef * g)
    return (energy, grad, skipped) if return_skipped else (energy, grad)


def gravity_energy(x_next, masses, g=(0.0, 0.0, -9.81)):
    x = np.asarray(x_next)
    m = np.asarray(masses, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    grad = -m[:, None] * g[None, :]
    return float(np.sum(grad * x)), grad


def inertia_energy(x_next, state: SimState, masses, with_history=False):
    """``alpha * sum m / (2 dt^2) |x_next - 2 x_curr + x_prev|^2``."""
    m = np.asarray(masses, dtype=np.float64)
    r = np.asarray(x_next) - 2.0 * state.x_curr + state.x_prev
    w = state.alpha * m / state.dt**2
    energy = float(0.5 * np.sum(w * (r * r).sum(1)))
    grad = w[:, None] * r
    if with_history:
        return energy, grad, -2.0 * grad, grad.copy()
    return energy, grad


def _nearest_faces(points, centroids, tree=None):
    """Index of the nearest centroid per point; exact ties go to the lowest face id."""
    points = np.asarray(points, dtype=np.float64)
    if len(centroids) == 1:
        return np.zeros(len(points), dtype=np.int64), np.linalg.norm(points - centroids[0], axis=1)
    dist, idx = (tree or cKDTree(centroids)).query(points, k=2)
    tie = dist[:, 0] == dist[:, 1]
    best = np.where(tie, idx.min(1), idx[:, 0])
    return best.astype(np.int64), dist[:, 0]


def build_collision_set(x_curr_garment, body_curr, body_next, faces) -> CollisionSet:
    """Pair each garment node with the body face nearest at the start of the step.

    The pairing is frozen for the step; the face plane it is tested against is
    taken from the end-of-step body.
    """
    x = np.asarray(x_curr_garment, dtype=np.float64)
    faces = np.asarray(faces)
    if len(faces) == 0 or len(x) == 0:
        return CollisionSet.empty()
    idx, _ = _nearest_faces(x, face_centroids(body_curr, faces))
    cen = face_centroids(body_next, faces)[idx]
    nrm = face_normals(body_next, faces)[idx]
    return CollisionSet(np.arange(len(x)), idx, cen, nrm)


def collision_penalty(x_next, cset: CollisionSet, eps, stiffness=1.0):
    """``stiffness * sum max(eps - d, 0)^3`` with d the signed distance to the paired face plane."""
    x = np.asarray(x_next)
    grad = np.zeros_like(x)
    if len(cset) == 0:
        return 0.0, grad
    d = ((x[cset.garment] - cset.centroid) * cset.normal).sum(1)
    deficit = np.maximum(eps - d, 0.0)
    energy = float(stiffness * np.sum(deficit**3))
    np.add.at(grad, cset.garment, (-3.0 * stiffness * deficit**2)[:, None] * cset.normal)
    return energy, grad


def _slope(normals, up):
    return np.arccos(np.clip(normals @ up, -1.0, 1.0))


def friction_energy(x_next, state: SimState, body: Optional[BodyFrames], masses, mu_k, r,
                    g=(0.0, 0.0, -9.81), with_history=False):
    """Kinetic friction against the body surface.

    A node qualifies when its nearest face centroid is within ``r`` both at
    the start (face m) and at the end (face k) of the step. Its reference
    position rides along with face m; the slip is the offset from that
    reference projected onto the plane averaging the two face orientations,
    and the term is ``mu_k |g| m cos(theta) |slip|`` with theta the mean
    face slope against the up direction (clamped to non-negative cosines).
    """
    x = np.asarray(x_next)
    grad = np.zeros_like(x)
    grad_curr = np.zeros_like(x)
    out = (0.0, grad, grad_curr) if with_history else (0.0, grad)
    if body is None or len(body.faces) == 0 or mu_k == 0:
        return out
    g = np.asarray(g, dtype=np.float64)
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0:
        return out
    up = -g / gnorm
    c_curr = body.centroids_curr
    c_next = body.centroids_next
    m_idx, m_dist = _nearest_faces(state.x_curr, c_curr, body.tree_curr)
    k_idx, k_dist = _nearest_faces(x, c_next, body.tree_next)
    sel = np.flatnonzero((m_dist < r) & (k_dist < r))
    if len(sel) == 0:
        return out
    n_curr = body.normals_curr
    n_next = body.normals_next
    nm = n_curr[m_idx[sel]]
    nk = n_next[k_idx[sel]]
    theta = 0.5 * (_slope(nm, up) + _slope(nk, up))
    cos = np.maximum(np.cos(theta), 0.0)
    plane = nm + nk
    pn = np.linalg.norm(plane, axis=1, keepdims=True)
    plane = np.where(pn > 1e-12, plane / np.maximum(pn, 1e-300), nk)

    v_hat = state.x_curr[sel] + (c_next[m_idx[sel]] - c_curr[m_idx[sel]])
    slip = x[sel] - v_hat
    proj = slip - (slip * plane).sum(1, keepdims=True) * plane
    dist = np.linalg.norm(proj, axis=1)
    w = mu_k * gnorm * np.asarray(masses)[sel] * cos
    energy = float(np.sum(w * dist))
    unit = np.where(dist[:, None] > 1e-14, proj / np.maximum(dist, 1e-300)[:, None], 0.0)
    gsel = w[:, None] * unit
    grad[sel] = gsel
    grad_curr[sel] = -gsel
    return (energy, grad, grad_curr) if with_history else (energy, grad)


def total_potential(x_next, state: SimState, physics: Physics, body: Optional[BodyFrames] = None,
                    cset: Optional[CollisionSet] = None, with_history=False) -> EnergyBreakdown:
    """Sum of all six terms; gradient rows of pinned nodes are zeroed."""
    x = np.asarray(x_next, dtype=np.float64)
    m = physics.masses
    on = set(physics.terms)
    zero = np.zeros_like(x)
    if cset is None:
        cset = CollisionSet.empty()
    e_s, g_s = stretching_energy(x, physics.rest, physics.material) if "stretching" in on else (0.0, zero)
    e_b, g_b = bending_energy(x, physics.rest, physics.material) if "bending" in on else (0.0, zero)
    e_g, g_g = gravity_energy(x, m, physics.gravity) if "gravity" in on else (0.0, zero)
    if "inertia" in on:
        e_i, g_i, gc_i, gp_i = inertia_energy(x, state, m, with_history=True)
    else:
        e_i, g_i, gc_i, gp_i = 0.0, zero, zero, zero
    if "collision" in on:
        e_c, g_c = collision_penalty(x, cset, physics.collision_eps, physics.collision_stiffness)
    else:
        e_c, g_c = 0.0, zero
    if "friction" in on:
        e_f, g_f, gc_f = friction_energy(x, state, body, m, physics.friction, physics.body_edge_radius,
                                         physics.gravity, with_history=True)
    else:
        e_f, g_f, gc_f = 0.0, zero, zero
    values = dict(stretching=e_s, bending=e_b, gravity=e_g, inertia=e_i, collision=e_c, friction=e_f)
    for name, v in values.items():
        if not np.isfinite(v):
            raise FloatingPointError(f"non-finite {name} energy")
    grad = g_s + g_b + g_g + g_i + g_c + g_f
    grad[physics.pinned] = 0.0
    out = EnergyBreakdown(total=float(sum(values[t] for t in TERMS)), gradient=grad, **values)
    if with_history:
        out.grad_curr = gc_i + gc_f
        out.grad_prev = gp_i.copy()
        out.grad_curr[physics.pinned] = 0.0
        out.grad_prev[physics.pinned] = 0.0
    return out
