"""Central finite-difference checks of the analytic energy gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import energy as E
from .assets import compute_rest_geometry
from .scenes import grid_mesh

CHECKED = ("stretching", "bending", "gravity", "inertia", "collision", "friction", "total")


def finite_difference(f, x, h=1e-6) -> np.ndarray:
    """Central differences of the scalar ``f`` at every coordinate of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros(x.size)
    flat = x.ravel()
    for i in range(x.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return out.reshape(x.shape)


def relative_error(analytic, reference) -> float:
    """Largest component error relative to the largest reference component."""
    a = np.asarray(analytic)
    r = np.asarray(reference)
    scale = max(np.abs(r).max(), np.abs(a).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - r).max() / scale)


@dataclass
class GradCase:
    x: np.ndarray
    state: E.SimState
    physics: E.Physics
    body: E.BodyFrames
    cset: E.CollisionSet

    def terms(self) -> dict:
        """term name -> function returning ``(value, gradient)``."""
        p, st, m = self.physics, self.state, self.physics.masses

        def total(x):
            b = E.total_potential(x, st, p, self.body, self.cset)
            return b.total, b.gradient

        return {
            "stretching": lambda x: E.stretching_energy(x, p.rest, p.material),
            "bending": lambda x: E.bending_energy(x, p.rest, p.material),
            "gravity": lambda x: E.gravity_energy(x, m, p.gravity),
            "inertia": lambda x: E.inertia_energy(x, st, m),
            "collision": lambda x: E.collision_penalty(x, self.cset, p.collision_eps, p.collision_stiffness),
            "friction": lambda x: E.friction_energy(x, st, self.body, m, p.friction, p.body_edge_radius, p.gravity),
            "total": total,
        }


def random_patch_case(seed: int, n: int = 4, spacing: float = 0.1) -> GradCase:
    """A perturbed n x n cloth patch resting on a tilted, moving two-triangle ground plate.

    Noise puts some nodes inside the contact band so the collision and
    friction terms are active.
    """
    rng = np.random.default_rng(seed)
    mesh = grid_mesh(n, n, spacing)
    k = n * n
    mat = E.MaterialField(rng.uniform(10, 1000, k), rng.uniform(10, 1000, k), rng.uniform(1e-6, 1e-3, k),
                          rng.uniform(0.1, 0.5, k))
    rest = compute_rest_geometry(mesh, mat.density)
    x0 = mesh.positions
    x_prev = x0 + rng.normal(scale=0.01, size=x0.shape)
    x_curr = x0 + rng.normal(scale=0.01, size=x0.shape)
    x = x0 + rng.normal(scale=0.02, size=x0.shape)
    c = x0.mean(0)
    tilt = rng.uniform(-0.05, 0.05, 2)
    plate = np.array([[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]])
    plate[:, 2] = plate[:, 0] * tilt[0] + plate[:, 1] * tilt[1] - 0.005
    plate[:, :2] += c[:2]
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    body = E.BodyFrames(faces, plate, plate + rng.uniform(-0.004, 0.004, 3))
    physics = E.Physics(rest, mat, collision_eps=0.01, collision_stiffness=1e4,
                        friction=float(rng.uniform(0.2, 0.8)), body_edge_radius=2.0)
    state = E.SimState(x_prev, x_curr, 1 / 30, float(rng.uniform(0.1, 1.0)))
    cset = E.build_collision_set(x_curr, body.curr, body.next, faces)
    return GradCase(x, state, physics, body, cset)


def check_energy_gradients(seed: int = 0, configs: int = 20, h: float = 1e-6) -> dict:
    """Maximum relative FD error per term over ``configs`` random patches."""
    worst = {t: 0.0 for t in CHECKED}
    for c in range(configs):
        case = random_patch_case(seed * 1000 + c)
        for name, f in case.terms().items():
            _, g = f(case.x)
            fd = finite_difference(lambda x: f(x)[0], case.x, h)
            worst[name] = max(worst[name], relative_error(g, fd))
    return worst
