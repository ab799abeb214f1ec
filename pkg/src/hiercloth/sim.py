"""Optimisation-based implicit Euler simulator, rest-pose relaxation and collision metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .assets import RestGeometry, TriMesh, compute_rest_geometry
from .energy import (BodyFrames, CollisionSet, EnergyBreakdown, MaterialField, Physics, SimState,
                     bending_energy, build_collision_set, collision_penalty, gravity_energy,
                     stretching_energy, total_potential)
from .skinning import signed_distances

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    pass


class RelaxationError(SimulationError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class OptimizerConfig:
    method: str = "lbfgs"
    max_iter: int = 200
    tol: float = 1e-6
    history: int = 10
    armijo: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 40

    def __post_init__(self):
        if self.method not in ("lbfgs", "gd"):
            raise ValueError(f"unknown optimizer {self.method!r}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class MinimizeResult:
    x: np.ndarray
    energy: float
    grad_norm: float
    iterations: int
    converged: bool
    line_search_failed: bool
    energies: list = field(default_factory=list)


def minimize(fun: Callable, x0, opt: OptimizerConfig, free=None) -> MinimizeResult:
    """Minimise ``fun(x) -> (value, grad)`` over the rows of ``x`` selected by ``free``.

    Backtracking Armijo line search on an L-BFGS (or steepest-descent)
    direction. Every accepted iterate lowers the objective; the list of
    accepted values is returned for inspection.
    """
    x = np.array(x0, dtype=np.float64)
    shape = x.shape
    mask = np.ones(shape[0], dtype=bool) if free is None else np.asarray(free, dtype=bool)
    sel = np.repeat(mask[:, None], shape[1], axis=1).ravel() if x.ndim == 2 else mask

    def f_flat(z):
        xx = x.copy().ravel()
        xx[sel] = z
        v, g = fun(xx.reshape(shape))
        return v, np.asarray(g).ravel()[sel]

    z = x.ravel()[sel].copy()
    v, g = f_flat(z)
    if not np.isfinite(v):
        raise SimulationError("objective is not finite at the initial iterate")
    energies = [v]
    s_hist, y_hist = [], []
    failed = False
    it = 0
    gnorm = float(np.linalg.norm(g))
    while gnorm > opt.tol and it < opt.max_iter:
        if opt.method == "lbfgs" and s_hist:
            d = -_two_loop(g, s_hist, y_hist)
        else:
            d = -g
        slope = float(g @ d)
        if slope >= 0:
            s_hist.clear()
            y_hist.clear()
            d = -g
            slope = -float(g @ g)
        step = 1.0
        if not s_hist:
            # first step: cap the move at a millimetre-scale displacement
            step = min(1.0, 1e-3 / max(np.abs(d).max(), 1e-300))
        accepted = False
        for _ in range(opt.max_backtracks):
            z_new = z + step * d
            v_new, g_new = f_flat(z_new)
            if np.isfinite(v_new) and v_new <= v + opt.armijo * step * slope:
                accepted = True
                break
            step *= opt.shrink
        if not accepted or v_new >= v:
            failed = not accepted
            break
        s, y = z_new - z, g_new - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > opt.history:
                s_hist.pop(0)
                y_hist.pop(0)
        z, v, g = z_new, v_new, g_new
        energies.append(v)
        gnorm = float(np.linalg.norm(g))
        it += 1
    if failed:
        log.warning("line search failed after %d iterations (|g| = %.3e)", it, gnorm)
    out = x.ravel().copy()
    out[sel] = z
    return MinimizeResult(out.reshape(shape), v, gnorm, it, gnorm <= opt.tol, failed, energies)


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((a, rho, s, y))
        q -= a * y
    s, y = s_hist[-1], y_hist[-1]
    q *= (s @ y) / (y @ y)
    for a, rho, s, y in reversed(alphas):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


@dataclass
class StepInfo:
    breakdown: EnergyBreakdown
    result: MinimizeResult


def implicit_euler_step(state: SimState, physics: Physics, body: Optional[BodyFrames] = None,
                        opt: Optional[OptimizerConfig] = None, pinned_positions=None,
                        cset: Optional[CollisionSet] = None):
    """Advance one step by minimising the incremental potential.

    Starts from constant-velocity extrapolation; pinned nodes are placed at
    ``pinned_positions`` and held there. Returns ``(x_next, StepInfo)``.
    """
    opt = opt or OptimizerConfig()
    if cset is None and body is not None:
        cset = build_collision_set(state.x_curr, body.curr, body.next, body.faces)
    x0 = state.extrapolated
    free = np.ones(len(x0), dtype=bool)
    if len(physics.pinned):
        if pinned_positions is not None:
            x0[physics.pinned] = pinned_positions
        free[physics.pinned] = False

    def fun(x):
        b = total_potential(x, state, physics, body, cset)
        return b.total, b.gradient

    if not free.any():
        res = MinimizeResult(x0, *fun(x0)[:1], 0.0, 0, True, False, [])
    else:
        res = minimize(fun, x0, opt, free)
    bd = total_potential(res.x, state, physics, body, cset)
    return res.x, StepInfo(bd, res)


@dataclass
class Trajectory:
    frames: list
    log: list = field(default_factory=list)     # EnergyBreakdown per step
    infos: list = field(default_factory=list)   # StepInfo per step
    penetration: list = field(default_factory=list)

    def positions(self) -> np.ndarray:
        return np.stack(self.frames)


def rollout(scene, steps: int, opt: Optional[OptimizerConfig] = None, physics: Optional[Physics] = None,
            state: Optional[SimState] = None, start_frame: int = 0) -> Trajectory:
    """Simulate ``steps`` implicit Euler steps of ``scene`` with the physics oracle."""
    opt = opt or OptimizerConfig()
    physics = physics or scene.physics()
    state = state or scene.initial_state()
    if scene.body is not None and start_frame + steps + 1 > scene.num_frames:
        raise SimulationError(f"body motion covers {scene.num_frames} frames, {start_frame + steps + 1} needed")
    traj = Trajectory([state.x_curr.copy()])
    for n in range(steps):
        frame = start_frame + n
        body = scene.body_frames(frame)
        pins = scene.pinned_positions(frame + 1) if len(scene.pinned) else None
        x_next, info = implicit_euler_step(state, physics, body, opt, pins)
        if not np.isfinite(x_next).all():
            raise SimulationError(f"non-finite positions at step {n}")
        traj.frames.append(x_next)
        traj.log.append(info.breakdown)
        traj.infos.append(info)
        if body is not None:
            d, _ = signed_distances(x_next, body.next, body.faces)
            traj.penetration.append(float(np.mean(d < 0)))
        else:
            traj.penetration.append(0.0)
        state = SimState(state.x_curr, x_next, state.dt, 1.0)
    return traj


def relax_rest_pose(positions, reference: RestGeometry, material: MaterialField, body_positions=None,
                    body_faces=None, opt: Optional[OptimizerConfig] = None, gravity=(0.0, 0.0, -9.81),
                    collision_eps=4e-3, collision_stiffness=1e4, density=None, faces=None) -> RestGeometry:
    """Minimise the static terms (stretching, bending, gravity, collision) against ``reference``.

    The relaxed positions become a new rest geometry. ``gravity=(0, 0, 0)``
    disables the gravity term.
    """
    opt = opt or OptimizerConfig(max_iter=2000, tol=1e-8)
    x0 = np.array(positions, dtype=np.float64)
    faces = reference.faces if faces is None else faces
    masses = material.masses(reference)
    g = np.asarray(gravity, dtype=np.float64)
    cset = CollisionSet.empty()
    if body_positions is not None:
        cset = build_collision_set(x0, body_positions, body_positions, body_faces)
    history = []

    def fun(x):
        e1, g1 = stretching_energy(x, reference, material)
        e2, g2 = bending_energy(x, reference, material)
        e3, g3 = gravity_energy(x, masses, g)
        e4, g4 = collision_penalty(x, cset, collision_eps, collision_stiffness)
        v = e1 + e2 + e3 + e4
        history.append(v)
        if not np.isfinite(v) or np.abs(x).max() > 1e3:
            raise RelaxationError("relaxation diverged", list(history))
        return v, g1 + g2 + g3 + g4

    res = minimize(fun, x0, opt)
    rho = material.density if density is None else density
    return compute_rest_geometry(TriMesh(res.x, faces), rho)


def collision_metrics(frames, body_frames, faces, eps, skip_first=False):
    """Mean cubic penetration penalty and fraction of penetrating vertices over all frames.

    Uses the nearest face of the same frame (no previous-step correspondence)
    with unit stiffness.
    """
    frames = list(frames)
    body_frames = list(body_frames)
    if len(frames) != len(body_frames):
        raise ValueError("garment and body frame counts differ")
    if skip_first:
        frames, body_frames = frames[1:], body_frames[1:]
    if not frames:
        return 0.0, 0.0
    pen, inside, count = 0.0, 0, 0
    for x, b in zip(frames, body_frames):
        d, _ = signed_distances(x, b, faces)
        pen += float(np.sum(np.maximum(eps - d, 0.0) ** 3))
        inside += int(np.sum(d < 0))
        count += len(d)
    return pen / count, inside / count
