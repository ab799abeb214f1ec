"""Self-supervised training: the incremental potential is the loss."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .assets import TriMesh, compute_rest_geometry
from .energy import TERMS, MaterialField, Physics, SimState, build_collision_set, total_potential
from .graph import Schedule, build_garment_graph, build_hierarchy, default_schedule, fine_schedule
from .net import ClothNet, GarmentTopology, NetConfig, build_features, check_gradients, potential_loss
from .net.features import skinned_accelerations
from .net.model import DTYPE
from .scenes import Scene, get_scene
from .sim import Trajectory, collision_metrics, rollout
from .skinning import signed_distances, untangle

log = logging.getLogger(__name__)

DEFAULT_MATERIAL_RANGES = {
    "mu": (10.0, 1000.0),
    "lam": (10.0, 1000.0),
    "k_bending": (1e-6, 1e-3),
    "density": (0.1, 0.5),
}


def resolve_schedule(value) -> Schedule:
    """A schedule from a name (``default``, ``fineN``), a JSON path or a list of steps."""
    if isinstance(value, Schedule):
        return value
    if isinstance(value, str):
        if value == "default":
            return default_schedule()
        if value.startswith("fine") and value[4:].isdigit():
            return fine_schedule(int(value[4:]))
        return Schedule.load(value)
    return Schedule(value)


@dataclass
class TrainConfig:
    scenes: list = field(default_factory=lambda: ["toy"])
    iterations: int = 2000
    k: int = 5000
    max_steps: int = 5
    alpha_range: tuple = (0.1, 0.1)
    material_ranges: dict = field(default_factory=lambda: dict(DEFAULT_MATERIAL_RANGES))
    randomize_materials: bool = True
    size_range: tuple = (0.9, 1.1)
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    hidden: int = 32
    schedule: object = "default"
    num_coarse_levels: int = 2
    diffused_skinning: bool = True
    warmup_frames: int = 60
    val_scenes: Optional[list] = None
    val_starts: list = field(default_factory=lambda: [10, 60, 110])
    val_steps: int = 10
    val_every: int = 500
    checkpoint_every: int = 500
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        self.alpha_range = tuple(self.alpha_range)
        self.size_range = tuple(self.size_range)
        self.betas = tuple(self.betas)
        lo, hi = self.alpha_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("alpha range must satisfy 0 < lo <= hi <= 1")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ValueError("size range must satisfy 0 < lo <= hi")
        ranges = {}
        for name in DEFAULT_MATERIAL_RANGES:
            lo, hi = self.material_ranges.get(name, DEFAULT_MATERIAL_RANGES[name])
            if not 0 < lo < hi:
                raise ValueError(f"material range for {name} must satisfy 0 < lo < hi")
            ranges[name] = (float(lo), float(hi))
        self.material_ranges = ranges
        if isinstance(self.schedule, Schedule):
            self.schedule = self.schedule.to_list()
        resolve_schedule(self.schedule)

    @property
    def validation_scenes(self) -> list:
        return list(self.val_scenes) if self.val_scenes is not None else list(self.scenes)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("alpha_range", "size_range", "betas"):
            d[key] = list(d[key])
        d["material_ranges"] = {k: list(v) for k, v in self.material_ranges.items()}
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training options {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- sampling -----------------------------------------------------------------

def sample_materials(rng, ranges: dict, n: int) -> MaterialField:
    """Log-uniform draws for each material parameter, broadcast over ``n`` nodes."""
    vals = {}
    for name in ("mu", "lam", "k_bending", "density"):
        lo, hi = ranges[name]
        if not 0 < lo < hi:
            raise ValueError(f"invalid range for {name}")
        vals[name] = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    return MaterialField.uniform(n, **vals)


def sample_size(rng, size_range=(0.9, 1.1)) -> float:
    return float(rng.uniform(*size_range))


def scaled_rest(scene: Scene, scale: float, density):
    """Rest geometry of the garment resized by ``scale`` about its centroid."""
    x0 = scene.garment.positions
    if scale == 1.0:
        pos = x0
    else:
        c = x0.mean(0)
        pos = c + scale * (x0 - c)
    return compute_rest_geometry(TriMesh(pos, scene.garment.faces), density)


def autoregressive_steps(iteration: int, k: int = 5000, max_steps: int = 5) -> int:
    return min(1 + iteration // k, max_steps)


# -- windows ------------------------------------------------------------------

@dataclass
class Window:
    """A training or validation sample: one scene, one material draw, two history frames."""

    scene: Scene
    topo: GarmentTopology
    start_frame: int          # index of the first predicted frame
    state: SimState

    @property
    def physics(self) -> Physics:
        return self.topo.physics


def init_window(scene: Scene, start_frame: int, alpha: float = 1.0, diffused: bool = True) -> SimState:
    """History frames from skinning at ``start_frame - 2`` and ``start_frame - 1``, pushed out of the body."""
    if start_frame < 2:
        raise ValueError("start_frame must be >= 2 to provide two history frames")
    if start_frame > scene.num_frames - 1:
        raise ValueError("start_frame beyond the body motion")
    frames = []
    for f in (start_frame - 2, start_frame - 1):
        x = scene.skinned(f, diffused=diffused and scene.body is not None)
        if scene.body is not None:
            x = untangle(x, scene.body_positions(f), scene.body.faces, scene.config.collision_eps)
        if len(scene.pinned):
            x[scene.pinned] = scene.pinned_positions(f)
        frames.append(x)
    return SimState(frames[0], frames[1], scene.dt, alpha)


class _Hierarchies:
    """Per-scene garment hierarchies, built once."""

    def __init__(self, num_coarse_levels: int, seed: int):
        self.num_coarse_levels = num_coarse_levels
        self.seed = seed
        self._cache = {}

    def __call__(self, scene: Scene):
        key = scene.name
        if key not in self._cache:
            g = build_garment_graph(scene.garment, scene.pinned)
            self._cache[key] = build_hierarchy(g, self.num_coarse_levels, seed=self.seed)
        return self._cache[key]


def make_window(scene: Scene, hierarchy, start_frame, alpha, material=None, scale=1.0, diffused=True) -> Window:
    material = material or scene.material()
    rest = scaled_rest(scene, scale, material.density)
    physics = scene.physics(material, rest)
    topo = GarmentTopology.build(physics, hierarchy)
    return Window(scene, topo, start_frame, init_window(scene, start_frame, alpha, diffused))


# -- one step -----------------------------------------------------------------

def unroll(model: ClothNet, window: Window, n_steps: int, update: bool = False, track_loss: bool = True):
    """Autoregressive prediction of ``n_steps`` frames with the potential of each.

    Returns ``(loss, breakdowns, frames)``; the loss is the unweighted sum of
    the per-step potentials. The first step uses the window's alpha, the rest 1.
    """
    scene, topo, dt = window.scene, window.topo, window.scene.dt
    x_prev = torch.as_tensor(window.state.x_prev, dtype=DTYPE)
    x_curr = torch.as_tensor(window.state.x_curr, dtype=DTYPE)
    loss = torch.zeros((), dtype=DTYPE)
    rows, frames = [], []
    for s in range(n_steps):
        frame = window.start_frame - 1 + s
        alpha = window.state.alpha if s == 0 else 1.0
        body = scene.body_frames(frame)
        pins = scene.pinned_positions(frame + 1) if len(scene.pinned) else None
        x_next, _ = model(topo, x_prev, x_curr, dt, alpha, body, pins, update=update)
        cset = build_collision_set(x_curr.detach().numpy(), body.curr, body.next, body.faces) if body else None
        if track_loss:
            l, bd = potential_loss(x_next, x_curr, x_prev, topo.physics, dt, alpha, body, cset)
            loss = loss + l
        else:
            bd = total_potential(x_next.detach().numpy(), SimState(x_prev.detach().numpy(),
                                 x_curr.detach().numpy(), dt, alpha), topo.physics, body, cset)
        rows.append(bd)
        frames.append(x_next.detach().numpy().copy())
        x_prev, x_curr = x_curr, x_next
    return loss, rows, frames


def _summary(rows) -> dict:
    out = {t: float(np.mean([getattr(r, t) for r in rows])) for t in TERMS}
    out["total"] = float(np.mean([r.total for r in rows]))
    return out


def training_step(model: ClothNet, optimizer, window: Window, n_steps: int) -> dict:
    """Unroll, sum the potentials, backpropagate and apply one optimizer update.

    A non-finite loss or gradient skips the update; the returned row then has
    ``skipped = 1``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    optimizer.zero_grad(set_to_none=True)
    try:
        loss, rows, _ = unroll(model, window, n_steps, update=True)
        if not torch.isfinite(loss):
            raise FloatingPointError("non-finite loss")
        loss.backward()
        check_gradients(model)
    except FloatingPointError as exc:
        log.warning("skipping update: %s", exc)
        optimizer.zero_grad(set_to_none=True)
        return {"n_steps": n_steps, **{t: float("nan") for t in TERMS}, "total": float("nan"),
                "grad_norm": float("nan"), "skipped": 1}
    gnorm = math.sqrt(sum(float((p.grad**2).sum()) for p in model.parameters() if p.grad is not None))
    optimizer.step()
    row = {"n_steps": n_steps, **{t: sum(getattr(r, t) for r in rows) for t in TERMS},
           "total": float(loss.detach()), "grad_norm": gnorm, "skipped": 0}
    return row


# -- validation / evaluation ------------------------------------------------------

def validation_windows(config: TrainConfig, hierarchies, scenes: Optional[dict] = None) -> list:
    out = []
    alpha = 0.5 * (config.alpha_range[0] + config.alpha_range[1])
    scenes = scenes or {}
    for name in config.validation_scenes:
        scene = scenes.get(name) or get_scene(name)
        for start in config.val_starts:
            if start + config.val_steps - 1 <= scene.num_frames - 1:
                out.append(make_window(scene, hierarchies(scene), start, alpha, diffused=config.diffused_skinning))
    if not out:
        raise ValueError("no validation window fits the validation scenes")
    return out


@torch.no_grad()
def validate(model: ClothNet, windows: list, steps: int) -> dict:
    """Mean of each term over ``steps``-step autoregressive rollouts from fixed windows."""
    rows = []
    for w in windows:
        _, r, _ = unroll(model, w, steps, update=False, track_loss=False)
        rows.extend(r)
    return _summary(rows)


@torch.no_grad()
def network_rollout(model: ClothNet, scene: Scene, steps: int, hierarchy=None, alpha: float = 1.0,
                    num_coarse_levels: Optional[int] = None, seed: int = 0) -> Trajectory:
    """Autoregressive network rollout from the skinned rest frame (zero initial velocity)."""
    if hierarchy is None:
        ncl = model.config.num_levels - 1 if num_coarse_levels is None else num_coarse_levels
        hierarchy = _Hierarchies(ncl, seed)(scene)
    if scene.body is not None and steps > scene.num_frames - 1:
        raise ValueError(f"body motion covers {scene.num_frames} frames, {steps + 1} needed")
    topo = GarmentTopology.build(scene.physics(), hierarchy)
    x = scene.skinned(0)
    if scene.body is not None:
        x = untangle(x, scene.body_positions(0), scene.body.faces, scene.config.collision_eps)
    if len(scene.pinned):
        x[scene.pinned] = scene.pinned_positions(0)
    window = Window(scene, topo, 1, SimState(x, x, scene.dt, alpha))
    traj = Trajectory([x.copy()])
    if steps == 0:
        return traj
    _, rows, frames = unroll(model, window, steps, update=False, track_loss=False)
    traj.frames.extend(frames)
    traj.log.extend(rows)
    for n, f in enumerate(frames):
        if scene.body is not None:
            d, _ = signed_distances(f, scene.body_positions(n + 1), scene.body.faces)
            traj.penetration.append(float(np.mean(d < 0)))
        else:
            traj.penetration.append(0.0)
    return traj


def trajectory_row(label: str, scene: Scene, traj: Trajectory) -> dict:
    row = {"model": label, "scene": scene.name, **_summary(traj.log)}
    if scene.body is not None:
        bodies = [scene.body_positions(i) for i in range(len(traj.frames))]
        pen, frac = collision_metrics(traj.frames, bodies, scene.body.faces, scene.config.collision_eps,
                                      skip_first=True)
    else:
        pen, frac = 0.0, 0.0
    row["collision_metric"] = pen
    row["penetration_fraction"] = frac
    return row


EVAL_COLUMNS = ["model", "scene", "stretching", "bending", "inertia", "gravity", "collision", "friction",
                "total", "collision_metric", "penetration_fraction"]


def evaluate(models: dict, scenes: list, steps: int, out_csv=None, include_simulator=False, sim_opt=None) -> list:
    """One row per (model, scene): mean of each term over an autoregressive rollout plus collision metrics.

    ``models`` maps a label to a ``ClothNet``. With ``include_simulator`` the
    optimisation-based simulator is evaluated through the same path.
    """
    rows = []
    for name in scenes:
        scene = get_scene(name) if isinstance(name, str) else name
        for label, model in models.items():
            rows.append(trajectory_row(label, scene, network_rollout(model, scene, steps)))
        if include_simulator:
            rows.append(trajectory_row("simulator", scene, rollout(scene, steps, sim_opt)))
    if out_csv is not None:
        write_csv(out_csv, rows, EVAL_COLUMNS)
    return rows


def write_csv(path, rows, columns):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


# -- the loop -----------------------------------------------------------------

LOG_COLUMNS = ["iteration", "n_steps", *TERMS, "total", "grad_norm", "skipped"]
VAL_COLUMNS = ["iteration", *TERMS, "total"]


def build_model(config: TrainConfig) -> ClothNet:
    torch.manual_seed(config.seed)
    sched = resolve_schedule(config.schedule)
    return ClothNet(NetConfig(hidden=config.hidden, schedule=sched.to_list(),
                              num_levels=config.num_coarse_levels + 1))


def warmup_normalizers(model: ClothNet, config: TrainConfig, hierarchies, rng, scenes: Optional[dict] = None) -> None:
    """Seed the feature and output statistics from skinned garments of the training scenes."""
    scenes = scenes or {}
    for name in config.scenes:
        scene = scenes.get(name) or get_scene(name)
        frames = min(scene.num_frames, config.warmup_frames + 2)
        skinned = [scene.skinned(f, diffused=config.diffused_skinning and scene.body is not None)
                   for f in range(frames)]
        model.out_norm.update(skinned_accelerations(skinned, scene.dt))
        for f in range(2, frames):
            mat = sample_materials(rng, config.material_ranges, scene.num_nodes) \
                if config.randomize_materials else scene.material()
            topo = GarmentTopology.build(scene.physics(mat), hierarchies(scene))
            alpha = float(rng.uniform(*config.alpha_range))
            fs = build_features(topo, torch.as_tensor(skinned[f - 2]), torch.as_tensor(skinned[f - 1]),
                                scene.dt, alpha, scene.body_frames(f - 1))
            model.normalize(fs, update=True)


def _optimizer(model, config):
    return torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)


def _save(path, model, optimizer, config, iteration, rng, history):
    arrays = {}
    for i, p in enumerate(model.parameters()):
        st = optimizer.state.get(p)
        if st:
            arrays[f"adam/{i}/exp_avg"] = st["exp_avg"].detach().numpy()
            arrays[f"adam/{i}/exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()
            arrays[f"adam/{i}/step"] = np.asarray(float(st["step"]))
    meta = {"iteration": iteration, "train_config": config.to_dict(), "train_config_hash": config.digest(),
            "rng_state": rng.bit_generator.state, "validation": history}
    return model.save(path, meta, arrays)


def _restore_optimizer(optimizer, model, arrays):
    for i, p in enumerate(model.parameters()):
        if f"adam/{i}/exp_avg" in arrays:
            optimizer.state[p] = {
                "step": torch.tensor(float(arrays[f"adam/{i}/step"])),
                "exp_avg": torch.as_tensor(arrays[f"adam/{i}/exp_avg"], dtype=DTYPE).clone(),
                "exp_avg_sq": torch.as_tensor(arrays[f"adam/{i}/exp_avg_sq"], dtype=DTYPE).clone(),
            }


@dataclass
class TrainResult:
    model: ClothNet
    iteration: int
    log: list
    validation: list
    checkpoint: Optional[Path] = None


def train(config: TrainConfig, resume=None, stop_at: Optional[int] = None) -> TrainResult:
    """Run the training loop; deterministic for a given config.

    ``resume`` continues from a checkpoint written by this function.
    ``stop_at`` ends the run early (after that many total iterations) while
    keeping the schedule of the full run, which is how interrupted runs are
    emulated in tests.
    """
    hierarchies = _Hierarchies(config.num_coarse_levels, config.seed)
    scene_map = {name: get_scene(name) for name in dict.fromkeys(config.scenes + config.validation_scenes)}
    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        model, meta, arrays = ClothNet.load(resume)
        if meta.get("train_config_hash") != config.digest():
            raise ValueError("checkpoint was written with a different training config")
        optimizer = _optimizer(model, config)
        _restore_optimizer(optimizer, model, arrays)
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
        start = int(meta["iteration"])
        history = list(meta.get("validation", []))
    else:
        model = build_model(config)
        optimizer = _optimizer(model, config)
        rng = np.random.default_rng(config.seed)
        warmup_normalizers(model, config, hierarchies, rng, scene_map)
        start = 0
        history = []
    scenes = [scene_map[name] for name in config.scenes]
    val_windows = validation_windows(config, hierarchies, scene_map)
    if start == 0:
        history.append({"iteration": 0, **validate(model, val_windows, config.val_steps)})
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    rows = []
    ckpt = None
    it = start
    try:
        for it in range(start, end):
            n_steps = autoregressive_steps(it, config.k, config.max_steps)
            scene = scenes[int(rng.integers(len(scenes)))]
            last_start = scene.num_frames - n_steps
            if last_start < 2:
                raise ValueError(f"scene {scene.name} is too short for {n_steps} steps")
            t0 = int(rng.integers(2, last_start + 1))
            material = sample_materials(rng, config.material_ranges, scene.num_nodes) \
                if config.randomize_materials else scene.material()
            scale = sample_size(rng, config.size_range)
            alpha = float(rng.uniform(*config.alpha_range))
            window = make_window(scene, hierarchies(scene), t0, alpha, material, scale, config.diffused_skinning)
            row = training_step(model, optimizer, window, n_steps)
            row["iteration"] = it
            rows.append(row)
            done = it + 1
            if config.val_every and done % config.val_every == 0:
                history.append({"iteration": done, **validate(model, val_windows, config.val_steps)})
                log.info("iteration %d: validation total %.6g, stretching %.6g", done, history[-1]["total"],
                         history[-1]["stretching"])
            if out_dir and config.checkpoint_every and done % config.checkpoint_every == 0:
                ckpt = _save(out_dir / "checkpoint.npz", model, optimizer, config, done, rng, history)
                write_csv(out_dir / "validation.csv", history, VAL_COLUMNS)
        it = end
    except KeyboardInterrupt:
        if out_dir:
            _save(out_dir / "checkpoint.npz", model, optimizer, config, it, rng, history)
        raise
    if not history or history[-1]["iteration"] != it:
        history.append({"iteration": it, **validate(model, val_windows, config.val_steps)})
    if out_dir:
        ckpt = _save(out_dir / "checkpoint.npz", model, optimizer, config, it, rng, history)
        _append_log(out_dir / "train_log.csv", rows, start == 0)
        write_csv(out_dir / "validation.csv", history, VAL_COLUMNS)
    return TrainResult(model, it, rows, history, ckpt)


def _append_log(path, rows, fresh):
    mode = "w" if fresh or not Path(path).exists() else "a"
    with open(path, mode, newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        if mode == "w":
            w.writeheader()
        for r in rows:
            w.writerow(r)
