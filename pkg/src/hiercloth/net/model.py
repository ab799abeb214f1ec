"""Encoder, scheduled multi-level message passing and decoder."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from ..energy import BodyFrames
from ..graph import Schedule, default_schedule
from .features import BODY_EDGE_WIDTH, DTYPE, EDGE_WIDTH, FeatureSet, GarmentTopology, build_features, node_width
from .normalizer import Normalizer

CHECKPOINT_FORMAT = "hiercloth-checkpoint-v1"


class StageError(FloatingPointError):
    """Non-finite values produced by a named stage of the network."""

    def __init__(self, stage: str):
        super().__init__(f"non-finite values after {stage}")
        self.stage = stage


@dataclass
class NetConfig:
    hidden: int = 128
    schedule: list = field(default_factory=lambda: default_schedule().to_list())
    num_levels: int = 3
    decay: float = 0.999
    eps_std: float = 1e-8

    def __post_init__(self):
        if self.hidden < 4:
            raise ValueError("hidden size must be at least 4")
        sched = Schedule(self.schedule)
        if sched.max_level >= self.num_levels:
            raise ValueError(f"schedule uses level {sched.max_level} but the hierarchy has {self.num_levels} levels")
        self.schedule = sched.to_list()

    @property
    def steps(self):
        return Schedule(self.schedule).steps

    def to_dict(self) -> dict:
        return {"hidden": self.hidden, "schedule": self.schedule, "num_levels": self.num_levels,
                "decay": self.decay, "eps_std": self.eps_std}

    @classmethod
    def from_dict(cls, d) -> "NetConfig":
        return cls(**d)


class Mlp(nn.Module):
    """Two hidden layers (linear, ReLU, layer norm) and a linear output layer."""

    def __init__(self, width_in: int, hidden: int, width_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(width_in, hidden, dtype=DTYPE), nn.ReLU(), nn.LayerNorm(hidden, dtype=DTYPE),
            nn.Linear(hidden, hidden, dtype=DTYPE), nn.ReLU(), nn.LayerNorm(hidden, dtype=DTYPE),
            nn.Linear(hidden, width_out, dtype=DTYPE),
        )

    def forward(self, x):
        return self.net(x)


def _check(t: torch.Tensor, stage: str):
    if not torch.isfinite(t).all():
        raise StageError(stage)
    return t


class ClothNet(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        h, L = config.hidden, config.num_levels
        self.node_norm = Normalizer(node_width(L), config.decay, config.eps_std)
        self.edge_norms = nn.ModuleList(Normalizer(EDGE_WIDTH, config.decay, config.eps_std) for _ in range(L))
        self.body_norm = Normalizer(BODY_EDGE_WIDTH, config.decay, config.eps_std)
        self.out_norm = Normalizer(3, config.decay, config.eps_std)

        self.node_encoder = Mlp(node_width(L), h, h)
        self.edge_encoders = nn.ModuleList(Mlp(EDGE_WIDTH, h, h) for _ in range(L))
        self.body_encoder = Mlp(BODY_EDGE_WIDTH, h, h)
        self.steps = nn.ModuleList()
        for levels in config.steps:
            mods = {f"edge{l}": Mlp(3 * h, h, h) for l in levels}
            mods["body"] = Mlp(3 * h, h, h)
            mods["node"] = Mlp((2 + len(levels)) * h, h, h)
            self.steps.append(nn.ModuleDict(mods))
        self.decoder = Mlp(h, h, 3)

    # -- stages -------------------------------------------------------------

    def normalize(self, fs: FeatureSet, update: bool = False) -> FeatureSet:
        node = self.node_norm(fs.node, update)
        edges = [norm(e, update) for norm, e in zip(self.edge_norms, fs.edges)]
        body = self.body_norm(fs.body_edges, update) if len(fs.body_edges) else fs.body_edges
        return FeatureSet(node, edges, body, fs.body_index, fs.num_garment)

    def encode(self, fs: FeatureSet):
        v = self.node_encoder(fs.node)
        e = [enc(x) for enc, x in zip(self.edge_encoders, fs.edges)]
        h = self.config.hidden
        eb = self.body_encoder(fs.body_edges) if len(fs.body_edges) else torch.zeros((0, h), dtype=DTYPE)
        return v, e, eb

    def message_passing_step(self, k: int, v, e, eb, fs: FeatureSet, topo: GarmentTopology):
        """One scheduled step: level edge updates, restricted body-edge update, then active-node update."""
        levels = self.config.steps[k]
        mods = self.steps[k]
        active = topo.level_nodes[min(levels)]
        e = list(e)
        for l in levels:
            s, r = topo.level_edges[l]
            if len(s):
                e[l] = e[l] + mods[f"edge{l}"](torch.cat([e[l], v[r], v[s]], dim=1))
        total = v.shape[0]
        is_active = torch.zeros(total, dtype=torch.bool)
        is_active[active] = True
        agg_body = torch.zeros_like(v)
        if eb.shape[0]:
            bs, br = fs.body_index
            sel = torch.nonzero(is_active[br]).reshape(-1)
            if len(sel):
                upd = mods["body"](torch.cat([eb[sel], v[br[sel]], v[bs[sel]]], dim=1))
                eb = eb.index_add(0, sel, upd)
                agg_body = agg_body.index_add(0, br[sel], eb[sel])
        parts = [v[active], agg_body[active]]
        for l in levels:
            s, r = topo.level_edges[l]
            parts.append(torch.zeros_like(v).index_add(0, r, e[l])[active])
        v = v.index_add(0, active, mods["node"](torch.cat(parts, dim=1)))
        return v, e, eb

    def decode(self, v, num_garment: int):
        return self.out_norm.inverse(self.decoder(v[:num_garment]))

    # -- full pipeline -------------------------------------------------------

    def latents(self, topo: GarmentTopology, x_prev, x_curr, dt, alpha, body: Optional[BodyFrames] = None,
                update: bool = False, node_perturbation=None):
        """Node latents after the full schedule; used by ``accelerations`` and by reach tests."""
        if topo.num_levels != self.config.num_levels:
            raise ValueError(f"model expects {self.config.num_levels} levels, hierarchy has {topo.num_levels}")
        fs = build_features(topo, x_prev, x_curr, dt, alpha, body)
        _check(fs.node, "feature construction")
        if node_perturbation is not None:
            fs = FeatureSet(fs.node + node_perturbation, fs.edges, fs.body_edges, fs.body_index, fs.num_garment)
        fs = self.normalize(fs, update)
        _check(fs.node, "normalization")
        v, e, eb = self.encode(fs)
        _check(v, "encoding")
        for k in range(len(self.steps)):
            v, e, eb = self.message_passing_step(k, v, e, eb, fs, topo)
            _check(v, f"message passing step {k}")
        return v, fs

    def accelerations(self, topo, x_prev, x_curr, dt, alpha, body=None, update=False):
        v, fs = self.latents(topo, x_prev, x_curr, dt, alpha, body, update)
        return _check(self.decode(v, fs.num_garment), "decoding")

    def forward(self, topo: GarmentTopology, x_prev, x_curr, dt: float, alpha: float,
                body: Optional[BodyFrames] = None, pinned_positions=None, update: bool = False):
        """Predicted end-of-step positions and accelerations.

        ``v' = v + dt a`` and ``x' = x + dt v'``; pinned rows are replaced by
        ``pinned_positions``.
        """
        x_prev = torch.as_tensor(x_prev, dtype=DTYPE)
        x_curr = torch.as_tensor(x_curr, dtype=DTYPE)
        a = self.accelerations(topo, x_prev, x_curr, dt, alpha, body, update)
        x_next = integrate(x_prev, x_curr, a, dt)
        if len(topo.pinned) and pinned_positions is not None:
            x_next = x_next.index_put((topo.pinned,), torch.as_tensor(pinned_positions, dtype=DTYPE))
        return _check(x_next, "integration"), a

    # -- persistence ---------------------------------------------------------

    def save(self, path, meta: Optional[dict] = None, arrays: Optional[dict] = None):
        """Versioned ``.npz``: config JSON, float64 little-endian tensors, normalizer buffers, extras."""
        out = {"format": np.array(CHECKPOINT_FORMAT), "config": np.array(json.dumps(self.config.to_dict())),
               "meta": np.array(json.dumps(meta or {}))}
        for name, t in self.state_dict().items():
            out[f"state/{name}"] = t.detach().numpy().astype("<f8")
        for name, a in (arrays or {}).items():
            out[f"extra/{name}"] = np.asarray(a)
        path = Path(path)
        with open(path, "wb") as fh:
            np.savez(fh, **out)
        return path

    @classmethod
    def load(cls, path):
        """Returns ``(model, meta, arrays)``."""
        with np.load(path, allow_pickle=False) as z:
            fmt = str(z["format"])
            if fmt != CHECKPOINT_FORMAT:
                raise ValueError(f"unsupported checkpoint format {fmt!r}")
            model = cls(NetConfig.from_dict(json.loads(str(z["config"]))))
            state = {k[6:]: torch.as_tensor(z[k], dtype=DTYPE) for k in z.files if k.startswith("state/")}
            model.load_state_dict(state)
            meta = json.loads(str(z["meta"]))
            arrays = {k[6:]: z[k] for k in z.files if k.startswith("extra/")}
        return model, meta, arrays


def integrate(x_prev, x_curr, a, dt):
    v = (x_curr - x_prev) / dt
    return x_curr + dt * (v + dt * a)


def parameter_gradients(model: nn.Module, loss: torch.Tensor) -> dict:
    """Gradient of a scalar loss for every parameter; unreached parameters get zeros."""
    if not torch.isfinite(loss):
        raise FloatingPointError("loss is not finite")
    named = list(model.named_parameters())
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True, retain_graph=False) \
        if loss.requires_grad else [None] * len(named)
    out = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
        out[name] = g.detach().numpy().copy()
    return out


def check_gradients(model: nn.Module):
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
