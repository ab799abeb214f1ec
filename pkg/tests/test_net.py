import numpy as np
import pytest
import torch

from hiercloth.energy import MaterialField, SimState
from hiercloth.graph import (GraphError, HierarchicalGraph, CoarseLevel, GarmentGraph, default_schedule,
                             fine_schedule, propagation_radius)
from hiercloth.gradcheck import finite_difference, relative_error
from hiercloth.net import (BODY_EDGE_WIDTH, EDGE_WIDTH, ClothNet, GarmentTopology, Mlp, NetConfig, Normalizer,
                           build_features, node_width, potential_loss)
from hiercloth.net.features import vertex_normals
from hiercloth.net.model import StageError, integrate, parameter_gradients

from net_helpers import grid_topology, ground_plate, measured_reach

DT = 1 / 30


def small_net(hidden=8, schedule=None, seed=0, levels=3):
    torch.manual_seed(seed)
    sched = schedule or [[0], [0, 1], [1, 2], [2], [1, 2], [0, 1], [0]]
    return ClothNet(NetConfig(hidden=hidden, schedule=sched, num_levels=levels))


def warm(model, topo, mesh, body=None, samples=5):
    """Feed a few perturbed states through the normalizers so their statistics are meaningful."""
    for s in range(samples):
        xp, xc = states(mesh, 100 + s)
        model.latents(topo, xp, xc, DT, 1.0, body, update=True)
    model.out_norm.update(np.random.default_rng(0).normal(scale=0.5, size=(200, 3)))


def states(mesh, seed=0, scale=0.01):
    rng = np.random.default_rng(seed)
    x_prev = mesh.positions + rng.normal(scale=scale, size=mesh.positions.shape)
    x_curr = mesh.positions + rng.normal(scale=scale, size=mesh.positions.shape)
    return torch.as_tensor(x_prev), torch.as_tensor(x_curr)


def test_net_config_validation():
    with pytest.raises(ValueError):
        NetConfig(hidden=3)
    with pytest.raises(ValueError):
        NetConfig(schedule=[[0], [0, 3]], num_levels=3)
    with pytest.raises(GraphError):
        NetConfig(schedule=[[0], [2]])
    cfg = NetConfig(hidden=16)
    assert NetConfig.from_dict(cfg.to_dict()) == cfg
    assert propagation_radius(default_schedule()) == 48 and len(cfg.steps) == 15


def test_feature_widths_three_levels():
    topo, mesh = grid_topology(5, levels=2)
    xp, xc = states(mesh)
    fs = build_features(topo, xp, xc, DT, 0.5, ground_plate())
    assert node_width(3) == 18
    assert fs.widths == (18, 12, 9)
    assert all(e.shape[1] == EDGE_WIDTH for e in fs.edges) and BODY_EDGE_WIDTH == 9
    assert len(fs.body_edges) > 0
    assert fs.node.shape[0] == 25 + 81


def test_feature_contents():
    topo, mesh = grid_topology(4, levels=2, pinned=[0])
    xp, xc = states(mesh)
    body = ground_plate(shift=(0.03, 0.0, 0.0))
    fs = build_features(topo, xp, xc, DT, 0.25, body)
    n = 16
    assert torch.allclose(fs.node[:n, 0:3], (xc - xp) / DT)
    assert torch.allclose(fs.node[:n, 6], topo.masses)
    assert torch.all(fs.node[:n, 10] == 0.25)
    assert fs.node[0, 12] == 1 and fs.node[1, 11] == 1  # pinned vs garment type
    body_rows = fs.node[n:]
    assert torch.all(body_rows[:, 6:10] == -1)
    assert torch.all(body_rows[:, 13] == 1) and torch.all(body_rows[:, -1] == 1)
    assert torch.allclose(body_rows[:, 0:3], torch.tensor([0.9, 0.0, 0.0], dtype=torch.float64))
    # deepest-level one-hot agrees with the hierarchy
    deep = topo.hierarchy.deepest_level
    assert torch.equal(fs.node[:n, 14:17].argmax(1), torch.as_tensor(deep))
    e0 = fs.edges[0]
    s, r = topo.level_edges[0]
    assert torch.allclose(e0[:, 0:3], xc[r] - xc[s])
    assert torch.allclose(e0[:, 3], torch.linalg.norm(xc[r] - xc[s], dim=1))
    gi, bj = fs.body_index[1], fs.body_index[0] - n
    assert torch.allclose(fs.body_edges[:, 0:3], xc[gi] - torch.as_tensor(body.curr)[bj])
    assert torch.allclose(fs.body_edges[:, 4:7], xc[gi] - torch.as_tensor(body.next)[bj])


def test_feature_gradients_match_fd():
    topo, mesh = grid_topology(3, levels=1)
    xp, xc = states(mesh, 1)
    xc = xc.clone().requires_grad_(True)
    body = ground_plate(z=-0.01)

    def scalar(x):
        fs = build_features(topo, xp, x, DT, 1.0, body)
        w = torch.linspace(0.1, 1, fs.node.numel(), dtype=torch.float64).reshape(fs.node.shape)
        # only the position-dependent edge columns: constant material columns swamp the difference quotient
        return (fs.node * w).sum() + (fs.edges[0][:, :4] ** 2).sum() + (fs.body_edges ** 2).sum()

    g, = torch.autograd.grad(scalar(xc), xc)
    fd = finite_difference(lambda y: float(scalar(torch.as_tensor(y))), xc.detach().numpy())
    assert relative_error(g.numpy(), fd) < 1e-5


def test_vertex_normals_gradcheck():
    topo, mesh = grid_topology(3, levels=1)
    x = torch.as_tensor(mesh.positions + np.random.default_rng(0).normal(scale=0.02, size=(9, 3)))
    x.requires_grad_(True)
    assert torch.autograd.gradcheck(lambda y: vertex_normals(y, topo.faces), (x,), eps=1e-6, atol=1e-6)


def test_mlp_shapes_and_zero_weights():
    mlp = Mlp(5, 8, 3)
    assert mlp(torch.zeros(4, 5, dtype=torch.float64)).shape == (4, 3)
    b = torch.tensor([0.3, -1.0, 2.0], dtype=torch.float64)
    with torch.no_grad():
        for p in mlp.parameters():
            p.zero_()
        mlp.net[-1].bias.copy_(b)
    out = mlp(torch.randn(6, 5, dtype=torch.float64))
    assert torch.allclose(out, b.expand(6, 3))


def test_model_mlp_counts_follow_schedule():
    model = small_net()
    assert len(model.edge_encoders) + 2 == 5  # M + 2 encoders for M = 3 levels
    for step, mods in zip(model.config.steps, model.steps):
        assert len(mods) == len(step) + 2
        assert set(mods) == {f"edge{l}" for l in step} | {"body", "node"}


def test_encode_zero_weights_gives_bias():
    model = small_net(hidden=6)
    topo, mesh = grid_topology(4)
    xp, xc = states(mesh)
    b = torch.arange(6, dtype=torch.float64)
    with torch.no_grad():
        for p in model.node_encoder.parameters():
            p.zero_()
        model.node_encoder.net[-1].bias.copy_(b)
    fs = model.normalize(build_features(topo, xp, xc, DT, 1.0))
    v, e, eb = model.encode(fs)
    assert torch.allclose(v, b.expand_as(v))
    assert v.shape[1] == 6 and all(x.shape[1] == 6 for x in e)


def _zero_outputs(mlps):
    with torch.no_grad():
        for m in mlps:
            m.net[-1].weight.zero_()
            m.net[-1].bias.zero_()


def test_identity_step_when_updates_vanish():
    model = small_net()
    topo, mesh = grid_topology(4)
    xp, xc = states(mesh)
    body = ground_plate(z=-0.01)
    fs = model.normalize(build_features(topo, xp, xc, DT, 1.0, body))
    v, e, eb = model.encode(fs)
    _zero_outputs([m for step in model.steps for m in step.values()])
    v2, e2, eb2 = v, e, eb
    for k in range(len(model.steps)):
        v2, e2, eb2 = model.message_passing_step(k, v2, e2, eb2, fs, topo)
    assert torch.equal(v2, v) and torch.equal(eb2, eb)
    assert all(torch.equal(a, b) for a, b in zip(e, e2))


def test_inactive_nodes_unchanged():
    model = small_net(schedule=[[0], [0, 1], [1, 2], [2]])
    topo, mesh = grid_topology(5)
    xp, xc = states(mesh)
    fs = model.normalize(build_features(topo, xp, xc, DT, 1.0))
    v, e, eb = model.encode(fs)
    v1, _, _ = model.message_passing_step(3, v, e, eb, fs, topo)
    inactive = np.setdiff1d(np.arange(25), topo.level_nodes[2].numpy())
    assert torch.equal(v1[inactive], v[inactive])
    assert not torch.equal(v1[topo.level_nodes[2]], v[topo.level_nodes[2]])


def test_isolated_node_empty_sums():
    # node 4 has no edges at all: its aggregated messages must be zero, not NaN
    graph = GarmentGraph(5, np.array([[0, 1], [1, 2], [2, 3]]), np.zeros(5, dtype=np.int64))
    from hiercloth.graph import build_hierarchy
    hier = build_hierarchy(graph, 2)
    from hiercloth.assets import TriMesh, compute_rest_geometry
    from hiercloth.energy import Physics
    pos = np.column_stack([np.arange(5) * 0.1, np.zeros(5), np.zeros(5)])
    rest = compute_rest_geometry(TriMesh(pos, np.zeros((0, 3), dtype=np.int64)))
    topo = GarmentTopology.build(Physics(rest, MaterialField.uniform(5), mass_override=np.full(5, 0.01)), hier)
    model = small_net()
    x = torch.as_tensor(pos)
    a = model.accelerations(topo, x, x, DT, 1.0)
    assert torch.isfinite(a).all()


def test_decode_zero_weights_returns_output_mean():
    model = small_net()
    model.out_norm.update(np.array([[1.0, -2.0, 3.0], [3.0, 2.0, 5.0]]))
    _zero_outputs([model.decoder])
    topo, mesh = grid_topology(4)
    xp, xc = states(mesh)
    a = model.accelerations(topo, xp, xc, DT, 1.0)
    assert a.shape == (16, 3)
    assert torch.allclose(a, torch.tensor([2.0, 0.0, 4.0], dtype=torch.float64).expand(16, 3))


def test_integrate_zero_acceleration_advects():
    rng = np.random.default_rng(0)
    xp, xc = (torch.as_tensor(a) for a in rng.normal(size=(2, 5, 3)))
    out = integrate(xp, xc, torch.zeros(5, 3, dtype=torch.float64), DT)
    assert torch.allclose(out, xc + (xc - xp))


def test_forward_pinned_and_deterministic():
    topo, mesh = grid_topology(4, pinned=[0, 3])
    model = small_net()
    xp, xc = states(mesh)
    pins = np.array([[9.0, 9.0, 9.0], [-9.0, 0.0, 1.0]])
    x1, a1 = model(topo, xp, xc, DT, 1.0, ground_plate(), pins)
    x2, a2 = model(topo, xp, xc, DT, 1.0, ground_plate(), pins)
    assert torch.equal(x1, x2) and torch.equal(a1, a2)
    assert np.array_equal(x1[[0, 3]].detach().numpy(), pins)


def test_forward_names_failing_stage():
    topo, mesh = grid_topology(4)
    xp, xc = states(mesh)
    xc = xc.clone()
    xc[2, 1] = float("nan")
    with pytest.raises(StageError, match="feature construction"):
        small_net()(topo, xp, xc, DT, 1.0)


def test_level_count_mismatch():
    topo, mesh = grid_topology(4, levels=1)
    xp, xc = states(mesh)
    with pytest.raises(ValueError):
        small_net()(topo, xp, xc, DT, 1.0)


def test_permutation_equivariance():
    topo, mesh = grid_topology(5)
    model = small_net()
    xp, xc = states(mesh, 3)
    perm = np.random.default_rng(0).permutation(25)   # new label of old node i is perm[i]
    inv = np.argsort(perm)
    h = topo.hierarchy
    levels = [CoarseLevel(lv.level, np.sort(perm[lv.kept_nodes]), np.sort(perm[lv.edges], axis=1), lv.centers)
              for lv in h.levels]
    base = GarmentGraph(25, levels[0].edges, h.base.node_type[inv])
    hier_p = HierarchicalGraph(base, levels, h.deepest_level[inv])
    from hiercloth.assets import TriMesh, compute_rest_geometry
    from hiercloth.energy import Physics
    mesh_p = TriMesh(mesh.positions[inv], perm[mesh.faces])
    rest_p = compute_rest_geometry(mesh_p)
    topo_p = GarmentTopology.build(Physics(rest_p, MaterialField.uniform(25), body_edge_radius=0.05), hier_p)
    body = ground_plate(z=-0.005)
    a = model.accelerations(topo, xp, xc, DT, 1.0, body)
    a_p = model.accelerations(topo_p, xp[inv], xc[inv], DT, 1.0, body)
    assert torch.allclose(a_p, a[inv], rtol=1e-9, atol=1e-9)


def test_parameter_gradient_contracts():
    model = small_net()
    w = model.decoder.net[0].weight
    grads = parameter_gradients(model, w.sum())
    name = [n for n, p in model.named_parameters() if p is w][0]
    assert np.array_equal(grads[name], np.ones(w.shape))
    assert all(np.abs(g).max() == 0 for n, g in grads.items() if n != name)
    const = parameter_gradients(model, torch.tensor(3.0, dtype=torch.float64))
    assert all(np.abs(g).max() == 0 for g in const.values())
    with pytest.raises(FloatingPointError):
        parameter_gradients(model, w.sum() * float("inf"))


def _param_fd_check(loss_fn, model, count=25, seed=0, h=1e-6):
    params = dict(model.named_parameters())
    loss = loss_fn()
    grads = parameter_gradients(model, loss)
    rng = np.random.default_rng(seed)
    names = sorted(params)
    worst = 0.0
    analytic, numeric = [], []
    for _ in range(count):
        name = names[rng.integers(len(names))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + h
            up = float(loss_fn())
            p[idx] = old - h
            down = float(loss_fn())
            p[idx] = old
        analytic.append(grads[name][idx])
        numeric.append((up - down) / (2 * h))
    return relative_error(np.array(analytic), np.array(numeric))


def test_parameter_gradients_match_fd():
    topo, mesh = grid_topology(4)
    model = small_net(hidden=8, seed=4)
    xp, xc = states(mesh, 5)
    body = ground_plate(z=-0.01)
    target = torch.as_tensor(np.random.default_rng(1).normal(size=(16, 3)))
    warm(model, topo, mesh, body)
    fn = lambda: ((model.accelerations(topo, xp, xc, DT, 1.0, body) - target) ** 2).sum()
    assert _param_fd_check(fn, model) < 1e-5


def test_potential_loss_end_to_end_fd():
    rng = np.random.default_rng(2)
    mat = MaterialField(rng.uniform(10, 1000, 16), rng.uniform(10, 1000, 16), rng.uniform(1e-6, 1e-3, 16),
                        rng.uniform(0.1, 0.5, 16))
    topo, mesh = grid_topology(4, material=mat)
    model = small_net(hidden=8, seed=6)
    xp, xc = states(mesh, 7, scale=0.003)
    body = ground_plate(z=-0.008)
    warm(model, topo, mesh, body)

    def fn():
        x_next, _ = model(topo, xp, xc, DT, 0.3, body)
        return potential_loss(x_next, xc, xp, topo.physics, DT, 0.3, body)[0]

    assert _param_fd_check(fn, model, count=30, seed=1) < 1e-5


def test_potential_loss_history_gradients():
    topo, mesh = grid_topology(4)
    xp, xc = states(mesh, 8)
    xn = torch.as_tensor(mesh.positions).clone()
    xs = [t.clone().requires_grad_(True) for t in (xn, xc, xp)]
    body = ground_plate(z=-0.01)
    loss, bd = potential_loss(*xs, topo.physics, DT, 0.5, body)
    assert float(loss.detach()) == pytest.approx(bd.total)
    loss.backward()
    for k, t in enumerate(xs):
        def f(y, k=k):
            args = [a.detach() for a in xs]
            args[k] = torch.as_tensor(y)
            return float(potential_loss(*args, topo.physics, DT, 0.5, body)[0])
        assert relative_error(t.grad.numpy(), finite_difference(f, t.detach().numpy())) < 1e-5


def test_checkpoint_roundtrip(tmp_path):
    topo, mesh = grid_topology(4)
    model = small_net()
    model.node_norm.update(np.random.default_rng(0).normal(size=(10, 18)))
    xp, xc = states(mesh)
    path = model.save(tmp_path / "m.npz", meta={"iteration": 7}, arrays={"x": np.arange(3)})
    back, meta, arrays = ClothNet.load(path)
    assert meta == {"iteration": 7} and arrays["x"].tolist() == [0, 1, 2]
    assert torch.equal(back.accelerations(topo, xp, xc, DT, 1.0), model.accelerations(topo, xp, xc, DT, 1.0))
    with np.load(path) as z:
        assert all(z[k].dtype == np.dtype("<f8") for k in z.files if k.startswith("state/"))
    bad = dict(np.load(path))
    bad["format"] = np.array("other")
    np.savez(tmp_path / "bad.npz", **bad)
    with pytest.raises(ValueError):
        ClothNet.load(tmp_path / "bad.npz")


def test_normalizer_basics():
    norm = Normalizer(2, decay=0.99, eps_std=1e-3)
    for _ in range(500):
        norm.update(np.full((4, 2), 3.0))
    assert torch.allclose(norm(torch.full((1, 2), 3.0, dtype=torch.float64)), torch.zeros(1, 2, dtype=torch.float64))
    assert torch.all(norm.std >= 1e-3)
    before = norm.mean.clone(), norm.sq_mean.clone(), norm.count.clone()
    norm(torch.randn(5, 2, dtype=torch.float64), update=False)
    assert all(torch.equal(a, b) for a, b in zip(before, (norm.mean, norm.sq_mean, norm.count)))
    y = torch.randn(3, 2, dtype=torch.float64)
    assert torch.allclose(norm(norm.inverse(y)), y)
    with pytest.raises(ValueError):
        norm(torch.zeros(1, 3, dtype=torch.float64))
    with pytest.raises(ValueError):
        Normalizer(2, decay=1.0)


def test_normalizer_tracks_stationary_stream():
    rho = 0.99
    norm = Normalizer(3, decay=rho)
    rng = np.random.default_rng(0)
    mu, sd = np.array([1.0, -4.0, 0.5]), np.array([0.5, 0.3, 0.1])
    seen = []
    for _ in range(int(10 / (1 - rho))):
        b = mu + sd * rng.standard_normal((64, 3))
        seen.append(b)
        norm.update(b)
    allb = np.concatenate(seen)
    assert np.abs(norm.mean.numpy() - allb.mean(0)).max() < 1e-2
    assert np.abs(norm.std.numpy() - allb.std(0)).max() < 1e-2


def test_reach_fine_schedule_small():
    reach, mismatches = measured_reach(fine_schedule(4).steps, n=30)
    assert reach == 4 and mismatches == 0
