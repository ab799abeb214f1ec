import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiercloth.assets import (BodyMotion, MeshError, ObjParseError, SceneConfig, TriMesh, compute_normals,
                              compute_rest_geometry, dihedral_angles, find_hinges, flatten_triangles, load_obj,
                              save_frame, unique_edges)
from hiercloth.scenes import grid_mesh

from conftest import single_triangle


def test_load_single_triangle(tmp_path):
    p = tmp_path / "tri.obj"
    p.write_text("# a triangle\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    m = load_obj(p)
    assert m.num_vertices == 3
    assert m.faces.tolist() == [[0, 1, 2]]


def test_load_ignores_texture_and_normal_slots(tmp_path):
    p = tmp_path / "tri.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nvn 0 0 1\n"
                 "usemtl cloth\ns off\nf 1/1/1 2/2/1 3/3/1\n")
    m = load_obj(p)
    assert m.faces.tolist() == [[0, 1, 2]]
    assert m.uv.shape == (3, 2)


def test_out_of_range_index_names_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\n\nf 1 2 5\n")
    with pytest.raises(ObjParseError) as err:
        load_obj(p)
    assert err.value.lineno == 5
    assert ":5:" in str(err.value)


def test_malformed_record_names_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 zero 0\n")
    with pytest.raises(ObjParseError) as err:
        load_obj(p)
    assert err.value.lineno == 2


def test_quad_is_fan_triangulated_and_negative_indices(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf -4 -3 -2 -1\n")
    m = load_obj(p)
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_roundtrip_single_triangle(tmp_path):
    m = single_triangle((0.1234567, -2.5, 3.0), (1.0, 1e-7, 0.0), (0.0, 1.0, 7.25))
    save_frame(m.positions, m.faces, tmp_path / "t.obj")
    back = load_obj(tmp_path / "t.obj")
    assert np.abs(back.positions - m.positions).max() < 1e-6
    assert (back.faces == m.faces).all()


def test_roundtrip_grid(tmp_path):
    m = grid_mesh(21, 21, 0.04)
    save_frame(m.positions, m.faces, tmp_path / "g.obj")
    back = load_obj(tmp_path / "g.obj")
    assert back.num_vertices == 441 and back.num_faces == m.num_faces


def test_save_to_unwritable_path_raises(tmp_path):
    m = single_triangle()
    with pytest.raises(OSError):
        save_frame(m.positions, m.faces, tmp_path / "missing_dir" / "t.obj")


def test_validate_rejects_bad_faces():
    with pytest.raises(MeshError):
        TriMesh(np.zeros((3, 3)), [[0, 1, 3]]).validate()
    with pytest.raises(MeshError):
        TriMesh(np.zeros((3, 3)), [[0, 1, 1]]).validate()


def test_orientation_check():
    assert TriMesh(np.zeros((4, 3)), [[0, 1, 2], [0, 2, 3]]).is_consistently_oriented()
    assert not TriMesh(np.zeros((4, 3)), [[0, 1, 2], [0, 1, 3]]).is_consistently_oriented()


def test_unit_right_triangle_masses():
    rest = compute_rest_geometry(single_triangle(), density=1.0)
    assert np.allclose(rest.masses, 1.0 / 6.0)


def test_degenerate_triangle_named():
    m = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], float), [[0, 1, 3], [0, 1, 2]])
    with pytest.raises(MeshError, match="face 1"):
        compute_rest_geometry(m)


def test_flat_grid_dihedrals_are_pi():
    rest = compute_rest_geometry(grid_mesh(3, 3, 0.5))
    assert len(rest.hinges) > 0
    assert np.allclose(rest.rest_dihedrals, math.pi)


def test_equilateral_rest_frame():
    m = single_triangle((0, 0, 0), (1, 0, 0), (0.5, math.sqrt(3) / 2, 0))
    rest = compute_rest_geometry(m)
    dm = np.linalg.inv(rest.rest2d[0])
    c0, c1 = dm[:, 0], dm[:, 1]
    assert np.isclose(np.linalg.norm(c0), 1) and np.isclose(np.linalg.norm(c1), 1)
    assert np.isclose(math.degrees(math.acos(c0 @ c1)), 60.0)


def test_hinge_folded_to_right_angle():
    # square of side 1 folded along its diagonal a-b
    x = np.array([[0, 0, 0], [1, 1, 0], [1, 0, 0], [0, 1, 0]], float)
    h = find_hinges([[0, 1, 2], [1, 0, 3]])
    assert h.tolist() == [[0, 1, 2, 3]]
    assert np.isclose(dihedral_angles(x, h)[0], math.pi)
    mid = np.array([0.5, 0.5, 0.0])
    folded = x.copy()
    folded[3] = mid + np.array([0.0, 0.0, math.sqrt(0.5)])
    assert np.isclose(dihedral_angles(folded, h)[0], math.pi / 2)


def test_normals_flat_grid_and_isolated_vertex():
    m = grid_mesh(3, 3, 1.0)
    assert np.allclose(compute_normals(m), [0, 0, 1])
    lone = TriMesh(np.vstack([m.positions, [[5, 5, 5]]]), m.faces)
    n = compute_normals(lone)
    assert np.allclose(n[-1], [0, 0, 1])


def test_cube_corner_normal():
    # three faces of a unit cube meeting at the origin, oriented outwards
    x = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [0, 1, 1], [1, 0, 1]], float)
    faces = [[0, 2, 4], [0, 4, 1], [0, 1, 6], [0, 6, 3], [0, 3, 5], [0, 5, 2]]
    n = compute_normals(TriMesh(x, faces))
    assert np.allclose(n[0], -np.ones(3) / math.sqrt(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.floats(0.01, 2.0), st.floats(0.05, 3.0), st.integers(0, 10**6))
def test_mass_conservation_and_isometry(nu, nv, spacing, density, seed):
    rng = np.random.default_rng(seed)
    m = grid_mesh(nu, nv, spacing)
    m = TriMesh(m.positions + rng.normal(scale=0.1 * spacing, size=m.positions.shape), m.faces)
    rest = compute_rest_geometry(m, density)
    assert np.isclose(rest.masses.sum(), density * rest.rest_areas.sum(), rtol=1e-9)
    dm = flatten_triangles(m.positions, m.faces)
    x = m.positions
    for k, (i, j) in enumerate([(1, 0), (2, 0)]):
        l3 = np.linalg.norm(x[m.faces[:, i]] - x[m.faces[:, j]], axis=1)
        l2 = np.linalg.norm(dm[:, :, k], axis=1)
        assert np.allclose(l2, l3, rtol=1e-9)
    l3 = np.linalg.norm(x[m.faces[:, 2]] - x[m.faces[:, 1]], axis=1)
    assert np.allclose(np.linalg.norm(dm[:, :, 1] - dm[:, :, 0], axis=1), l3, rtol=1e-9)
    assert np.all(np.isfinite(np.linalg.cond(rest.rest2d)))


def test_unique_edges_of_quad():
    assert unique_edges([[0, 1, 2], [0, 2, 3]]).tolist() == [[0, 1], [0, 2], [0, 3], [1, 2], [2, 3]]


def test_scene_config_validation(tmp_path):
    with pytest.raises(ValueError):
        SceneConfig("g.obj", collision_eps=0.0)
    with pytest.raises(ValueError):
        SceneConfig("g.obj", collision_eps=0.01, body_edge_radius=0.005)
    with pytest.raises(ValueError):
        SceneConfig("g.obj", dt=0.0)
    with pytest.raises(ValueError, match="unknown"):
        SceneConfig.from_dict({"garment": "g.obj", "colour": "red"})
    p = tmp_path / "scene.json"
    p.write_text(json.dumps({"garment": "g.obj", "pinned": [3, 1]}))
    cfg = SceneConfig.load(p)
    assert cfg.garment == str(tmp_path / "g.obj")
    assert cfg.pinned == [3, 1]


def test_body_motion_interpolates():
    frames = np.stack([np.zeros((2, 3)), np.ones((2, 3))])
    bm = BodyMotion(frames, np.zeros((0, 3)), dt=0.5)
    assert np.allclose(bm.at(0.25), 0.5)
    assert np.allclose(bm.at(10.0), 1.0)
    with pytest.raises(MeshError):
        BodyMotion(frames, np.zeros((0, 3)), dt=0.0)
