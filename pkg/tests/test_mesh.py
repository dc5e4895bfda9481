import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multichart import fixtures as fx
from multichart.mesh import (AlignmentTransform, LandmarkSet, Mesh, MeshError, ObjParseError, fit_similarity,
                             load_landmarks, load_obj, normalize_mesh, procrustes_align, validate_genus_zero,
                             write_landmarks, write_obj)

from conftest import random_rotation


def torus_mesh(nu=8, nv=6):
    verts, faces = [], []
    for i in range(nu):
        for j in range(nv):
            a, b = 2 * np.pi * i / nu, 2 * np.pi * j / nv
            verts.append([(2 + np.cos(b)) * np.cos(a), (2 + np.cos(b)) * np.sin(a), np.sin(b)])
    for i in range(nu):
        for j in range(nv):
            p, q = i * nv + j, ((i + 1) % nu) * nv + j
            pn, qn = i * nv + (j + 1) % nv, ((i + 1) % nu) * nv + (j + 1) % nv
            faces += [[p, q, qn], [p, qn, pn]]
    return Mesh(np.array(verts), np.array(faces))


def euler_brute(m):
    e = {tuple(sorted((f[s], f[(s + 1) % 3]))) for f in m.faces.tolist() for s in range(3)}
    return m.n_vertices - len(e) + m.n_faces


def test_load_tetrahedron_obj(tmp_path, tetra):
    write_obj(tetra, tmp_path / "t.obj")
    text = (tmp_path / "t.obj").read_text().splitlines()
    assert sum(l.startswith("v ") for l in text) == 4
    assert sum(l.startswith("f ") for l in text) == 4
    m = load_obj(tmp_path / "t.obj")
    assert (m.n_vertices, m.n_faces) == (4, 4)
    np.testing.assert_array_equal(m.vertices, tetra.vertices)
    np.testing.assert_array_equal(m.faces, tetra.faces)


def test_quad_is_fan_split(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3 4\n")
    m = load_obj(p)
    np.testing.assert_array_equal(m.faces, [[0, 1, 2], [0, 2, 3]])


def test_negative_indices(tmp_path):
    p = tmp_path / "n.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
    np.testing.assert_array_equal(load_obj(p).faces, [[0, 1, 2]])


def test_malformed_face_reports_line(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\n# comment\nf 1 2\n")
    with pytest.raises(ObjParseError) as info:
        load_obj(p)
    assert info.value.lineno == 4
    assert ":4:" in str(info.value)


def test_mesh_rejects_bad_faces():
    v = np.zeros((3, 3))
    with pytest.raises(MeshError):
        Mesh(v, [[0, 1, 3]])
    with pytest.raises(MeshError):
        Mesh(v, [[0, 1, 1]])


def test_genus_zero_tetrahedron(tetra):
    rep = validate_genus_zero(tetra)
    assert rep.ok and rep.euler == 2 and rep.consistently_oriented


def test_torus_rejected():
    rep = validate_genus_zero(torus_mesh())
    assert not rep.ok
    assert rep.euler == 0
    assert "0" in rep.describe()


def test_open_disk_lists_boundary(tetra):
    disk = Mesh(tetra.vertices, tetra.faces[:3])
    rep = validate_genus_zero(disk)
    assert not rep.ok
    assert sorted(map(tuple, rep.boundary_edges)) == [(1, 2), (1, 3), (2, 3)]


@pytest.mark.parametrize("m", [fx.tetrahedron(), fx.icosphere(1), fx.bumpy_sphere(2), torus_mesh(), torus_mesh(5, 4)])
def test_euler_matches_brute_force(m):
    assert validate_genus_zero(m).euler == euler_brute(m)


def test_normalize_tetrahedron(tetra):
    m, tr = normalize_mesh(tetra)
    assert abs(m.area() - 1.0) < 1e-10
    assert np.abs(m.centroid()).max() < 1e-10
    np.testing.assert_allclose(tr.apply(tetra.vertices), m.vertices, atol=1e-12)


def test_normalize_idempotent_and_scale_invariant(bumpy):
    m2, tr = normalize_mesh(bumpy)
    assert abs(tr.scale - 1.0) < 1e-10
    np.testing.assert_allclose(m2.vertices, bumpy.vertices, atol=1e-10)
    doubled = bumpy.with_vertices(2.0 * bumpy.vertices + 3.0)
    np.testing.assert_allclose(normalize_mesh(doubled)[0].vertices, bumpy.vertices, atol=1e-8)


def test_centroid_is_area_weighted(tetra):
    # split one face at its centroid: the surface is unchanged, the vertex mean moves
    a, b, c = tetra.faces[3]
    mid = tetra.vertices[[a, b, c]].mean(axis=0)
    faces = np.vstack([tetra.faces[:3], [[a, b, 4], [b, c, 4], [c, a, 4]]])
    m = Mesh(np.vstack([tetra.vertices, mid]), faces)
    assert abs(m.area() - tetra.area()) < 1e-12
    np.testing.assert_allclose(m.centroid(), tetra.centroid(), atol=1e-12)
    assert np.linalg.norm(m.vertices.mean(axis=0) - tetra.centroid()) > 0.1


def test_procrustes_identity_and_rotation():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(10, 3))
    t = procrustes_align(src, src)
    np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t.translation, 0, atol=1e-12)
    r = random_rotation(rng)
    t = procrustes_align(src, src @ r.T + [1, 2, 3])
    np.testing.assert_allclose(t.rotation, r, atol=1e-8)
    np.testing.assert_allclose(t.translation, [1, 2, 3], atol=1e-8)


def test_procrustes_beats_random_rotations():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(12, 3))
    dst = src @ random_rotation(rng).T + rng.normal(scale=0.1, size=src.shape)
    t = procrustes_align(src, dst)
    best = np.sum((t.apply(src) - dst) ** 2)
    for _ in range(100):
        r = random_rotation(rng)
        moved = src @ r.T
        moved += dst.mean(axis=0) - moved.mean(axis=0)
        assert best <= np.sum((moved - dst) ** 2) + 1e-12


def test_procrustes_no_reflection():
    rng = np.random.default_rng(2)
    src = rng.normal(size=(8, 3))
    t = procrustes_align(src, src * [1, 1, -1])
    assert np.linalg.det(t.rotation) > 0


def test_procrustes_collinear_rejected():
    pts = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(MeshError):
        procrustes_align(pts, pts)


def test_alignment_transform_validation():
    with pytest.raises(ValueError):
        AlignmentTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        AlignmentTransform(np.eye(3), np.zeros(3), 0.0)


def test_landmarks_roundtrip(tmp_path, tetra):
    lm = LandmarkSet((3, 0, 2))
    write_landmarks(lm, tmp_path / "l.txt", "three")
    assert load_landmarks(tmp_path / "l.txt").indices == (3, 0, 2)
    with pytest.raises(MeshError):
        LandmarkSet((0, 0, 1))
    with pytest.raises(MeshError):
        LandmarkSet((0, 1))
    with pytest.raises(MeshError):
        LandmarkSet((0, 1, 9)).check(tetra)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_procrustes_recovers_any_rotation(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(6, 3))
    r, t = random_rotation(rng), rng.normal(size=3)
    tr = procrustes_align(src, src @ r.T + t)
    np.testing.assert_allclose(tr.rotation, r, atol=1e-8)
    np.testing.assert_allclose(tr.translation, t, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10.0), st.floats(-5, 5))
def test_normalize_idempotent_property(scale, shift):
    m = fx.icosphere(1)
    m = m.with_vertices(m.vertices * [scale, 1.0, 0.7] + shift)
    once, _ = normalize_mesh(m)
    twice, tr = normalize_mesh(once)
    np.testing.assert_allclose(twice.vertices, once.vertices, atol=1e-10)
    assert abs(tr.scale - 1) < 1e-10


def test_fit_similarity_exact():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(7, 3))
    s, t, rms = fit_similarity(a, 2.5 * a - 1.0)
    assert abs(s - 2.5) < 1e-12 and rms < 1e-12
    np.testing.assert_allclose(t, -1.0, atol=1e-12)
