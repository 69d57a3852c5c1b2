import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lanemesh.mesh import (
    DEFAULT_GRID, EPS, SHAPE_BOUNDS, Mesh, MeshError, ObjParseError, corrupt_mesh, dequantize_coord,
    dumps_obj, load_obj, make_pointcloud_set, normalize, parse_obj, quantize_coord, sample_surface,
    save_obj, shape_face_count, synth_shape,
)
from lanemesh.metrics import point_mesh_distances


def test_obj_minimal():
    m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    assert (m.n_vertices, m.n_faces) == (3, 1)


def test_obj_quad_fan():
    m = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_obj_slashes_negative_and_ignored_records():
    text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nvt 0 0\nf -3/1/1 -2/2/1 -1/3/1\n"
    assert parse_obj(text).faces.tolist() == [[0, 1, 2]]


def test_obj_index_out_of_range_reports_line():
    with pytest.raises(ObjParseError, match="line 4: index out of range"):
        parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")


@pytest.mark.parametrize("text", ["v 0 0 nan\n", "v 0 0 inf\n"])
def test_obj_non_finite_rejected(text):
    with pytest.raises(ObjParseError, match="non-finite"):
        parse_obj(text)


def test_obj_malformed():
    with pytest.raises(ObjParseError, match="line 1"):
        parse_obj("v 0 zero 0\n")


def test_obj_round_trip(tmp_path, cube):
    save_obj(cube, tmp_path / "c.obj")
    back = load_obj(tmp_path / "c.obj")
    assert np.array_equal(back.vertices, cube.vertices)
    assert np.array_equal(back.faces, cube.faces)


def test_mesh_invariants():
    with pytest.raises(MeshError, match="out of range"):
        Mesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(MeshError, match="repeated"):
        Mesh(np.eye(3), [[0, 1, 1]])
    with pytest.raises(MeshError, match="non-finite"):
        Mesh([[0, 0, np.nan], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])


def test_normalize_corners():
    m = Mesh([[-5, -5, -5], [5, 5, 5], [5, -5, 5]], [[0, 1, 2]])
    n = normalize(m)
    assert np.allclose(n.vertices[0], EPS, atol=1e-15)
    assert np.allclose(n.vertices[1], 1 - EPS, atol=1e-15)


def test_normalize_aspect_ratio():
    m = Mesh([[0, 0, 0], [4, 2, 1], [4, 0, 0]], [[0, 1, 2]])
    ext = np.ptp(normalize(m).vertices, axis=0)
    assert ext[0] == pytest.approx(1 - 2 * EPS)
    assert ext[1] / ext[0] == pytest.approx(0.5)


def test_normalize_degenerate():
    with pytest.raises(MeshError, match="degenerate extent"):
        normalize(Mesh(np.ones((3, 3)), np.zeros((0, 3), dtype=int)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1 << 30), st.sampled_from(["cube", "uv_sphere", "torus", "grid"]))
def test_normalize_idempotent_and_quantization_error(seed, kind):
    m = normalize(synth_shape(kind, SHAPE_BOUNDS[kind][0] + 2, seed=seed, jitter=0.3))
    assert np.abs(normalize(m).vertices - m.vertices).max() < 1e-7
    assert m.vertices.min() > 0 and m.vertices.max() < 1
    back = DEFAULT_GRID.dequantize(DEFAULT_GRID.quantize(m.vertices))
    assert np.linalg.norm(back - m.vertices, axis=1).max() < (math.sqrt(3) / 2) / 512


def test_quantize_examples():
    assert quantize_coord(0.0) == 0
    assert quantize_coord(0.5) == 256
    assert dequantize_coord(0) == 0.0009765625
    assert quantize_coord(1.0) == 511 and quantize_coord(-0.1) == 0


def test_quantize_dequantize_identity():
    b = np.arange(512)
    assert np.array_equal(DEFAULT_GRID.quantize(DEFAULT_GRID.dequantize(b)), b)


def test_sample_single_triangle_support():
    tri = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    p = sample_surface(tri, 1000, seed=3)
    assert np.abs(p[:, 2]).max() == 0
    assert (p[:, :2] >= -1e-12).all() and (p[:, 0] + p[:, 1] <= 1 + 1e-12).all()


def test_sample_area_weighting():
    # face 0 has area 4.5, face 1 area 0.5: ratio 9:1
    m = Mesh([[0, 0, 0], [3, 0, 0], [0, 3, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]], [[0, 1, 2], [3, 4, 5]])
    p = sample_surface(m, 100_000, seed=0)
    frac = (p[:, 0] < 5).mean()
    # binomial sd is sqrt(.09/1e5) ~ 1e-3, so +-0.01 is a 10-sigma band
    assert abs(frac - 0.9) < 0.01


def test_sample_deterministic(cube):
    assert np.array_equal(sample_surface(cube, 500, 7), sample_surface(cube, 500, 7))
    assert not np.array_equal(sample_surface(cube, 500, 7), sample_surface(cube, 500, 8))


def test_sample_degenerate_rejected():
    m = Mesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    with pytest.raises(MeshError):
        sample_surface(m, 10, 0)


def test_samples_lie_on_surface():
    m = normalize(synth_shape("torus", 6))
    assert point_mesh_distances(sample_surface(m, 2000, 1), m).max() < 1e-6


def test_pointcloud_set(cube, tmp_path):
    pcs = make_pointcloud_set(cube, (8192, 512, 1024, 2048), seed=5)
    assert pcs.counts == (8192, 512, 1024, 2048)
    assert pcs.counts[0] / pcs.counts[1] == 16
    assert np.array_equal(pcs.X2, sample_surface(cube, 512, 6))
    pcs.save(tmp_path / "p.npz")
    back = type(pcs).load(tmp_path / "p.npz")
    assert all(np.array_equal(a, b) for a, b in zip(back.arrays(), pcs.arrays()))


def test_pointcloud_ordering_rejected(cube):
    with pytest.raises(MeshError, match="ordering N2<N3<N4<N1 violated"):
        make_pointcloud_set(cube, (100, 200, 300, 400), seed=0)


def test_corrupt_counts():
    cube = synth_shape("cube", 1)
    assert corrupt_mesh(cube, 0.25, 0).n_faces == 9
    assert corrupt_mesh(cube, 0.99, 0).n_faces == 1
    with pytest.raises(MeshError, match="would remove all faces"):
        corrupt_mesh(cube, 1.0, 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.9), st.integers(0, 1000))
def test_corrupt_is_strict_subset(fraction, seed):
    m = synth_shape("uv_sphere", 6)
    c = corrupt_mesh(m, fraction, seed)
    before = {tuple(f) for f in m.faces.tolist()}
    after = {tuple(f) for f in c.faces.tolist()}
    assert after < before or (after == before and math.floor(fraction * m.n_faces) == 0)
    assert np.array_equal(c.vertices, m.vertices)
    assert np.array_equal(corrupt_mesh(m, fraction, seed).faces, c.faces)


def test_synth_counts():
    cube = synth_shape("cube", 1)
    assert (cube.n_vertices, cube.n_faces) == (8, 12)
    assert synth_shape("uv_sphere", 8).n_faces == 112
    grid = synth_shape("grid", 4)
    assert (grid.n_vertices, grid.n_faces) == (25, 32)


def _is_closed_oriented(m: Mesh) -> bool:
    he = [(a, b) for f in m.faces.tolist() for a, b in zip(f, f[1:] + f[:1])]
    s = set(he)
    return len(s) == len(he) and all((b, a) in s for a, b in he)


@pytest.mark.parametrize("kind", ["cube", "uv_sphere", "torus", "grid"])
def test_synth_face_count_formula_and_watertight(kind):
    lo, hi = SHAPE_BOUNDS[kind]
    for r in range(lo, min(hi, lo + 6)):
        m = synth_shape(kind, r)
        assert m.n_faces == shape_face_count(kind, r)
        if kind != "grid":
            assert _is_closed_oriented(m)


def test_synth_outward_orientation():
    m = synth_shape("uv_sphere", 8)
    t = m.triangles()
    n, _ = m.face_normals()
    assert ((n * t.mean(axis=1)).sum(axis=1) > 0).all()


def test_synth_bounds_and_jitter():
    with pytest.raises(MeshError):
        synth_shape("cube", 0)
    with pytest.raises(MeshError):
        synth_shape("torus", 65)
    a = synth_shape("torus", 5, seed=1)
    assert np.array_equal(a.vertices, synth_shape("torus", 5, seed=2).vertices)
    assert not np.array_equal(synth_shape("torus", 5, seed=1, jitter=0.1).vertices,
                              synth_shape("torus", 5, seed=2, jitter=0.1).vertices)


def test_dumps_obj_lossless():
    m = synth_shape("torus", 4, seed=3, jitter=0.1)
    assert np.array_equal(parse_obj(dumps_obj(m)).vertices, m.vertices)
