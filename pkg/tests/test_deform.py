import numpy as np
import pytest

from meshsketch.curves import BezierCurve, CurveSet, eval_bezier
from meshsketch.deform import (
    apply_deformation,
    blob_byte_length,
    build_skinning,
    displace_handles,
    handle_grid,
    parse_skinning,
    serialize_skinning,
)
from meshsketch.geometry import Mesh
from meshsketch.primitives import make_icosphere


def point_curve(p):
    return BezierCurve(np.tile(np.asarray(p, dtype=np.float64), (4, 1)))


def test_weight_one_on_coincident_handle():
    mesh = Mesh(np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1.0, 0]]), np.array([[0, 1, 2]]))
    cs = CurveSet([point_curve([0, 0, 0]), point_curve([1, 0, 0])])
    sw = build_skinning(mesh, cs, samples_per_curve=1, temperature=1e-6, k=2)
    # vertex 0 coincides with handle 0
    assert sw.weights[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert sw.weights[0, 1] == pytest.approx(0.0, abs=1e-12)


def test_equidistant_two_handles_half_half():
    mesh = Mesh(np.array([[0.5, 0, 0], [0, 1, 0], [1, 1, 0]]), np.array([[0, 1, 2]]))
    cs = CurveSet([point_curve([0, 0, 0]), point_curve([1, 0, 0])])
    sw = build_skinning(mesh, cs, samples_per_curve=1, temperature=0.1, k=2)
    assert np.allclose(sw.weights[0], [0.5, 0.5], atol=1e-12)


def test_rows_sum_to_one_large_mesh():
    mesh = make_icosphere(4)  # 2562 vertices
    rng = np.random.default_rng(0)
    cs = CurveSet([BezierCurve(rng.standard_normal((4, 3)) * 0.4) for _ in range(8)])
    sw = build_skinning(mesh, cs)
    assert np.abs(sw.weights.sum(axis=1) - 1.0).max() < 1e-6
    assert sw.weights.min() >= 0.0


def test_zero_displacement_bit_exact(sphere_mesh, rng):
    cs = CurveSet([BezierCurve(rng.standard_normal((4, 3)) * 0.3) for _ in range(4)])
    sw = build_skinning(sphere_mesh, cs)
    out = apply_deformation(sphere_mesh, sw, np.zeros((sw.n_handles, 3)))
    assert np.array_equal(out.vertices, sphere_mesh.vertices)


def test_uniform_displacement_translates(sphere_mesh, rng):
    cs = CurveSet([BezierCurve(rng.standard_normal((4, 3)) * 0.3) for _ in range(4)])
    sw = build_skinning(sphere_mesh, cs)
    u = np.array([0.25, -0.1, 0.6])
    out = apply_deformation(sphere_mesh, sw, np.tile(u, (sw.n_handles, 1)))
    assert np.allclose(out.vertices, sphere_mesh.vertices + u, atol=1e-9)


def test_locality_decay(rng):
    # softmax decay bound: a vertex whose distance to the displaced curve
    # exceeds its distance to another curve by 10x temperature keeps a
    # relative weight below exp(-10) and barely moves
    grid = np.array([[x, y, 0.0] for x in np.linspace(0, 2, 21) for y in (0.0, 0.1)])
    faces = [[i, i + 1, i + 2] for i in range(len(grid) - 2)]
    mesh = Mesh(grid, np.asarray(faces))
    displaced = BezierCurve(np.array([[0, 0, 0], [0, 0.05, 0], [0, 0.1, 0], [0, 0.15, 0]]))
    anchor = BezierCurve(np.array([[2, 0, 0], [2, 0.05, 0], [2, 0.1, 0], [2, 0.15, 0]]))
    cs = CurveSet([displaced, anchor])
    temperature = 0.05
    sw = build_skinning(mesh, cs, temperature=temperature, k=8)
    u = np.array([0.0, 0.3, 0.0])
    disp = np.zeros((sw.n_handles, 3))
    disp[sw.handle_curve == 0] = u
    out = apply_deformation(mesh, sw, disp)
    motion = np.linalg.norm(out.vertices - mesh.vertices, axis=1)
    d_displaced = np.linalg.norm(mesh.vertices - np.array([0, 0.075, 0]), axis=1)
    d_anchor = np.linalg.norm(mesh.vertices - np.array([2, 0.075, 0]), axis=1)
    far_mask = d_displaced - d_anchor > 10 * temperature
    assert far_mask.any()
    assert motion[far_mask].max() < 1e-3 * np.linalg.norm(u)
    assert motion[d_displaced < 0.2].min() > 0.9 * np.linalg.norm(u)


def test_displace_handles_zero_for_identical(rng):
    cs = CurveSet([BezierCurve(rng.standard_normal((4, 3))) for _ in range(3)])
    d = displace_handles(cs, cs)
    assert np.array_equal(d, np.zeros_like(d))


def test_displace_handles_translation(rng):
    curves = [BezierCurve(rng.standard_normal((4, 3))) for _ in range(3)]
    cs = CurveSet(curves)
    u = np.array([0.1, 0.2, -0.3])
    edited = CurveSet(
        [BezierCurve(c.control_points + (u if i == 1 else 0)) for i, c in enumerate(curves)]
    )
    d = displace_handles(cs, edited, samples_per_curve=16)
    assert np.allclose(d[16:32], u, atol=1e-12)
    assert np.allclose(d[:16], 0.0, atol=1e-12)
    assert np.allclose(d[32:], 0.0, atol=1e-12)


def test_displace_handles_single_control_point(rng):
    base = rng.standard_normal((4, 3))
    cs = CurveSet([BezierCurve(base)])
    moved = base.copy()
    moved[1] += [0.0, 0.3, 0.0]
    edited = CurveSet([BezierCurve(moved)])
    n = 33
    d = displace_handles(cs, edited, samples_per_curve=n)
    t = np.linspace(0, 1, n)
    mags = np.linalg.norm(d, axis=1)
    assert mags[0] == 0.0 and mags[-1] == 0.0  # Bernstein weight of p1 vanishes at ends
    assert abs(t[np.argmax(mags)] - 1.0 / 3.0) < 0.06


def test_displace_handles_topology_mismatch(rng):
    a = CurveSet([BezierCurve(rng.standard_normal((4, 3)))])
    b = CurveSet([BezierCurve(rng.standard_normal((4, 3))) for _ in range(2)])
    with pytest.raises(ValueError, match="mismatch"):
        displace_handles(a, b)


def test_deterministic_weights(sphere_mesh, rng):
    cs = CurveSet([BezierCurve(rng.standard_normal((4, 3)) * 0.3) for _ in range(4)])
    a = build_skinning(sphere_mesh, cs)
    b = build_skinning(sphere_mesh, cs)
    assert np.array_equal(a.weights, b.weights)
    assert np.array_equal(a.indices, b.indices)


def test_blob_roundtrip_and_length(sphere_mesh, rng):
    cs = CurveSet([BezierCurve(rng.standard_normal((4, 3)) * 0.3) for _ in range(4)])
    sw = build_skinning(sphere_mesh, cs, samples_per_curve=16, k=4)
    blob = serialize_skinning(sw)
    assert len(blob) == blob_byte_length(sw.n_handles, len(sphere_mesh.vertices), sw.k)
    back = parse_skinning(blob)
    assert back.n_handles == sw.n_handles
    assert back.k == sw.k
    assert np.array_equal(back.indices, sw.indices)
    assert np.allclose(back.weights, sw.weights, atol=1e-7)
    assert np.allclose(back.handle_rest, sw.handle_rest, atol=1e-6)
    assert back.temperature == pytest.approx(sw.temperature, abs=1e-7)


def test_blob_rejects_bad_magic():
    with pytest.raises(ValueError, match="magic"):
        parse_skinning(b"NOPE" + b"\x00" * 64)


def test_apply_deformation_wrong_handle_count(sphere_mesh, rng):
    cs = CurveSet([BezierCurve(rng.standard_normal((4, 3)))])
    sw = build_skinning(sphere_mesh, cs)
    with pytest.raises(ValueError, match="handle displacements"):
        apply_deformation(sphere_mesh, sw, np.zeros((3, 3)))


def test_empty_curve_set_rejected(sphere_mesh):
    with pytest.raises(ValueError):
        build_skinning(sphere_mesh, CurveSet([], stroke_width=1.0))


def test_handle_grid_order(rng):
    cs = CurveSet([BezierCurve(rng.standard_normal((4, 3))) for _ in range(2)])
    curve_ids, ts, rest = handle_grid(cs, samples_per_curve=4)
    assert np.array_equal(curve_ids, [0, 0, 0, 0, 1, 1, 1, 1])
    assert np.allclose(ts[:4], [0, 1 / 3, 2 / 3, 1])
    assert np.allclose(rest[0], cs.curves[0].control_points[0])
