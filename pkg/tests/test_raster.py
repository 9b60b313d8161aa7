import numpy as np
import pytest
import torch

from meshsketch.raster import (
    StrokeImage,
    check_backend_conformance,
    flatten_curve,
    rasterize,
    to_png,
)


def straight_curve(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    pts = np.stack([a, a + (b - a) / 3, a + 2 * (b - a) / 3, b])
    return torch.tensor(pts)


def test_empty_scene_all_white():
    img = rasterize(torch.zeros(0, 4, 2, dtype=torch.float64), 64, 2.0)
    assert torch.all(img.image == 1.0)
    assert img.width == img.height == 64


def test_point_curve_gaussian_falloff():
    res = 65
    center = (res // 2 + 0.5) / res
    curve = torch.full((1, 4, 2), center, dtype=torch.float64)
    img = rasterize(curve, res, 2.0, softness=1e-8).image
    assert img[res // 2, res // 2] < 1e-9  # minimum at the center pixel
    assert img[0, 0] > 1.0 - 1e-12
    assert img[-1, -1] > 1.0 - 1e-12
    assert img.argmin() == (res // 2) * res + res // 2


def test_on_polyline_pixel_is_black():
    res = 64
    y = (10 + 0.5) / res  # exactly through row 10's pixel centers
    curve = straight_curve([0.1, y], [0.9, y]).unsqueeze(0)
    img = rasterize(curve, res, 3.0).image
    row = img[10]
    assert float(row.min()) == 0.0


def test_monotone_darkening():
    res = 64
    one = straight_curve([0.2, 0.3], [0.8, 0.4]).unsqueeze(0)
    two = torch.cat([one, straight_curve([0.3, 0.7], [0.7, 0.2]).unsqueeze(0)])
    img1 = rasterize(one, res, 2.0).image
    img2 = rasterize(two, res, 2.0).image
    assert torch.all(img2 <= img1 + 1e-15)


def test_flatten_single_segment():
    curve = torch.tensor([[0.0, 0.0], [0.3, 0.8], [0.7, 0.8], [1.0, 0.0]], dtype=torch.float64)
    poly = flatten_curve(curve, 1)
    assert poly.shape == (2, 2)
    assert torch.allclose(poly[0], curve[0])
    assert torch.allclose(poly[1], curve[3])


def test_flatten_straight_is_collinear():
    curve = straight_curve([0.1, 0.1], [0.9, 0.7])
    poly = flatten_curve(curve, 64).numpy()
    d = poly[-1] - poly[0]
    cross = (poly[:, 0] - poly[0, 0]) * d[1] - (poly[:, 1] - poly[0, 1]) * d[0]
    assert np.abs(cross).max() < 1e-9


def test_flatten_refinement_converges():
    # Hausdorff gap against a dense reference shrinks monotonically
    curve = torch.tensor([[0.1, 0.5], [0.3, 0.05], [0.7, 0.95], [0.9, 0.5]], dtype=torch.float64)
    reference = flatten_curve(curve, 8192).numpy()

    def seg_dist(points, a, b):
        ab = b - a
        t = np.clip(
            ((points[:, None] - a[None]) * ab[None]).sum(-1) / (ab * ab).sum(-1), 0, 1
        )
        closest = a[None] + t[..., None] * ab[None]
        return np.linalg.norm(points[:, None] - closest, axis=-1).min(axis=1)

    def gap(segments):
        poly = flatten_curve(curve, segments).numpy()
        return seg_dist(reference, poly[:-1], poly[1:]).max()

    gaps = [gap(s) for s in (4, 16, 64, 256)]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[2] < 1e-3  # 64 segments: error far below a 224-grid pixel


def test_gradient_matches_finite_differences():
    res = 48
    controls = torch.tensor(
        [[[0.25, 0.45], [0.4, 0.35], [0.6, 0.62], [0.78, 0.5]]],
        dtype=torch.float64,
        requires_grad=True,
    )
    mean = rasterize(controls, res, 3.0, softness=2.0).image.mean()
    grad = torch.autograd.grad(mean, controls)[0].numpy()

    h = 1e-6
    fd = np.zeros_like(grad)
    base = controls.detach().numpy()
    for i in range(4):
        for j in range(2):
            up, dn = base.copy(), base.copy()
            up[0, i, j] += h
            dn[0, i, j] -= h
            f_up = rasterize(torch.tensor(up), res, 3.0, softness=2.0).image.mean()
            f_dn = rasterize(torch.tensor(dn), res, 3.0, softness=2.0).image.mean()
            fd[0, i, j] = float(f_up - f_dn) / (2 * h)
    rel = np.abs(grad - fd).max() / np.abs(fd).max()
    assert rel < 1e-3


def test_translation_equivariance():
    res = 96
    step = 1.0 / res
    controls = torch.tensor(
        [[[0.3, 0.4], [0.45, 0.3], [0.55, 0.6], [0.7, 0.45]]], dtype=torch.float64
    )
    img = rasterize(controls, res, 3.0).image.numpy()
    shifted = rasterize(controls + torch.tensor([step, 0.0]), res, 3.0).image.numpy()
    shifted_back = np.roll(shifted, -1, axis=1)
    # ignore the wrap column
    diff = np.abs(shifted_back[:, :-1] - img[:, :-1]).mean()
    assert diff < 0.02


def test_backend_conformance_reference():
    check_backend_conformance("reference")


def test_unknown_backend():
    with pytest.raises(KeyError):
        rasterize(torch.zeros(0, 4, 2), 64, 1.0, backend="missing")


def test_parameter_validation():
    with pytest.raises(ValueError):
        rasterize(torch.zeros(0, 4, 2), 8, 1.0)
    with pytest.raises(ValueError):
        rasterize(torch.zeros(0, 4, 2), 64, 0.0)
    with pytest.raises(ValueError):
        flatten_curve(torch.zeros(4, 2), 0)


def test_png_export(tmp_path):
    img = rasterize(torch.full((1, 4, 2), 0.5, dtype=torch.float64), 32, 2.0)
    out = tmp_path / "stroke.png"
    to_png(img, out)
    assert out.exists() and out.stat().st_size > 0
