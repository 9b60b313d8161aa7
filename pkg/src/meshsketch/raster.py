"""Differentiable rasterization of projected 2D cubic Beziers.

The reference backend flattens every curve to a polyline and splats a
Gaussian stroke profile around it: per pixel the darkest curve wins, so the
image is ``1 - max_i exp(-d_i^2 / (2 sigma^2))`` with ``d_i`` the distance to
curve ``i``'s nearest segment. This keeps the image in [0, 1], makes strokes
only ever darken the canvas, and is differentiable in the control points
everywhere except the max switch set.

Alternative backends can be registered with :func:`register_backend`; they
must satisfy :func:`check_backend_conformance`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .curves import eval_bezier_t

FLATTEN_SEGMENTS = 64


@dataclass
class StrokeImage:
    """Single-channel stroke render; ``image`` is (H, W) in [0, 1] with a
    white (1.0) background and carries gradients when built from tensors."""

    image: torch.Tensor

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def numpy(self) -> np.ndarray:
        return self.image.detach().cpu().numpy()


def flatten_curve(controls2d: torch.Tensor, segments: int = FLATTEN_SEGMENTS) -> torch.Tensor:
    """Flatten 2D cubic(s) to polylines at uniform t.

    controls2d (4, 2) or (n, 4, 2) -> vertices (segments + 1, 2) or
    (n, segments + 1, 2).
    """
    if segments < 1:
        raise ValueError("need at least one segment")
    single = controls2d.dim() == 2
    c = controls2d.unsqueeze(0) if single else controls2d
    t = torch.linspace(0.0, 1.0, segments + 1, dtype=c.dtype)
    verts = eval_bezier_t(c, t)
    return verts[0] if single else verts


def _pixel_grid(resolution: int, dtype) -> torch.Tensor:
    """Pixel-center coordinates in normalized [0,1]^2, shape (H, W, 2)."""
    step = 1.0 / resolution
    centers = torch.arange(resolution, dtype=dtype) * step + step / 2.0
    yy, xx = torch.meshgrid(centers, centers, indexing="ij")
    return torch.stack([xx, yy], dim=-1)


def _segment_distance_sq(pixels: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Squared distance from pixels (p, 2) to each segment a->b (s, 2)."""
    ab = b - a  # (s, 2)
    ap = pixels.unsqueeze(1) - a.unsqueeze(0)  # (p, s, 2)
    denom = (ab * ab).sum(-1).clamp_min(1e-30)  # (s,)
    tproj = ((ap * ab.unsqueeze(0)).sum(-1) / denom).clamp(0.0, 1.0)
    closest = a.unsqueeze(0) + tproj.unsqueeze(-1) * ab.unsqueeze(0)
    diff = pixels.unsqueeze(1) - closest
    return (diff * diff).sum(-1)  # (p, s)


def rasterize_reference(
    curves2d: torch.Tensor,
    resolution: int,
    stroke_width: float,
    softness: float = 1.0,
    segments: int = FLATTEN_SEGMENTS,
) -> StrokeImage:
    """Reference soft rasterizer.

    curves2d is (n, 4, 2) in normalized [0,1] image coordinates; the stroke
    width is given in pixels at ``resolution``. Pixels farther than the
    6-sigma support of a curve are skipped (their contribution is below
    1.6e-8 and numerically invisible), which keeps the cost proportional to
    the inked area.
    """
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    if stroke_width <= 0:
        raise ValueError("stroke width must be positive")
    dtype = curves2d.dtype if isinstance(curves2d, torch.Tensor) else torch.float64
    if not isinstance(curves2d, torch.Tensor):
        curves2d = torch.as_tensor(np.asarray(curves2d), dtype=dtype)
    image = torch.ones(resolution, resolution, dtype=dtype)
    if curves2d.numel() == 0:
        return StrokeImage(image)

    sigma = (stroke_width / 2.0) / resolution * float(np.sqrt(softness))
    support = 6.0 * sigma
    grid = _pixel_grid(resolution, dtype)
    darkness = torch.zeros(resolution, resolution, dtype=dtype)
    polylines = flatten_curve(curves2d, segments)  # (n, segments+1, 2)
    step = 1.0 / resolution
    for verts in polylines:
        with torch.no_grad():
            lo = verts.min(dim=0).values - support
            hi = verts.max(dim=0).values + support
            x0 = int(torch.clamp((lo[0] / step).floor(), 0, resolution).item())
            x1 = int(torch.clamp((hi[0] / step).ceil(), 0, resolution).item())
            y0 = int(torch.clamp((lo[1] / step).floor(), 0, resolution).item())
            y1 = int(torch.clamp((hi[1] / step).ceil(), 0, resolution).item())
        if x0 >= x1 or y0 >= y1:
            continue
        pixels = grid[y0:y1, x0:x1].reshape(-1, 2)
        d2 = _segment_distance_sq(pixels, verts[:-1], verts[1:]).min(dim=1).values
        ink = torch.exp(-d2 / (2.0 * sigma * sigma)).reshape(y1 - y0, x1 - x0)
        ink_full = torch.zeros(resolution, resolution, dtype=dtype)
        ink_full[y0:y1, x0:x1] = ink
        darkness = torch.maximum(darkness, ink_full)
    return StrokeImage(image - darkness)


_BACKENDS = {"reference": rasterize_reference}


def register_backend(name: str, fn) -> None:
    _BACKENDS[name] = fn


def rasterize(
    curves2d,
    resolution: int,
    stroke_width: float,
    softness: float = 1.0,
    backend: str = "reference",
) -> StrokeImage:
    """Rasterize projected curves with the selected backend."""
    try:
        fn = _BACKENDS[backend]
    except KeyError:
        raise KeyError(f"unknown raster backend {backend!r}") from None
    return fn(curves2d, resolution, stroke_width, softness)


def to_png(image: StrokeImage, path) -> None:
    """8-bit PNG export, debugging only."""
    from PIL import Image

    arr = np.clip(image.numpy(), 0.0, 1.0)
    Image.fromarray((arr * 255).astype(np.uint8), mode="L").save(path)


def check_backend_conformance(backend: str, resolution: int = 64) -> None:
    """Verify a plug-in backend against the reference contract.

    Raises AssertionError on the first violated clause: empty scene must be
    all white, an on-curve pixel must reach intensity 0, a centered point
    curve must darken the center more than the corners, and a frame-crossing
    curve must produce nonzero control-point gradients.
    """
    empty = rasterize(torch.zeros(0, 4, 2, dtype=torch.float64), resolution, 2.0, backend=backend)
    assert torch.all(empty.image == 1.0), "empty curve set must give an all-white image"

    # Degenerate point curve at the exact center of a pixel.
    step = 1.0 / resolution
    center = (resolution // 2 + 0.5) * step
    point = torch.full((1, 4, 2), center, dtype=torch.float64)
    img = rasterize(point, resolution, 2.0, softness=1e-6, backend=backend).image
    assert img[resolution // 2, resolution // 2] < 1e-6, "on-curve pixel must be (near) black"
    assert img[0, 0] > 0.999 and img[-1, -1] > 0.999, "far corners must stay white"

    crossing = torch.tensor(
        [[[0.1, 0.5], [0.4, 0.4], [0.6, 0.6], [0.9, 0.5]]], dtype=torch.float64, requires_grad=True
    )
    out = rasterize(crossing, resolution, 2.0, backend=backend).image
    out.mean().backward()
    assert crossing.grad is not None and torch.any(crossing.grad != 0), (
        "backend must propagate nonzero gradients to control points"
    )
