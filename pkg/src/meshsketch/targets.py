"""Supervision imagery: shaded surface renders with depth, and occlusion-free
contour line drawings.

Both render kinds share pipeline conventions with the curve rasterizer
(white background, dark strokes, same soft line profile) so that target and
curve images live in the same visual register for the perceptual encoders.
The disk cache stores images as 8-bit PNG next to a raw float depth grid;
cache reads and misses both return the PNG-decoded image so a cached and a
freshly rendered view are byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Camera, Mesh, project

CREASE_ANGLE_DEG = 30.0


@dataclass
class TargetRender:
    view_id: str
    kind: str  # "surface" | "contour"
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    depth: np.ndarray  # (H, W) float, +inf on background
    camera: Camera


def _soft_lines(
    image: np.ndarray, segments: np.ndarray, resolution: int, line_width: float
) -> np.ndarray:
    """Darken ``image`` with Gaussian-profile line segments.

    segments is (S, 2, 2) in normalized [0,1] coordinates. Mirrors the
    stroke profile of the curve rasterizer: darkness = exp(-d^2/(2 sigma^2)),
    darkest segment wins per pixel.
    """
    if len(segments) == 0:
        return image
    sigma = (line_width / 2.0) / resolution
    support = 6.0 * sigma
    step = 1.0 / resolution
    centers = np.arange(resolution) * step + step / 2.0
    darkness = np.zeros((resolution, resolution))
    for a, b in segments:
        lo = np.minimum(a, b) - support
        hi = np.maximum(a, b) + support
        x0, x1 = int(max(0, lo[0] / step)), int(min(resolution, np.ceil(hi[0] / step)))
        y0, y1 = int(max(0, lo[1] / step)), int(min(resolution, np.ceil(hi[1] / step)))
        if x0 >= x1 or y0 >= y1:
            continue
        xx, yy = np.meshgrid(centers[x0:x1], centers[y0:y1])
        ab = b - a
        denom = max(float(ab @ ab), 1e-30)
        t = ((xx - a[0]) * ab[0] + (yy - a[1]) * ab[1]) / denom
        t = np.clip(t, 0.0, 1.0)
        dx = xx - (a[0] + t * ab[0])
        dy = yy - (a[1] + t * ab[1])
        ink = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
        darkness[y0:y1, x0:x1] = np.maximum(darkness[y0:y1, x0:x1], ink)
    return np.minimum(image, 1.0 - darkness[..., None])


def render_surface(mesh: Mesh, camera: Camera, supersample: int = 1) -> TargetRender:
    """Shaded z-buffered render on a white background.

    Headlight diffuse shading (|n . view|) with the albedo sampled from the
    mesh texture when UVs are present. ``supersample`` renders at an integer
    multiple of the camera resolution and box-downsamples.
    """
    res = camera.resolution * supersample
    coords, depth_v, valid = project(camera, mesh.vertices)
    px = coords * res  # pixel space, x right / y down
    image = np.ones((res, res, 3))
    zbuf = np.full((res, res), np.inf)

    eye = np.asarray(camera.eye)
    normals = mesh.face_normals
    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    view_dirs = eye - centroids
    view_dirs /= np.linalg.norm(view_dirs, axis=1, keepdims=True)
    shade = np.abs(np.einsum("fd,fd->f", normals, view_dirs))

    textured = mesh.texture is not None and mesh.uvs is not None and mesh.face_uvs is not None
    for fi, face in enumerate(mesh.faces):
        if not np.all(valid[face]):
            continue
        tri = px[face]  # (3, 2)
        zs = depth_v[face]
        x0 = max(0, int(np.floor(tri[:, 0].min())))
        x1 = min(res, int(np.ceil(tri[:, 0].max())) + 1)
        y0 = max(0, int(np.floor(tri[:, 1].min())))
        y1 = min(res, int(np.ceil(tri[:, 1].max())) + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        xs = np.arange(x0, x1) + 0.5
        ys = np.arange(y0, y1) + 0.5
        xx, yy = np.meshgrid(xs, ys)
        d = (tri[1, 1] - tri[2, 1]) * (tri[0, 0] - tri[2, 0]) + (tri[2, 0] - tri[1, 0]) * (
            tri[0, 1] - tri[2, 1]
        )
        if abs(d) < 1e-12:
            continue
        w0 = ((tri[1, 1] - tri[2, 1]) * (xx - tri[2, 0]) + (tri[2, 0] - tri[1, 0]) * (yy - tri[2, 1])) / d
        w1 = ((tri[2, 1] - tri[0, 1]) * (xx - tri[2, 0]) + (tri[0, 0] - tri[2, 0]) * (yy - tri[2, 1])) / d
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        z = w0 * zs[0] + w1 * zs[1] + w2 * zs[2]
        patch = zbuf[y0:y1, x0:x1]
        closer = inside & (z < patch)
        if not closer.any():
            continue
        if textured:
            uv = mesh.uvs[mesh.face_uvs[fi]]  # (3, 2)
            u = w0 * uv[0, 0] + w1 * uv[1, 0] + w2 * uv[2, 0]
            v = w0 * uv[0, 1] + w1 * uv[1, 1] + w2 * uv[2, 1]
            th, tw = mesh.texture.shape[:2]
            ti = np.clip(((1.0 - v) * th).astype(int), 0, th - 1)
            tj = np.clip((u * tw).astype(int), 0, tw - 1)
            albedo = mesh.texture[ti, tj]
        else:
            albedo = np.ones((*z.shape, 3))
        color = albedo * shade[fi]
        patch[closer] = z[closer]
        image[y0:y1, x0:x1][closer] = color[closer]
    if supersample > 1:
        r = camera.resolution
        image = image.reshape(r, supersample, r, supersample, 3).mean(axis=(1, 3))
        zbuf = zbuf.reshape(r, supersample, r, supersample).min(axis=(1, 3))
    return TargetRender(camera.key(), "surface", image, zbuf, camera)


def classify_edges(
    mesh: Mesh,
    camera: Camera,
    silhouettes: bool = True,
    boundaries: bool = True,
    creases: bool = True,
    crease_angle_deg: float = CREASE_ANGLE_DEG,
) -> np.ndarray:
    """Return the (E, 2) vertex index pairs of drawable contour edges."""
    edge_faces: dict[tuple[int, int], list[int]] = {}
    for fi, (a, b, c) in enumerate(mesh.faces):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (min(u, v), max(u, v))
            edge_faces.setdefault(key, []).append(fi)

    normals = mesh.face_normals
    eye = np.asarray(camera.eye)
    cos_thresh = np.cos(np.radians(crease_angle_deg))
    drawn = []
    for (u, v), fs in edge_faces.items():
        if len(fs) == 1:
            if boundaries:
                drawn.append((u, v))
            continue
        f1, f2 = fs[0], fs[1]
        if silhouettes:
            mid = (mesh.vertices[u] + mesh.vertices[v]) / 2.0
            view = eye - mid
            if np.sign(normals[f1] @ view) != np.sign(normals[f2] @ view):
                drawn.append((u, v))
                continue
        if creases and normals[f1] @ normals[f2] < cos_thresh:
            drawn.append((u, v))
    return np.asarray(drawn, dtype=np.int64).reshape(-1, 2)


def render_contours(
    mesh: Mesh,
    camera: Camera,
    line_width: float = 1.5,
    silhouettes: bool = True,
    boundaries: bool = True,
    creases: bool = True,
    crease_angle_deg: float = CREASE_ANGLE_DEG,
) -> TargetRender:
    """Black-on-white line drawing of silhouette, boundary, and crease edges.

    Drawn without hidden-line removal: occluded edges appear too. The depth
    buffer is the surface z-buffer of the same view (the drawing itself has
    no depth), which downstream keypoint visibility tests rely on.
    """
    res = camera.resolution
    edges = classify_edges(mesh, camera, silhouettes, boundaries, creases, crease_angle_deg)
    coords, _, valid = project(camera, mesh.vertices)
    image = np.ones((res, res, 3))
    segs = [
        np.stack([coords[u], coords[v]]) for u, v in edges if valid[u] and valid[v]
    ]
    image = _soft_lines(image, np.asarray(segs).reshape(-1, 2, 2), res, line_width)
    depth = render_surface(mesh, camera).depth
    return TargetRender(camera.key(), "contour", image, depth, camera)


def write_depth(path: Path, depth: np.ndarray) -> None:
    """Raw float32 grid, little-endian, row-major, width/height header."""
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", w, h))
        fh.write(depth.astype("<f4").tobytes())


def read_depth(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * w * h), dtype="<f4")
    if data.size != w * h:
        raise ValueError("truncated depth file")
    return data.reshape(h, w).astype(np.float64)


class RenderCache:
    """Disk cache for target renders keyed by (mesh hash, kind, camera).

    Layout: <root>/<mesh-hash>/<kind>/<camera-hash>.png plus a .depth raw
    float grid. Hits skip rendering; corrupt entries are regenerated. The
    image returned on a miss is re-read from the written PNG so repeated
    requests are byte-identical regardless of cache state.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    def _paths(self, mesh: Mesh, camera: Camera, kind: str) -> tuple[Path, Path]:
        base = self.root / mesh.content_hash() / kind
        return base / f"{camera.key()}.png", base / f"{camera.key()}.depth"

    def _read(self, png: Path, dep: Path, camera: Camera, kind: str) -> TargetRender:
        from PIL import Image

        image = np.asarray(Image.open(png).convert("RGB"), dtype=np.float64) / 255.0
        depth = read_depth(dep)
        depth[depth >= np.finfo(np.float32).max / 2] = np.inf
        return TargetRender(camera.key(), kind, image, depth, camera)

    def get(self, mesh: Mesh, camera: Camera, kind: str, render_fn) -> TargetRender:
        from PIL import Image

        png, dep = self._paths(mesh, camera, kind)
        if png.exists() and dep.exists():
            try:
                out = self._read(png, dep, camera, kind)
                self.hits += 1
                return out
            except (OSError, ValueError):
                png.unlink(missing_ok=True)
                dep.unlink(missing_ok=True)
        self.misses += 1
        render = render_fn(mesh, camera)
        png.parent.mkdir(parents=True, exist_ok=True)
        arr = np.clip(render.image * 255.0, 0, 255).round().astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(png)
        finite_depth = np.where(np.isfinite(render.depth), render.depth, np.finfo(np.float32).max)
        write_depth(dep, finite_depth)
        return self._read(png, dep, camera, kind)

    def size(self) -> int:
        """Number of cached entries."""
        return sum(1 for _ in self.root.rglob("*.png"))


def cache_renders(
    cache: RenderCache, mesh: Mesh, views: list[Camera], kinds: tuple[str, ...] = ("surface",)
) -> dict[tuple[str, str], TargetRender]:
    """Pre-render and persist the given views; returns the render store."""
    renderers = {"surface": render_surface, "contour": render_contours}
    store = {}
    for camera in views:
        for kind in kinds:
            store[(camera.key(), kind)] = cache.get(mesh, camera, kind, renderers[kind])
    return store
