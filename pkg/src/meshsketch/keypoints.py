"""Keypoints: automatic detection by feature back-projection + clustering,
occlusion-aware weight maps, and the localized loss.

Weight maps follow a Gaussian dropoff around each visible projected
keypoint on top of a constant 1, so regions far from every keypoint still
contribute to the loss. Visibility is decided against the surface render's
z-buffer; occluded or behind-camera keypoints contribute nothing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import Camera, Mesh, project
from .perception import cosine_distance, prepare_image
from .targets import TargetRender, render_surface

VISIBILITY_EPS = 1e-3


@dataclass
class Keypoint:
    position: np.ndarray  # (3,), on the surface (snapped on ingest)
    source: str = "user"  # "user" | "auto"
    label: str | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.source not in ("user", "auto"):
            raise ValueError(f"unknown keypoint source {self.source!r}")


def snap_keypoints(keypoints: list[Keypoint], oracle) -> list[Keypoint]:
    """Project keypoints onto the mesh surface (within 1e-3 afterwards)."""
    if not keypoints:
        return []
    pts = np.stack([k.position for k in keypoints])
    closest, _ = oracle.closest_points(pts)
    return [
        Keypoint(c, source=k.source, label=k.label) for c, k in zip(closest, keypoints)
    ]


def save_keypoints(keypoints: list[Keypoint], path: str | Path) -> None:
    """Sidecar schema shared with the HTTP service: x, y, z, source, label."""
    doc = [
        {"x": float(k.position[0]), "y": float(k.position[1]), "z": float(k.position[2]),
         "source": k.source, "label": k.label}
        for k in keypoints
    ]
    Path(path).write_text(json.dumps(doc, indent=2))


def load_keypoints(path: str | Path) -> list[Keypoint]:
    doc = json.loads(Path(path).read_text())
    return [
        Keypoint(np.array([k["x"], k["y"], k["z"]]), source=k.get("source", "user"),
                 label=k.get("label"))
        for k in doc
    ]


@dataclass
class VertexFeatures:
    """Per-vertex averaged back-projected features.

    ``counts[i] == 0`` marks vertices never observed in any view; they are
    excluded from clustering.
    """

    features: np.ndarray  # (V, C)
    counts: np.ndarray  # (V,)

    def observed(self) -> np.ndarray:
        return np.flatnonzero(self.counts > 0)


def visible_vertices(mesh: Mesh, camera: Camera, depth_buffer: np.ndarray,
                     eps: float = VISIBILITY_EPS):
    """Vertex indices that pass the z-buffer test, plus their pixel coords."""
    res = depth_buffer.shape[0]
    coords, depth, valid = project(camera, mesh.vertices)
    px = np.clip((coords * res).astype(int), 0, res - 1)
    in_frame = (coords[:, 0] >= 0) & (coords[:, 0] <= 1) & (coords[:, 1] >= 0) & (coords[:, 1] <= 1)
    buffered = depth_buffer[px[:, 1], px[:, 0]]
    visible = valid & in_frame & (depth <= buffered + eps)
    return np.flatnonzero(visible), px


def backproject_features(
    mesh: Mesh,
    views: list[Camera],
    encoder,
    layer: str = "layer3",
    render_fn=render_surface,
) -> VertexFeatures:
    """Back-project encoder activations onto visible vertices and average.

    For each view the surface render is encoded, the chosen activation grid
    is bilinearly upsampled to the render resolution, and every vertex that
    passes the z-buffer test picks up the feature at its projected pixel.
    Features are averaged over the views in which a vertex was observed.
    """
    if len(views) < 8:
        raise ValueError("need at least 8 views for feature back-projection")
    sums = None
    counts = np.zeros(len(mesh.vertices))
    for camera in views:
        render = render_fn(mesh, camera)
        with torch.no_grad():
            _, acts = encoder.encode(render.image)
        grid = acts[layer]
        res = render.depth.shape[0]
        up = F.interpolate(grid, size=(res, res), mode="bilinear", align_corners=False)
        feats = up[0].permute(1, 2, 0).numpy()  # (H, W, C)
        if sums is None:
            sums = np.zeros((len(mesh.vertices), feats.shape[-1]))
        idx, px = visible_vertices(mesh, camera, render.depth)
        sums[idx] += feats[px[idx, 1], px[idx, 0]]
        counts[idx] += 1
    features = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    return VertexFeatures(features, counts)


def detect_keypoints(
    vf: VertexFeatures, k: int, seed: int, mesh: Mesh
) -> list[Keypoint]:
    """KMeans over observed vertex features; one keypoint per cluster.

    The keypoint is the observed vertex whose feature is nearest the
    cluster center (ties broken toward the lowest vertex index). Output is
    ordered by vertex index so the result is canonical.
    """
    from sklearn.cluster import KMeans

    observed = vf.observed()
    if k > len(observed):
        raise ValueError(f"k={k} exceeds the {len(observed)} observed vertices")
    feats = vf.features[observed]
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=100, random_state=seed)
    km.fit(feats)
    chosen = []
    for center in km.cluster_centers_:
        d = np.linalg.norm(feats - center, axis=1)
        chosen.append(int(observed[int(np.argmin(d))]))  # argmin: first (lowest) index on ties
    chosen = sorted(set(chosen))
    return [Keypoint(mesh.vertices[i], source="auto", label=f"v{i}") for i in chosen]


@dataclass
class WeightMap:
    """Per-pixel loss weights, always >= 1."""

    grid: np.ndarray  # (H, W)

    @property
    def mean(self) -> float:
        return float(self.grid.mean())

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.grid).unsqueeze(0).unsqueeze(0)


def weight_map(
    keypoints: list[Keypoint],
    camera: Camera,
    depth_buffer: np.ndarray,
    sigma: float,
    resolution: int | None = None,
    eps: float = VISIBILITY_EPS,
) -> WeightMap:
    """Gaussian-dropoff weight image over visible keypoints (1 + sum of
    Gaussians in normalized [0,1]^2 coordinates)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    res = resolution or depth_buffer.shape[0]
    grid = np.ones((res, res))
    if not keypoints:
        return WeightMap(grid)
    step = 1.0 / res
    centers = np.arange(res) * step + step / 2.0
    xx, yy = np.meshgrid(centers, centers)
    dres = depth_buffer.shape[0]
    for kp in keypoints:
        coord, depth, valid = project(camera, kp.position)
        if not valid or depth <= camera.near:
            continue  # behind the camera counts as occluded
        u, v = float(coord[0]), float(coord[1])
        if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
            continue
        pi = min(dres - 1, max(0, int(v * dres)))
        pj = min(dres - 1, max(0, int(u * dres)))
        if depth > depth_buffer[pi, pj] + eps:
            continue  # occluded by the surface
        grid += np.exp(-((xx - u) ** 2 + (yy - v) ** 2) / (2.0 * sigma * sigma))
    return WeightMap(grid)


def _pool_to(grid: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Area-average downsampling of the weight grid to a feature-map size."""
    return F.adaptive_avg_pool2d(grid, size)


def localized_loss(
    encoder,
    patch_model,
    img_curve,
    img_target,
    wm,
    lambda_fc: float,
    lambda_lpips: float,
    include_layers: bool = True,
    normalize_global: bool = False,
) -> torch.Tensor:
    """Keypoint-weighted semantic loss plus the patch-similarity term.

    The weight map is pooled (area average) to each activation grid's
    resolution and multiplies the activation difference inside the squared
    norm; the global term is scaled by the mean weight. With a unit weight
    map and ``lambda_lpips == 0`` this reduces exactly to
    :func:`meshsketch.perception.semantic_loss`. ``normalize_global`` drops
    the mean-weight scaling of the global term (the literal form grows with
    keypoint count, which is the documented alternative reading).
    """
    wgrid = wm.tensor() if isinstance(wm, WeightMap) else wm
    if wgrid.dim() == 2:
        wgrid = wgrid.unsqueeze(0).unsqueeze(0)
    elif wgrid.dim() == 3:
        wgrid = wgrid.unsqueeze(1)
    emb_c, acts_c = encoder.encode(img_curve)
    emb_t, acts_t = encoder.encode(img_target)
    global_scale = 1.0 if normalize_global else wgrid.mean()
    loss = lambda_fc * global_scale * cosine_distance(emb_c, emb_t)
    if include_layers:
        for name in encoder.layer_names:
            diff = acts_c[name] - acts_t[name]
            w_l = _pool_to(wgrid.to(diff.dtype), diff.shape[-2:])
            loss = loss + ((w_l * diff) ** 2).mean()
    if lambda_lpips != 0.0 and patch_model is not None:
        loss = loss + lambda_lpips * patch_model(img_curve, img_target)
    return loss
