"""Evaluation metrics: surface coverage, encoder similarity, patch score.

Coverage is the 1-direction Chamfer distance from area-weighted surface
samples to the nearest curve sample (dense uniform-t sampling per curve),
reported in normalized-mesh units (bbox diagonal = 1). The perceptual
metrics run over a fixed held-out view set, seeded independently from the
training stream, with encoder/patch variants that must differ from the ones
used during optimization.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .curves import CurveSet, eval_bezier
from .geometry import Camera, Mesh, ViewSampler, surface_samples
from .perception import prepare_image

COVERAGE_CURVE_SAMPLES = 256
EVAL_VIEWS = 30


def curve_sample_cloud(curve_set: CurveSet, samples_per_curve: int = COVERAGE_CURVE_SAMPLES):
    t = np.linspace(0.0, 1.0, samples_per_curve)
    return np.concatenate([eval_bezier(c, t) for c in curve_set.curves], axis=0)


def coverage(
    mesh: Mesh,
    curve_set: CurveSet,
    n_points: int = 100_000,
    samples_per_curve: int = COVERAGE_CURVE_SAMPLES,
    seed: int = 0,
) -> float:
    """Mean distance from surface samples to their nearest curve sample."""
    if len(curve_set) == 0:
        raise ValueError("coverage needs a non-empty curve set")
    rng = np.random.default_rng(seed)
    points, _, _ = surface_samples(mesh, n_points, rng)
    cloud = curve_sample_cloud(curve_set, samples_per_curve)
    dist, _ = cKDTree(cloud).query(points)
    return float(dist.mean())


def encoder_similarity(encoder, curve_images, target_images) -> float:
    """Mean cosine similarity of global embeddings, scaled to [0, 1]."""
    sims = []
    with torch.no_grad():
        for img_c, img_t in zip(curve_images, target_images):
            emb_c, _ = encoder.encode(img_c)
            emb_t, _ = encoder.encode(img_t)
            cos = torch.nn.functional.cosine_similarity(emb_c, emb_t, dim=-1).mean()
            sims.append((float(cos) + 1.0) / 2.0)
    return float(np.mean(sims))


def patch_score(patch_model, curve_images, target_images) -> float:
    """Mean patch-similarity over view pairs (0 for identical images)."""
    scores = []
    with torch.no_grad():
        for img_c, img_t in zip(curve_images, target_images):
            scores.append(float(patch_model(img_c, img_t)))
    return float(np.mean(scores))


def evaluation_views(seed: int, n_views: int = EVAL_VIEWS, resolution: int = 224,
                     sampler: ViewSampler | None = None) -> list[Camera]:
    """Fixed held-out camera set spanning the training ranges."""
    sampler = sampler or ViewSampler(resolution=resolution)
    rng = np.random.default_rng(seed)
    return [sampler.sample(rng) for _ in range(n_views)]


@dataclass
class MetricReport:
    mesh_hash: str
    coverage: float
    patch: float
    encoder: float
    n_views: int
    coverage_units: str = "bbox-diagonal"
    config_hash: str = ""
    view_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "mesh_hash": self.mesh_hash,
            "coverage": self.coverage,
            "coverage_units": self.coverage_units,
            "patch_similarity": self.patch,
            "encoder_similarity": self.encoder,
            "n_views": self.n_views,
            "config_hash": self.config_hash,
            "view_seed": self.view_seed,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def append_csv(self, path: str | Path) -> None:
        path = Path(path)
        fields = list(self.to_dict().keys())
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            if new:
                writer.writeheader()
            writer.writerow(self.to_dict())


def evaluate(
    mesh: Mesh,
    curve_set: CurveSet,
    encoder,
    patch_model,
    view_seed: int = 7_777,
    n_views: int = EVAL_VIEWS,
    coverage_points: int = 100_000,
    samples_per_curve: int = COVERAGE_CURVE_SAMPLES,
    resolution: int = 224,
    raster_backend: str = "reference",
    stroke_width: float | None = None,
    softness: float = 1.0,
    config_hash: str = "",
) -> MetricReport:
    """Render held-out views of curves and mesh and score all metrics."""
    from . import raster
    from .curves import project_points_t
    from .targets import render_surface

    views = evaluation_views(view_seed, n_views, resolution)
    width = stroke_width if stroke_width is not None else curve_set.stroke_width
    controls = torch.from_numpy(curve_set.control_array())
    curve_images, target_images = [], []
    for camera in views:
        coords, _, valid = project_points_t(camera, controls)
        img = raster.rasterize(coords[valid.all(dim=1)], resolution, width,
                               softness, backend=raster_backend)
        curve_images.append(prepare_image(img.image.detach()))
        target_images.append(prepare_image(render_surface(mesh, camera).image))
    return MetricReport(
        mesh_hash=mesh.content_hash(),
        coverage=coverage(mesh, curve_set, coverage_points, samples_per_curve, seed=view_seed),
        patch=patch_score(patch_model, curve_images, target_images),
        encoder=encoder_similarity(encoder, curve_images, target_images),
        n_views=n_views,
        config_hash=config_hash,
        view_seed=view_seed,
    )
