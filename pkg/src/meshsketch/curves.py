"""Cubic Bezier curve model: evaluation, initialization, projection, and the
in-frame (NDC) regularizer.

Curves live in the normalized mesh frame. The exchange format produced by
:func:`save_curves` is the contract shared by the CLI, the HTTP service, the
evaluator, and the browser viewer.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import Camera, project

STAGES = ("geometry", "texture", "refinement")

DEFAULT_SIGMA_INIT = 0.05  # fraction of the (unit) bbox diagonal
NDC_T_SAMPLES = 16


@dataclass
class BezierCurve:
    """One cubic Bezier: 4 control points, a frozen flag, and a stage tag."""

    control_points: np.ndarray  # (4, 3)
    frozen: bool = False
    stage: str = "geometry"

    def __post_init__(self):
        self.control_points = np.asarray(self.control_points, dtype=np.float64).reshape(4, 3)
        if not np.all(np.isfinite(self.control_points)):
            raise ValueError("control points must be finite")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")


@dataclass
class CurveSet:
    """Ordered curve collection plus global render attributes."""

    curves: list[BezierCurve]
    stroke_width: float = 1.5
    seed: int | None = None
    transform: tuple[np.ndarray, float] | None = None  # source-mesh normalization

    def __len__(self) -> int:
        return len(self.curves)

    def control_array(self) -> np.ndarray:
        """(n, 4, 3) stacked control points."""
        return np.stack([c.control_points for c in self.curves])

    def frozen_mask(self) -> np.ndarray:
        return np.asarray([c.frozen for c in self.curves], dtype=bool)

    def with_controls(self, controls: np.ndarray) -> "CurveSet":
        curves = [
            BezierCurve(c, frozen=old.frozen, stage=old.stage)
            for c, old in zip(np.asarray(controls), self.curves)
        ]
        return CurveSet(curves, self.stroke_width, self.seed, self.transform)


def bernstein_weights(t):
    """Cubic Bernstein basis (1, 3, 3, 1 coefficients) at parameter t."""
    xp = torch if isinstance(t, torch.Tensor) else np
    one = 1.0 - t
    return xp.stack([one**3, 3.0 * one**2 * t, 3.0 * one * t**2, t**3], -1)


def _clamp_t(t):
    xp = torch if isinstance(t, torch.Tensor) else np
    if bool((t < 0).any() if hasattr(t, "any") else (t < 0)) or bool(
        (t > 1).any() if hasattr(t, "any") else (t > 1)
    ):
        warnings.warn("bezier parameter outside [0,1]; clamping", stacklevel=2)
        return xp.clip(t, 0.0, 1.0)
    return t


def eval_bezier(curve: BezierCurve | np.ndarray, t) -> np.ndarray:
    """Evaluate the curve at scalar or array parameter t in [0, 1]."""
    pts = curve.control_points if isinstance(curve, BezierCurve) else np.asarray(curve)
    t = _clamp_t(np.asarray(t, dtype=np.float64))
    w = bernstein_weights(t)
    return w @ pts


def eval_bezier_t(controls: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Torch evaluation over a curve batch; gradients flow to the controls.

    controls is (n, 4, d); t is either a shared grid (m,) or per-curve
    parameters (n, m). Returns (n, m, d).
    """
    w = bernstein_weights(_clamp_t(t.to(controls.dtype)))
    if t.dim() == 1:
        return torch.einsum("mk,nkd->nmd", w, controls)
    return torch.einsum("nmk,nkd->nmd", w, controls)


def sample_curve(curve: BezierCurve, s: int, rng: np.random.Generator) -> np.ndarray:
    """s points at t ~ Uniform[0,1]."""
    if s < 1:
        raise ValueError("need at least one sample")
    return eval_bezier(curve, rng.random(s))


def init_curves(
    anchors: np.ndarray,
    sigma_init: float = DEFAULT_SIGMA_INIT,
    seed: int = 0,
    stage: str = "geometry",
    stroke_width: float = 1.5,
) -> CurveSet:
    """One curve per anchor with control points drawn from an isotropic
    Gaussian of std ``sigma_init`` around the anchor."""
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    if len(anchors) == 0:
        raise ValueError("need at least one anchor point")
    if sigma_init < 0:
        raise ValueError("sigma_init must be >= 0")
    rng = np.random.default_rng(seed)
    curves = [
        BezierCurve(anchor + sigma_init * rng.standard_normal((4, 3)), stage=stage)
        for anchor in anchors
    ]
    return CurveSet(curves, stroke_width=stroke_width, seed=seed)


def project_points_t(camera: Camera, points: torch.Tensor):
    """Torch twin of :func:`meshsketch.geometry.project` (perspective or ortho).

    points (..., 3) -> (coords (..., 2), depth (...,), valid (...,)).
    Must stay numerically identical to the numpy version; both are covered
    by a parity test.
    """
    right, up, fwd = camera.basis
    frame = torch.from_numpy(np.stack([right, up, fwd])).to(points.dtype)
    d = points - torch.as_tensor(camera.eye, dtype=points.dtype)
    cam = d @ frame.T
    x, y, z = cam[..., 0], cam[..., 1], cam[..., 2]
    valid = z > camera.near
    if camera.mode == "orthographic":
        denom = torch.as_tensor(camera.ortho_scale, dtype=points.dtype)
        u, v = x / denom, y / denom
        valid = torch.ones_like(valid)
    else:
        tan_half = float(np.tan(camera.fov / 2.0))
        safe_z = torch.where(z.abs() > 1e-12, z, torch.full_like(z, 1e-12))
        u, v = x / (safe_z * tan_half), y / (safe_z * tan_half)
    coords = torch.stack([0.5 + 0.5 * u, 0.5 - 0.5 * v], dim=-1)
    return coords, z, valid


def project_curve(curve: BezierCurve, camera: Camera):
    """Project the 4 control points; returns ((4, 2) array, valid flag).

    For a far camera the projected 2D cubic evaluated at t approximates the
    projection of the 3D curve point at t (exactly so for orthographic
    cameras).
    """
    coords, _, valid = project(camera, curve.control_points)
    return coords, bool(np.all(valid))


def ndc_loss(
    curve_set: CurveSet | torch.Tensor,
    camera: Camera,
    t_grid: int = NDC_T_SAMPLES,
):
    """Penalty for projected curve points outside the unit image square.

    Sums ReLU(coord - 1) + ReLU(-coord) over both coordinates of the
    projected curve sampled on a fixed uniform t grid plus the four
    projected control points. Returns a torch scalar when given a tensor of
    control points (gradients flow), otherwise a float.
    """
    tensor_in = isinstance(curve_set, torch.Tensor)
    controls = curve_set if tensor_in else torch.from_numpy(curve_set.control_array())
    if controls.numel() == 0:
        return controls.sum() if tensor_in else 0.0
    t = torch.linspace(0.0, 1.0, t_grid, dtype=controls.dtype)
    on_curve = eval_bezier_t(controls, t)  # (n, t_grid, 3)
    points = torch.cat([on_curve, controls], dim=1)
    coords, _, _ = project_points_t(camera, points)
    loss = torch.relu(coords - 1.0).sum() + torch.relu(-coords).sum()
    return loss if tensor_in else float(loss)


def save_curves(curve_set: CurveSet, path: str | Path) -> None:
    """Write the curve exchange document (JSON)."""
    doc = curves_to_doc(curve_set)
    Path(path).write_text(json.dumps(doc, indent=2))


def load_curves(path: str | Path) -> CurveSet:
    return curves_from_doc(json.loads(Path(path).read_text()))


def curves_to_doc(curve_set: CurveSet) -> dict:
    transform = None
    if curve_set.transform is not None:
        center, scale = curve_set.transform
        transform = {"center": [float(c) for c in np.asarray(center)], "scale": float(scale)}
    return {
        "format": "meshsketch-curves",
        "version": 1,
        "stroke_width": curve_set.stroke_width,
        "seed": curve_set.seed,
        "normalization": transform,
        "curves": [
            {
                "control_points": [[float(x) for x in p] for p in c.control_points],
                "stage": c.stage,
                "frozen": bool(c.frozen),
            }
            for c in curve_set.curves
        ],
    }


def curves_from_doc(doc: dict) -> CurveSet:
    if doc.get("format") != "meshsketch-curves":
        raise ValueError("not a curve exchange document")
    transform = None
    if doc.get("normalization"):
        transform = (
            np.asarray(doc["normalization"]["center"], dtype=np.float64),
            float(doc["normalization"]["scale"]),
        )
    curves = [
        BezierCurve(
            np.asarray(c["control_points"], dtype=np.float64),
            frozen=bool(c.get("frozen", False)),
            stage=c.get("stage", "geometry"),
        )
        for c in doc["curves"]
    ]
    return CurveSet(
        curves,
        stroke_width=float(doc.get("stroke_width", 1.5)),
        seed=doc.get("seed"),
        transform=transform,
    )
