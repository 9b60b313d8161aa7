"""meshsketch: sparse 3D Bezier-curve abstraction of triangle meshes."""

from .geometry import Camera, Mesh, ViewSampler, load_mesh, normalize_mesh
from .curves import BezierCurve, CurveSet, eval_bezier, load_curves, save_curves
from .pipeline import RunConfig, run_stage1, run_stage2, refine, abstract

__all__ = [
    "Camera",
    "Mesh",
    "ViewSampler",
    "load_mesh",
    "normalize_mesh",
    "BezierCurve",
    "CurveSet",
    "eval_bezier",
    "load_curves",
    "save_curves",
    "RunConfig",
    "run_stage1",
    "run_stage2",
    "refine",
    "abstract",
]

__version__ = "0.1.0"
