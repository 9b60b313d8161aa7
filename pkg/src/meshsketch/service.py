"""HTTP service exposing a completed run directory to the browser viewer.

The service is a thin view over the run artifacts: /scene streams the mesh,
curves, keypoints, and the skinning blob; /deform applies control-point
edits server-side (bit-identical to the local deformation path); /keypoints
starts an asynchronous refinement job, at most one at a time.
"""

from __future__ import annotations

import base64
import json
import threading
import uuid
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .curves import CurveSet, curves_to_doc, load_curves, save_curves
from .deform import apply_deformation, build_skinning, displace_handles, serialize_skinning
from .geometry import load_mesh, normalize_mesh
from .keypoints import Keypoint, load_keypoints, save_keypoints, snap_keypoints
from .pipeline import RunConfig, refine
from .sdf import DistanceOracle, NeuralSDF, sdf_cache_path
from .targets import RenderCache


class KeypointIn(BaseModel):
    x: float
    y: float
    z: float
    source: str = "user"
    label: str | None = None


class KeypointsRequest(BaseModel):
    keypoints: list[KeypointIn] = Field(min_length=1)


class DeformRequest(BaseModel):
    control_points: list[list[list[float]]]


@dataclass
class Job:
    id: str
    kind: str
    state: str = "queued"  # queued -> running -> done | failed
    progress: float = 0.0
    artifacts: list[str] = dataclass_field(default_factory=list)
    log: list[str] = dataclass_field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "state": self.state,
            "progress": self.progress,
            "artifacts": self.artifacts,
            "log_tail": self.log[-20:],
            "error": self.error,
        }


class RunState:
    """Mutable service state over one run directory."""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        run_meta = json.loads((self.run_dir / "run.json").read_text())
        self.cfg = RunConfig.load(self.run_dir / "resolved_config.yaml")
        self.mesh = normalize_mesh(load_mesh(run_meta["mesh_path"]))
        self.curves = load_curves(self.run_dir / "curves.json")
        kp_path = self.run_dir / "keypoints.json"
        self.keypoints = load_keypoints(kp_path) if kp_path.exists() else []
        self.jobs: dict[str, Job] = {}
        self.job_lock = threading.Lock()
        self.active_job: Job | None = None
        self._oracle: DistanceOracle | None = None
        self._rebuild_skinning()

    def _rebuild_skinning(self) -> None:
        d = self.cfg.deform
        self.skinning = build_skinning(
            self.mesh, self.curves, d.samples_per_curve, d.temperature, d.k_handles
        )
        self.skinning_blob = serialize_skinning(self.skinning)

    @property
    def oracle(self) -> DistanceOracle:
        if self._oracle is None:
            self._oracle = DistanceOracle(self.mesh)
        return self._oracle

    def start_refinement(self, new_kps: list[Keypoint]) -> Job:
        with self.job_lock:
            if self.active_job is not None and self.active_job.state in ("queued", "running"):
                raise HTTPException(status_code=409, detail="a refinement job is already running")
            job = Job(id=uuid.uuid4().hex, kind="refine")
            self.jobs[job.id] = job
            self.active_job = job
        thread = threading.Thread(target=self._run_refinement, args=(job, new_kps), daemon=True)
        thread.start()
        return job

    def _run_refinement(self, job: Job, new_kps: list[Keypoint]) -> None:
        job.state = "running"
        job.log.append(f"refining around {len(new_kps)} keypoints")
        try:
            fieldnet = NeuralSDF.load(
                sdf_cache_path(self.run_dir / "cache", self.mesh),
                expect_mesh_hash=self.mesh.content_hash(),
            )
            cache = RenderCache(self.run_dir / "cache" / "renders")

            def progress(done, total):
                job.progress = done / max(1, total)

            result = refine(
                self.mesh, fieldnet, self.curves, new_kps, self.cfg, cache,
                progress=progress,
            )
            result.curve_set.transform = self.curves.transform
            self.curves = result.curve_set
            self.keypoints = self.keypoints + new_kps
            save_curves(self.curves, self.run_dir / "curves.json")
            save_keypoints(self.keypoints, self.run_dir / "keypoints.json")
            self._rebuild_skinning()
            job.artifacts.append(str(self.run_dir / "curves.json"))
            job.progress = 1.0
            job.state = "done"
            job.log.append(f"curve count now {len(self.curves)}")
        except Exception as exc:  # noqa: BLE001 - job boundary
            job.state = "failed"
            job.error = str(exc)
            job.log.append(f"failed: {exc}")


def create_app(run_dir: str | Path, viewer_dir: str | Path | None = None) -> FastAPI:
    state = RunState(Path(run_dir))
    app = FastAPI(title="meshsketch service")
    app.state.run = state

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/scene")
    def scene():
        return {
            "mesh": {
                "positions": state.mesh.vertices.ravel().tolist(),
                "faces": state.mesh.faces.ravel().tolist(),
            },
            "curves": curves_to_doc(state.curves),
            "keypoints": [
                {
                    "x": float(k.position[0]),
                    "y": float(k.position[1]),
                    "z": float(k.position[2]),
                    "source": k.source,
                    "label": k.label,
                }
                for k in state.keypoints
            ],
            "skinning_blob": base64.b64encode(state.skinning_blob).decode("ascii"),
            "deform": {
                "samples_per_curve": state.cfg.deform.samples_per_curve,
                "temperature": state.cfg.deform.temperature,
                "k_handles": state.cfg.deform.k_handles,
            },
        }

    @app.post("/keypoints")
    def post_keypoints(req: KeypointsRequest):
        kps = [
            Keypoint(np.array([k.x, k.y, k.z]), source=k.source, label=k.label)
            for k in req.keypoints
        ]
        kps = snap_keypoints(kps, state.oracle)
        job = state.start_refinement(kps)
        return {"job_id": job.id}

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail="unknown job")
        return job.to_dict()

    @app.post("/deform")
    def deform(req: DeformRequest):
        controls = np.asarray(req.control_points, dtype=np.float64)
        if controls.shape != (len(state.curves), 4, 3):
            raise HTTPException(
                status_code=422,
                detail=f"expected control points of shape ({len(state.curves)}, 4, 3)",
            )
        edited = state.curves.with_controls(controls)
        disp = displace_handles(state.curves, edited, state.cfg.deform.samples_per_curve)
        deformed = apply_deformation(state.mesh, state.skinning, disp)
        return {"vertices": deformed.vertices.ravel().tolist()}

    if viewer_dir and Path(viewer_dir).exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/viewer", StaticFiles(directory=str(viewer_dir), html=True), name="viewer")

    return app
