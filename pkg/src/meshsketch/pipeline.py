"""Two-stage curve optimization driver, refinement jobs, checkpointing, and
the run configuration with its ablation toggles.

Stage 1 fits geometry curves against occlusion-free contour renders; stage 2
freezes them, adds texture curves, and optimizes the localized keypoint loss
against surface renders. Refinement freezes everything and grows a small
number of curves around newly supplied keypoints, sampling only views where
those keypoints are visible.

All randomness flows through named numpy generator streams derived from the
config seed; checkpoints capture the generator states so a split run resumes
bit-compatibly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field, asdict, fields, is_dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from . import raster
from .curves import BezierCurve, CurveSet, init_curves, ndc_loss, project_points_t
from .geometry import Mesh, ViewSampler, farthest_point_sample
from .keypoints import Keypoint, WeightMap, backproject_features, detect_keypoints, localized_loss, weight_map
from .perception import (
    apply_augment,
    get_encoder,
    get_patch_model,
    prepare_image,
    sample_augment_params,
    semantic_loss,
)
from .sdf import NeuralSDF, SDFFitConfig, sdf_loss
from .targets import RenderCache, render_contours, render_surface


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class OptimizationError(RuntimeError):
    """Optimization aborted (non-finite loss); carries a snapshot path."""

    def __init__(self, message: str, snapshot: str | None = None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class StageConfig:
    iterations: int = 20_000
    curves: int = 20
    lr: float = 1e-3
    lambda_fc: float = 0.1
    sdf_weight: float = 0.1
    encoder: str = "clip:RN101"
    lambda_lpips: float = 0.0
    patch_model: str | None = None


@dataclass
class RasterConfig:
    resolution: int = 224
    stroke_width: float = 1.5
    softness: float = 1.0
    backend: str = "reference"


@dataclass
class ViewConfig:
    elevation: tuple[float, float] = (0.0, 30.0)
    azimuth: tuple[float, float] = (0.0, 360.0)
    radius: float = 8.0
    fov: float | None = None

    def sampler(self, resolution: int) -> ViewSampler:
        return ViewSampler(
            elevation=tuple(self.elevation),
            azimuth=tuple(self.azimuth),
            radius=self.radius,
            resolution=resolution,
            fov=self.fov,
        )


@dataclass
class AugmentConfig:
    count: int = 4
    distortion: float = 0.2
    crop_min: float = 0.8


@dataclass
class KeypointConfig:
    sigma: float = 0.1
    count: int | None = None  # None -> stage-2 curve count
    backproject_views: int = 16
    layer: str = "layer3"
    visibility_eps: float = 1e-3
    normalize_global: bool = False


@dataclass
class RefineConfig:
    curves_per_keypoint: int = 6
    iterations: int = 100
    init_sigma: float = 0.05
    max_view_tries: int = 200


@dataclass
class EvalConfig:
    encoder: str = "clip:ViT-B/32"
    patch_model: str = "lpips:alex"
    views: int = 30
    view_seed: int = 7_777
    coverage_points: int = 100_000
    curve_samples: int = 256


@dataclass
class DeformConfig:
    samples_per_curve: int = 32
    temperature: float = 0.05
    k_handles: int = 8


@dataclass
class AblationFlags:
    no_stage1: bool = False
    no_clip_layers: bool = False
    no_sdf: bool = False
    no_local: bool = False
    no_contour_renders: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    sigma_init: float = 0.05
    ndc_t_samples: int = 16
    sdf_samples_per_curve: int = 16
    sdf_include_frozen: bool = True
    weights_dir: str = "weights"
    checkpoint_every: int = 0
    stage1: StageConfig = field(
        default_factory=lambda: StageConfig(lambda_fc=0.1, sdf_weight=0.1, encoder="clip:RN101")
    )
    stage2: StageConfig = field(
        default_factory=lambda: StageConfig(
            lambda_fc=75.0, sdf_weight=1.0, encoder="clip:RN50x16",
            lambda_lpips=0.1, patch_model="lpips:vgg",
        )
    )
    raster: RasterConfig = field(default_factory=RasterConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    sdf_fit: SDFFitConfig = field(default_factory=SDFFitConfig)
    keypoints: KeypointConfig = field(default_factory=KeypointConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    deform: DeformConfig = field(default_factory=DeformConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def validate(self) -> None:
        if self.stage1.iterations < 0 or self.stage2.iterations < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.stage1.curves < 1 or self.stage2.curves < 1:
            raise ConfigError("curve counts must be >= 1")
        if self.eval.encoder in (self.stage1.encoder, self.stage2.encoder):
            raise ConfigError(
                "eval.encoder must differ from the optimization encoders "
                f"(got {self.eval.encoder!r})"
            )
        if self.stage2.patch_model and self.eval.patch_model == self.stage2.patch_model:
            raise ConfigError(
                "eval.patch_model must differ from the optimization patch model "
                f"(got {self.eval.patch_model!r})"
            )
        if not 0 < self.keypoints.sigma:
            raise ConfigError("keypoints.sigma must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _dataclass_from_dict(cls, data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        return cls.from_dict(data)

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]

    @classmethod
    def desk_preset(cls, seed: int = 0) -> "RunConfig":
        """Small hermetic preset for tests: stub encoders, 8+8 curves,
        300 iterations per stage, smaller distance-field fit.

        The tighter init sigma and low stroke softness are what let 300
        iterations grow strokes far enough to halve coverage; with the
        defaults the strokes carry more ink per unit length than the
        contour targets and stop growing early.
        """
        cfg = cls(seed=seed)
        cfg.sigma_init = 0.015
        cfg.stage1 = StageConfig(
            iterations=300, curves=8, lambda_fc=0.1, sdf_weight=0.1, encoder="stub:geometry"
        )
        cfg.stage2 = StageConfig(
            iterations=300, curves=8, lambda_fc=75.0, sdf_weight=1.0, encoder="stub:texture",
            lambda_lpips=0.1, patch_model="stub:vgg",
        )
        cfg.raster = RasterConfig(resolution=224, stroke_width=3.0, softness=0.35)
        cfg.sdf_fit = SDFFitConfig(
            hidden_layers=4, width=128, near_samples=30_000, uniform_samples=8_000,
            steps=1200, batch=2048, plateau_patience=400,
        )
        cfg.keypoints = KeypointConfig(sigma=0.1, backproject_views=8)
        cfg.eval = EvalConfig(
            encoder="stub:eval", patch_model="stub:alex", views=8, coverage_points=20_000
        )
        return cfg


def _dataclass_from_dict(cls, data):
    if data is None:
        return cls()
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        target = _FIELD_DATACLASSES.get((cls.__name__, f.name))
        if target is not None and isinstance(value, dict):
            kwargs[f.name] = _dataclass_from_dict(target, value)
        elif isinstance(value, list) and f.name in ("elevation", "azimuth"):
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config section for {cls.__name__}: {exc}") from exc


_FIELD_DATACLASSES = {
    ("RunConfig", "stage1"): StageConfig,
    ("RunConfig", "stage2"): StageConfig,
    ("RunConfig", "raster"): RasterConfig,
    ("RunConfig", "views"): ViewConfig,
    ("RunConfig", "augment"): AugmentConfig,
    ("RunConfig", "sdf_fit"): SDFFitConfig,
    ("RunConfig", "keypoints"): KeypointConfig,
    ("RunConfig", "refine"): RefineConfig,
    ("RunConfig", "eval"): EvalConfig,
    ("RunConfig", "deform"): DeformConfig,
    ("RunConfig", "ablation"): AblationFlags,
}


def _stream_seed(seed: int, stream: str) -> int:
    return int(np.random.SeedSequence([seed, _stream_id(stream)]).generate_state(1)[0])


def _stream_id(stream: str) -> int:
    return int.from_bytes(hashlib.sha256(stream.encode()).digest()[:4], "little")


def _stream_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _stream_id(stream)]))


class MaskedAdam:
    """Adam over a (n, 4, 3) control tensor that skips frozen rows entirely,
    so frozen control points stay bit-identical across steps."""

    def __init__(self, shape, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.m = torch.zeros(shape, dtype=torch.float64)
        self.v = torch.zeros(shape, dtype=torch.float64)
        self.steps = 0

    def step(self, param: torch.Tensor, active: torch.Tensor) -> None:
        if param.grad is None:
            return
        self.steps += 1
        b1, b2 = self.betas
        with torch.no_grad():
            g = param.grad[active]
            self.m[active] = b1 * self.m[active] + (1 - b1) * g
            self.v[active] = b2 * self.v[active] + (1 - b2) * g * g
            mhat = self.m[active] / (1 - b1**self.steps)
            vhat = self.v[active] / (1 - b2**self.steps)
            param[active] -= self.lr * mhat / (torch.sqrt(vhat) + self.eps)
        param.grad = None

    def state_dict(self) -> dict:
        return {"m": self.m.numpy().copy(), "v": self.v.numpy().copy(), "steps": self.steps}

    def load_state_dict(self, state: dict) -> None:
        self.m = torch.from_numpy(np.asarray(state["m"], dtype=np.float64)).clone()
        self.v = torch.from_numpy(np.asarray(state["v"], dtype=np.float64)).clone()
        self.steps = int(state["steps"])


@dataclass
class Checkpoint:
    stage: str
    iteration: int
    curve_set: CurveSet
    adam: dict
    rng_states: dict
    loss_history: list
    view_log: list
    config_hash: str
    mesh_hash: str


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    """Atomic write (temp file + rename) of the full optimizer state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cs = checkpoint.curve_set
    meta = {
        "stage": checkpoint.stage,
        "iteration": checkpoint.iteration,
        "rng_states": checkpoint.rng_states,
        "loss_history": checkpoint.loss_history,
        "view_log": checkpoint.view_log,
        "config_hash": checkpoint.config_hash,
        "mesh_hash": checkpoint.mesh_hash,
        "stroke_width": cs.stroke_width,
        "seed": cs.seed,
        "stages": [c.stage for c in cs.curves],
        "adam_steps": checkpoint.adam["steps"],
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
    os.close(fd)
    try:
        np.savez(
            tmp,
            __meta__=json.dumps(meta),
            controls=cs.control_array() if len(cs) else np.zeros((0, 4, 3)),
            frozen=cs.frozen_mask() if len(cs) else np.zeros(0, dtype=bool),
            adam_m=checkpoint.adam["m"],
            adam_v=checkpoint.adam["v"],
        )
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(
    path: str | Path, expect_config_hash: str | None = None, force: bool = False
) -> Checkpoint:
    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["__meta__"]))
    if expect_config_hash and meta["config_hash"] != expect_config_hash and not force:
        raise ConfigError(
            f"checkpoint config hash {meta['config_hash']} does not match "
            f"{expect_config_hash}; pass force=True to resume anyway"
        )
    curves = [
        BezierCurve(c, frozen=bool(fz), stage=st)
        for c, fz, st in zip(data["controls"], data["frozen"], meta["stages"])
    ]
    cs = CurveSet(curves, stroke_width=meta["stroke_width"], seed=meta["seed"])
    return Checkpoint(
        stage=meta["stage"],
        iteration=meta["iteration"],
        curve_set=cs,
        adam={"m": data["adam_m"], "v": data["adam_v"], "steps": meta["adam_steps"]},
        rng_states=meta["rng_states"],
        loss_history=meta["loss_history"],
        view_log=meta["view_log"],
        config_hash=meta["config_hash"],
        mesh_hash=meta["mesh_hash"],
    )


@dataclass
class StageResult:
    curve_set: CurveSet
    loss_history: list
    view_log: list
    checkpoint: Checkpoint


def _as_3ch(img: torch.Tensor) -> torch.Tensor:
    return prepare_image(img)


def _capture_rngs(rngs: dict) -> dict:
    return {k: g.bit_generator.state for k, g in rngs.items()}


def _restore_rngs(states: dict) -> dict:
    out = {}
    for k, state in states.items():
        g = np.random.default_rng(0)
        g.bit_generator.state = state
        out[k] = g
    return out


def _keypoint_visible(kp: Keypoint, camera, depth, eps: float) -> bool:
    from .geometry import project

    coord, z, valid = project(camera, kp.position)
    if not valid or z <= camera.near:
        return False
    u, v = float(coord[0]), float(coord[1])
    if not (0.0 <= u <= 1.0 and 0.0 <= v <= 1.0):
        return False
    res = depth.shape[0]
    pi = min(res - 1, max(0, int(v * res)))
    pj = min(res - 1, max(0, int(u * res)))
    return bool(z <= depth[pi, pj] + eps)


def _optimize(
    mesh: Mesh,
    fieldnet: NeuralSDF,
    curve_set: CurveSet,
    encoder,
    patch_model,
    cfg: RunConfig,
    stage_cfg: StageConfig,
    *,
    stage_name: str,
    localized: bool,
    keypoints: list[Keypoint] | None = None,
    cache: RenderCache | None = None,
    rngs: dict | None = None,
    start_iteration: int = 0,
    adam_state: dict | None = None,
    loss_history: list | None = None,
    view_log: list | None = None,
    require_visible: list[Keypoint] | None = None,
    snapshot_dir: str | Path | None = None,
    stop_at: int | None = None,
    progress=None,
) -> StageResult:
    """Shared optimization loop for both stages and refinement."""
    res = cfg.raster.resolution
    sampler = cfg.views.sampler(res)
    rngs = rngs or {
        "views": _stream_rng(cfg.seed, f"{stage_name}-views"),
        "sdf": _stream_rng(cfg.seed, f"{stage_name}-sdf"),
        "aug": _stream_rng(cfg.seed, f"{stage_name}-aug"),
    }
    controls = torch.tensor(curve_set.control_array(), dtype=torch.float64, requires_grad=True)
    frozen = torch.from_numpy(curve_set.frozen_mask())
    active = ~frozen
    adam = MaskedAdam(controls.shape, lr=stage_cfg.lr)
    if adam_state is not None:
        adam.load_state_dict(adam_state)
    loss_history = list(loss_history or [])
    view_log = list(view_log or [])

    target_kind = "surface" if (localized or cfg.ablation.no_contour_renders) else "contour"
    render_fn = render_surface if target_kind == "surface" else (
        lambda m, c: render_contours(m, c, line_width=cfg.raster.stroke_width)
    )

    def get_target(camera):
        if cache is not None:
            return cache.get(mesh, camera, target_kind, render_fn)
        return render_fn(mesh, camera)

    end = stop_at if stop_at is not None else stage_cfg.iterations
    kp_seen = {id(kp): 0 for kp in (require_visible or [])}
    for iteration in range(start_iteration, end):
        # --- sample a view (refinement insists its keypoints are visible)
        camera = None
        for attempt in range(cfg.refine.max_view_tries if require_visible else 1):
            el = float(rngs["views"].uniform(*sampler.elevation))
            az = float(rngs["views"].uniform(*sampler.azimuth))
            cand = sampler.camera_at(el, az)
            target = get_target(cand)
            if require_visible:
                vis = [
                    _keypoint_visible(kp, cand, target.depth, cfg.keypoints.visibility_eps)
                    for kp in require_visible
                ]
                for kp, v in zip(require_visible, vis):
                    kp_seen[id(kp)] += int(v)
                if not all(vis):
                    continue
            camera = cand
            break
        if camera is None:
            never = [kp for kp in (require_visible or []) if kp_seen[id(kp)] == 0]
            name = never[0].label if never and never[0].label else "keypoint"
            raise OptimizationError(
                f"no sampled view sees {name!r} within the view-sampler ranges"
            )
        view_log.append(
            {"iteration": iteration, "elevation": el, "azimuth": az, "camera": camera.key()}
        )

        # --- render the curves (float32 image path for CPU throughput)
        coords, _, valid = project_points_t(camera, controls)
        valid_curves = valid.all(dim=1)
        stroke = raster.rasterize(
            coords[valid_curves].to(torch.float32), res,
            cfg.raster.stroke_width, cfg.raster.softness,
            backend=cfg.raster.backend,
        )
        curve_img = _as_3ch(stroke.image)
        target_img = _as_3ch(torch.from_numpy(target.image).to(torch.float32))

        # --- augmentations shared between curve, target (and weight map)
        params = [
            sample_augment_params(res, rngs["aug"], cfg.augment.distortion, cfg.augment.crop_min)
            for _ in range(cfg.augment.count)
        ]
        aug_curve = torch.cat([apply_augment(curve_img, p) for p in params])
        aug_target = torch.cat([apply_augment(target_img, p) for p in params])

        include_layers = not cfg.ablation.no_clip_layers
        if localized:
            if cfg.ablation.no_local or not keypoints:
                aug_w = torch.ones(cfg.augment.count, 1, res, res, dtype=torch.float32)
            else:
                wm = weight_map(
                    keypoints, camera, target.depth, cfg.keypoints.sigma,
                    resolution=res, eps=cfg.keypoints.visibility_eps,
                )
                wt = wm.tensor().to(torch.float32)
                aug_w = torch.cat([apply_augment(wt[0, 0], p)[:, :1] for p in params])
            semantic = localized_loss(
                encoder, patch_model, aug_curve, aug_target, aug_w,
                stage_cfg.lambda_fc, stage_cfg.lambda_lpips,
                include_layers=include_layers,
                normalize_global=cfg.keypoints.normalize_global,
            )
        else:
            semantic = semantic_loss(
                encoder, aug_curve, aug_target, stage_cfg.lambda_fc,
                include_layers=include_layers,
            )

        sdf_term = torch.zeros((), dtype=torch.float64)
        if not cfg.ablation.no_sdf:
            sdf_term = sdf_loss(fieldnet, controls, cfg.sdf_samples_per_curve, rngs["sdf"])
        ndc_term = ndc_loss(controls, camera, cfg.ndc_t_samples)
        total = semantic + stage_cfg.sdf_weight * sdf_term + ndc_term

        if not torch.isfinite(total):
            snapshot = None
            if snapshot_dir is not None:
                snapshot = str(Path(snapshot_dir) / f"diagnostic-{stage_name}-{iteration}.npz")
                save_checkpoint(
                    _make_checkpoint(
                        stage_name, iteration, curve_set, controls, adam, rngs,
                        loss_history, view_log, cfg, mesh,
                    ),
                    snapshot,
                )
            raise OptimizationError(
                f"non-finite loss at iteration {iteration} of {stage_name}", snapshot
            )

        total.backward()
        adam.step(controls, active)
        loss_history.append(
            {
                "iteration": iteration,
                "total": float(total.detach()),
                "semantic": float(semantic.detach()),
                "sdf": float(sdf_term.detach()),
                "ndc": float(ndc_term.detach()),
            }
        )
        if progress is not None:
            progress(iteration + 1, end)
        if cfg.checkpoint_every and snapshot_dir is not None and (
            (iteration + 1) % cfg.checkpoint_every == 0
        ):
            save_checkpoint(
                _make_checkpoint(
                    stage_name, iteration + 1, curve_set, controls, adam, rngs,
                    loss_history, view_log, cfg, mesh,
                ),
                Path(snapshot_dir) / f"checkpoint-{stage_name}.npz",
            )

    final = curve_set.with_controls(controls.detach().numpy())
    checkpoint = _make_checkpoint(
        stage_name, end, final, controls, adam, rngs, loss_history, view_log, cfg, mesh
    )
    return StageResult(final, loss_history, view_log, checkpoint)


def _make_checkpoint(stage, iteration, curve_set, controls, adam, rngs, loss_history,
                     view_log, cfg, mesh) -> Checkpoint:
    return Checkpoint(
        stage=stage,
        iteration=iteration,
        curve_set=curve_set.with_controls(controls.detach().numpy()),
        adam=adam.state_dict(),
        rng_states=_capture_rngs(rngs),
        loss_history=list(loss_history),
        view_log=list(view_log),
        config_hash=cfg.hash(),
        mesh_hash=mesh.content_hash(),
    )


def init_stage_curves(mesh: Mesh, cfg: RunConfig, n: int, stage: str, stream: str) -> CurveSet:
    anchors = farthest_point_sample(mesh, n, seed=_stream_seed(cfg.seed, f"{stream}-fps"))
    cs = init_curves(
        anchors, sigma_init=cfg.sigma_init, seed=_stream_seed(cfg.seed, f"{stream}-init"),
        stage=stage, stroke_width=cfg.raster.stroke_width,
    )
    cs.transform = mesh.transform
    return cs


def run_stage1(
    mesh: Mesh,
    fieldnet: NeuralSDF,
    cfg: RunConfig,
    cache: RenderCache | None = None,
    resume: Checkpoint | None = None,
    stop_at: int | None = None,
    snapshot_dir: str | Path | None = None,
) -> StageResult:
    """Geometry stage: semantic loss against contour renders."""
    cfg.validate()
    encoder = get_encoder(cfg.stage1.encoder, cfg.weights_dir, cfg.raster.resolution)
    if resume is not None:
        curve_set = resume.curve_set
        rngs = _restore_rngs(resume.rng_states)
        return _optimize(
            mesh, fieldnet, curve_set, encoder, None, cfg, cfg.stage1,
            stage_name="stage1", localized=False, cache=cache, rngs=rngs,
            start_iteration=resume.iteration, adam_state=resume.adam,
            loss_history=resume.loss_history, view_log=resume.view_log,
            snapshot_dir=snapshot_dir, stop_at=stop_at,
        )
    curve_set = init_stage_curves(mesh, cfg, cfg.stage1.curves, "geometry", "stage1")
    return _optimize(
        mesh, fieldnet, curve_set, encoder, None, cfg, cfg.stage1,
        stage_name="stage1", localized=False, cache=cache,
        snapshot_dir=snapshot_dir, stop_at=stop_at,
    )


def auto_keypoints(
    mesh: Mesh,
    cfg: RunConfig,
    cache: RenderCache | None = None,
    encoder=None,
) -> list[Keypoint]:
    """Detect keypoints by back-projecting stage-2 encoder features."""
    encoder = encoder or get_encoder(cfg.stage2.encoder, cfg.weights_dir, cfg.raster.resolution)
    sampler = cfg.views.sampler(cfg.raster.resolution)
    rng = _stream_rng(cfg.seed, "kp-views")
    views = [sampler.sample(rng) for _ in range(cfg.keypoints.backproject_views)]
    render_fn = (
        (lambda m, c: cache.get(m, c, "surface", render_surface)) if cache else render_surface
    )
    vf = backproject_features(mesh, views, encoder, layer=cfg.keypoints.layer, render_fn=render_fn)
    k = cfg.keypoints.count or cfg.stage2.curves
    return detect_keypoints(vf, k, seed=_stream_seed(cfg.seed, "kmeans"), mesh=mesh)


def run_stage2(
    mesh: Mesh,
    fieldnet: NeuralSDF,
    cfg: RunConfig,
    stage1_curves: CurveSet | None,
    keypoints: list[Keypoint] | None = None,
    cache: RenderCache | None = None,
    resume: Checkpoint | None = None,
    stop_at: int | None = None,
    snapshot_dir: str | Path | None = None,
) -> StageResult:
    """Texture stage: freeze stage-1 curves, add new ones, localized loss."""
    cfg.validate()
    encoder = get_encoder(cfg.stage2.encoder, cfg.weights_dir, cfg.raster.resolution)
    patch_model = (
        get_patch_model(cfg.stage2.patch_model, cfg.weights_dir)
        if cfg.stage2.patch_model and cfg.stage2.lambda_lpips
        else None
    )
    if keypoints is None and not cfg.ablation.no_local:
        keypoints = auto_keypoints(mesh, cfg, cache, encoder)
    if resume is not None:
        return _optimize(
            mesh, fieldnet, resume.curve_set, encoder, patch_model, cfg, cfg.stage2,
            stage_name="stage2", localized=True, keypoints=keypoints, cache=cache,
            rngs=_restore_rngs(resume.rng_states), start_iteration=resume.iteration,
            adam_state=resume.adam, loss_history=resume.loss_history,
            view_log=resume.view_log, snapshot_dir=snapshot_dir, stop_at=stop_at,
        )
    frozen_prior = []
    if stage1_curves is not None:
        frozen_prior = [
            BezierCurve(c.control_points.copy(), frozen=True, stage=c.stage)
            for c in stage1_curves.curves
        ]
    fresh = init_stage_curves(mesh, cfg, cfg.stage2.curves, "texture", "stage2")
    combined = CurveSet(
        frozen_prior + fresh.curves,
        stroke_width=cfg.raster.stroke_width,
        seed=cfg.seed,
        transform=mesh.transform,
    )
    return _optimize(
        mesh, fieldnet, combined, encoder, patch_model, cfg, cfg.stage2,
        stage_name="stage2", localized=True, keypoints=keypoints, cache=cache,
        snapshot_dir=snapshot_dir, stop_at=stop_at,
    )


def refine(
    mesh: Mesh,
    fieldnet: NeuralSDF,
    curve_set: CurveSet,
    new_keypoints: list[Keypoint],
    cfg: RunConfig,
    cache: RenderCache | None = None,
    snapshot_dir: str | Path | None = None,
    progress=None,
) -> StageResult:
    """Freeze everything, add curves around the new keypoints, and optimize
    with the stage-2 losses over keypoint-visible views only."""
    cfg.validate()
    if not new_keypoints:
        raise ValueError("refinement needs at least one new keypoint")
    encoder = get_encoder(cfg.stage2.encoder, cfg.weights_dir, cfg.raster.resolution)
    patch_model = (
        get_patch_model(cfg.stage2.patch_model, cfg.weights_dir)
        if cfg.stage2.patch_model and cfg.stage2.lambda_lpips
        else None
    )
    frozen_prior = [
        BezierCurve(c.control_points.copy(), frozen=True, stage=c.stage)
        for c in curve_set.curves
    ]
    rng = _stream_rng(cfg.seed, "refine-init")
    fresh = []
    for kp in new_keypoints:
        for _ in range(cfg.refine.curves_per_keypoint):
            pts = kp.position + cfg.refine.init_sigma * rng.standard_normal((4, 3))
            fresh.append(BezierCurve(pts, stage="refinement"))
    combined = CurveSet(
        frozen_prior + fresh,
        stroke_width=curve_set.stroke_width,
        seed=cfg.seed,
        transform=curve_set.transform,
    )
    stage_cfg = dataclasses.replace(cfg.stage2, iterations=cfg.refine.iterations)
    return _optimize(
        mesh, fieldnet, combined, encoder, patch_model, cfg, stage_cfg,
        stage_name="refine", localized=True, keypoints=new_keypoints, cache=cache,
        require_visible=new_keypoints, snapshot_dir=snapshot_dir, progress=progress,
    )


def abstract(
    mesh: Mesh,
    fieldnet: NeuralSDF,
    cfg: RunConfig,
    keypoints: list[Keypoint] | None = None,
    cache: RenderCache | None = None,
    stage: str = "both",
    snapshot_dir: str | Path | None = None,
) -> StageResult:
    """Run the requested stages and return the final curve set."""
    stage1_result = None
    if stage in ("1", "both") and not cfg.ablation.no_stage1:
        stage1_result = run_stage1(mesh, fieldnet, cfg, cache, snapshot_dir=snapshot_dir)
        if stage == "1":
            return stage1_result
    stage1_curves = stage1_result.curve_set if stage1_result else None
    return run_stage2(
        mesh, fieldnet, cfg, stage1_curves, keypoints, cache, snapshot_dir=snapshot_dir
    )
