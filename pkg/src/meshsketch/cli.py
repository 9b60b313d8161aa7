"""Command-line entry points.

Every command works against a run directory holding the resolved config and
all artifacts, so the HTTP service is a thin view over the same files. Exit
codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from .curves import CurveSet, curves_to_doc, eval_bezier, load_curves, save_curves
from .geometry import Mesh, export_mesh, load_mesh, normalize_mesh
from .keypoints import load_keypoints, save_keypoints
from .metrics import evaluate
from .perception import EncoderLoadError, get_encoder, get_patch_model
from .pipeline import (
    ConfigError,
    OptimizationError,
    RunConfig,
    abstract as run_abstract,
    auto_keypoints,
    refine as run_refine,
)
from .sdf import DistanceOracle, NeuralSDF, fit_neural_sdf, sdf_cache_path
from .targets import RenderCache, render_contours, render_surface


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, EncoderLoadError, FileNotFoundError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except OptimizationError as exc:
            click.echo(f"optimization failed: {exc}", err=True)
            if exc.snapshot:
                click.echo(f"diagnostic snapshot: {exc.snapshot}", err=True)
            sys.exit(3)
        except Exception as exc:  # noqa: BLE001 - CLI boundary
            click.echo(f"failed: {exc}", err=True)
            sys.exit(3)

    return wrapper


def _load_config(config_path: str | None, overrides: tuple[str, ...]) -> RunConfig:
    cfg = RunConfig.load(config_path) if config_path else RunConfig()
    if overrides:
        data = cfg.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects dotted.key=value, got {item!r}")
            key, raw = item.split("=", 1)
            node = data
            parts = key.split(".")
            for part in parts[:-1]:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config section {key!r}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config field {key!r}")
            node[parts[-1]] = json.loads(raw) if raw not in ("null",) else None
        cfg = RunConfig.from_dict(data)
    cfg.validate()
    return cfg


def _prepare_run_dir(run_dir: Path, cfg: RunConfig, mesh_path: Path, mesh: Mesh) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "resolved_config.yaml")
    (run_dir / "run.json").write_text(
        json.dumps(
            {
                "mesh_path": str(mesh_path.resolve()),
                "mesh_hash": mesh.content_hash(),
                "config_hash": cfg.hash(),
            },
            indent=2,
        )
    )


def _load_field(run_dir: Path, mesh: Mesh, cfg: RunConfig) -> NeuralSDF:
    path = sdf_cache_path(run_dir / "cache", mesh)
    if path.exists():
        return NeuralSDF.load(path, expect_mesh_hash=mesh.content_hash())
    oracle = DistanceOracle(mesh)
    fieldnet = fit_neural_sdf(mesh, oracle, cfg.sdf_fit)
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnet.save(path, mesh_hash=mesh.content_hash())
    return fieldnet


config_option = click.option("--config", "config_path", type=click.Path(exists=True),
                             default=None, help="Run config YAML.")
set_option = click.option("--set", "overrides", multiple=True,
                          help="Override config fields: dotted.key=value (JSON values).")
out_option = click.option("--out", "run_dir", type=click.Path(), required=True,
                          help="Run directory for artifacts.")


@click.group()
def main() -> None:
    """Sparse 3D curve abstraction of triangle meshes."""


@main.command("fit-sdf")
@click.argument("mesh_path", type=click.Path(exists=True))
@config_option
@set_option
@out_option
@_handle_errors
def fit_sdf_cmd(mesh_path, config_path, overrides, run_dir):
    """Fit (or load) the neural distance field for MESH_PATH."""
    cfg = _load_config(config_path, overrides)
    mesh = normalize_mesh(load_mesh(mesh_path))
    run_dir = Path(run_dir)
    _prepare_run_dir(run_dir, cfg, Path(mesh_path), mesh)
    fieldnet = _load_field(run_dir, mesh, cfg)
    stats = dict(fieldnet.stats)
    stats.pop("history", None)
    click.echo(json.dumps(stats))


@main.command("detect-keypoints")
@click.argument("mesh_path", type=click.Path(exists=True))
@config_option
@set_option
@out_option
@_handle_errors
def detect_keypoints_cmd(mesh_path, config_path, overrides, run_dir):
    """Auto-detect keypoints and write keypoints.json."""
    cfg = _load_config(config_path, overrides)
    mesh = normalize_mesh(load_mesh(mesh_path))
    run_dir = Path(run_dir)
    _prepare_run_dir(run_dir, cfg, Path(mesh_path), mesh)
    cache = RenderCache(run_dir / "cache" / "renders")
    kps = auto_keypoints(mesh, cfg, cache)
    save_keypoints(kps, run_dir / "keypoints.json")
    click.echo(f"wrote {len(kps)} keypoints to {run_dir / 'keypoints.json'}")


@main.command("render-targets")
@click.argument("mesh_path", type=click.Path(exists=True))
@config_option
@set_option
@out_option
@click.option("--views", "n_views", default=8, show_default=True)
@click.option("--kinds", default="surface,contour", show_default=True)
@_handle_errors
def render_targets_cmd(mesh_path, config_path, overrides, run_dir, n_views, kinds):
    """Pre-render supervision imagery into the cache."""
    cfg = _load_config(config_path, overrides)
    mesh = normalize_mesh(load_mesh(mesh_path))
    run_dir = Path(run_dir)
    _prepare_run_dir(run_dir, cfg, Path(mesh_path), mesh)
    cache = RenderCache(run_dir / "cache" / "renders")
    sampler = cfg.views.sampler(cfg.raster.resolution)
    rng = np.random.default_rng(cfg.seed)
    cameras = [sampler.sample(rng) for _ in range(n_views)]
    renderers = {
        "surface": render_surface,
        "contour": lambda m, c: render_contours(m, c, line_width=cfg.raster.stroke_width),
    }
    for kind in kinds.split(","):
        for camera in cameras:
            cache.get(mesh, camera, kind, renderers[kind])
    click.echo(f"cache now holds {cache.size()} renders")


@main.command("abstract")
@click.argument("mesh_path", type=click.Path(exists=True))
@config_option
@set_option
@out_option
@click.option("--stage", type=click.Choice(["1", "2", "both"]), default="both",
              show_default=True)
@click.option("--keypoints", "keypoints_path", type=click.Path(exists=True), default=None,
              help="Optional user keypoints (JSON sidecar schema).")
@_handle_errors
def abstract_cmd(mesh_path, config_path, overrides, run_dir, stage, keypoints_path):
    """Run the two-stage curve optimization."""
    cfg = _load_config(config_path, overrides)
    mesh = normalize_mesh(load_mesh(mesh_path))
    run_dir = Path(run_dir)
    _prepare_run_dir(run_dir, cfg, Path(mesh_path), mesh)
    fieldnet = _load_field(run_dir, mesh, cfg)
    cache = RenderCache(run_dir / "cache" / "renders")
    keypoints = load_keypoints(keypoints_path) if keypoints_path else None
    if keypoints:
        oracle = DistanceOracle(mesh)
        from .keypoints import snap_keypoints

        keypoints = snap_keypoints(keypoints, oracle)
    result = run_abstract(
        mesh, fieldnet, cfg, keypoints=keypoints, cache=cache, stage=stage,
        snapshot_dir=run_dir / "checkpoints",
    )
    result.curve_set.transform = mesh.transform
    save_curves(result.curve_set, run_dir / "curves.json")
    (run_dir / "loss_history.json").write_text(json.dumps(result.loss_history))
    with open(run_dir / "view_log.jsonl", "w") as fh:
        for entry in result.view_log:
            fh.write(json.dumps(entry) + "\n")
    export_mesh(mesh, run_dir / "mesh.obj")
    from .pipeline import save_checkpoint

    save_checkpoint(result.checkpoint, run_dir / "checkpoints" / "final.npz")
    click.echo(f"wrote {len(result.curve_set)} curves to {run_dir / 'curves.json'}")


@main.command("refine")
@click.argument("mesh_path", type=click.Path(exists=True))
@config_option
@set_option
@out_option
@click.option("--curves", "curves_path", type=click.Path(exists=True), required=True)
@click.option("--keypoints", "keypoints_path", type=click.Path(exists=True), required=True,
              help="New keypoints to refine around.")
@_handle_errors
def refine_cmd(mesh_path, config_path, overrides, run_dir, curves_path, keypoints_path):
    """Add detail curves around new keypoints (existing curves frozen)."""
    cfg = _load_config(config_path, overrides)
    mesh = normalize_mesh(load_mesh(mesh_path))
    run_dir = Path(run_dir)
    _prepare_run_dir(run_dir, cfg, Path(mesh_path), mesh)
    fieldnet = _load_field(run_dir, mesh, cfg)
    cache = RenderCache(run_dir / "cache" / "renders")
    curve_set = load_curves(curves_path)
    oracle = DistanceOracle(mesh)
    from .keypoints import snap_keypoints

    new_kps = snap_keypoints(load_keypoints(keypoints_path), oracle)
    result = run_refine(mesh, fieldnet, curve_set, new_kps, cfg, cache,
                        snapshot_dir=run_dir / "checkpoints")
    result.curve_set.transform = curve_set.transform or mesh.transform
    save_curves(result.curve_set, run_dir / "curves.json")
    with open(run_dir / "view_log.jsonl", "w") as fh:
        for entry in result.view_log:
            fh.write(json.dumps(entry) + "\n")
    click.echo(
        f"appended {len(result.curve_set) - len(curve_set)} curves; "
        f"total {len(result.curve_set)}"
    )


@main.command("evaluate")
@click.argument("mesh_path", type=click.Path(exists=True))
@config_option
@set_option
@out_option
@click.option("--curves", "curves_path", type=click.Path(exists=True), required=True)
@_handle_errors
def evaluate_cmd(mesh_path, config_path, overrides, run_dir, curves_path):
    """Score coverage and the perceptual metrics; write report.json/.csv."""
    cfg = _load_config(config_path, overrides)
    mesh = normalize_mesh(load_mesh(mesh_path))
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    curve_set = load_curves(curves_path)
    encoder = get_encoder(cfg.eval.encoder, cfg.weights_dir, cfg.raster.resolution)
    patch_model = get_patch_model(cfg.eval.patch_model, cfg.weights_dir)
    report = evaluate(
        mesh, curve_set, encoder, patch_model,
        view_seed=cfg.eval.view_seed, n_views=cfg.eval.views,
        coverage_points=cfg.eval.coverage_points,
        samples_per_curve=cfg.eval.curve_samples,
        resolution=cfg.raster.resolution, raster_backend=cfg.raster.backend,
        softness=cfg.raster.softness, config_hash=cfg.hash(),
    )
    report.save(run_dir / "report.json")
    report.append_csv(run_dir / "report.csv")
    click.echo(json.dumps(report.to_dict()))


@main.command("export")
@click.argument("mesh_path", type=click.Path(exists=True))
@out_option
@click.option("--curves", "curves_path", type=click.Path(exists=True), required=True)
@_handle_errors
def export_cmd(mesh_path, run_dir, curves_path):
    """Export the normalized mesh (OBJ) and curve polylines (OBJ)."""
    mesh = normalize_mesh(load_mesh(mesh_path))
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    curve_set = load_curves(curves_path)
    export_mesh(mesh, run_dir / "mesh.obj")
    t = np.linspace(0.0, 1.0, 33)
    lines = []
    offset = 1
    for c in curve_set.curves:
        pts = eval_bezier(c, t)
        lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in pts]
        lines += [f"l {offset + i} {offset + i + 1}" for i in range(len(t) - 1)]
        offset += len(t)
    (run_dir / "curves.obj").write_text("\n".join(lines) + "\n")
    save_curves(curve_set, run_dir / "curves.json")
    click.echo(f"exported mesh.obj and curves.obj to {run_dir}")


@main.command("serve")
@click.argument("run_dir", type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8008, show_default=True)
@_handle_errors
def serve_cmd(run_dir, host, port):
    """Serve the viewer API over a completed run directory."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(Path(run_dir)), host=host, port=port)


if __name__ == "__main__":
    main()
