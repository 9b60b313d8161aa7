import base64
import json
import time
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from meshsketch.cli import main
from meshsketch.curves import load_curves
from meshsketch.deform import (
    apply_deformation,
    blob_byte_length,
    displace_handles,
    parse_skinning,
)
from meshsketch.geometry import export_mesh, load_mesh, normalize_mesh
from meshsketch.keypoints import save_keypoints, Keypoint
from meshsketch.primitives import make_icosphere
from meshsketch.service import create_app

MINI_OVERRIDES = [
    "--set", "raster.resolution=64",
    "--set", "stage1.iterations=4",
    "--set", "stage2.iterations=4",
    "--set", "stage1.curves=3",
    "--set", "stage2.curves=3",
    "--set", "refine.iterations=3",
    "--set", "keypoints.backproject_views=8",
    "--set", 'sdf_fit.near_samples=4000',
    "--set", 'sdf_fit.uniform_samples=1000',
    "--set", 'sdf_fit.steps=200',
    "--set", 'sdf_fit.hidden_layers=3',
    "--set", 'sdf_fit.width=64',
    "--set", 'sdf_fit.batch=512',
    "--set", 'sdf_fit.error_gate=0.05',
    "--set", "eval.views=2",
    "--set", "eval.coverage_points=1000",
]


@pytest.fixture(scope="module")
def sphere_obj(tmp_path_factory):
    path = tmp_path_factory.mktemp("meshes") / "sphere.obj"
    export_mesh(make_icosphere(2), path)
    return path


@pytest.fixture(scope="module")
def desk_config_path(tmp_path_factory):
    from meshsketch.pipeline import RunConfig

    path = tmp_path_factory.mktemp("cfg") / "desk.yaml"
    RunConfig.desk_preset().save(path)
    return path


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory, sphere_obj, desk_config_path):
    """A tiny completed run directory shared by CLI and service tests."""
    run_dir = tmp_path_factory.mktemp("run")
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["abstract", str(sphere_obj), "--config", str(desk_config_path),
         "--out", str(run_dir), "--stage", "both", *MINI_OVERRIDES],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    return run_dir


def test_abstract_writes_artifacts(mini_run):
    assert (mini_run / "curves.json").exists()
    assert (mini_run / "resolved_config.yaml").exists()
    assert (mini_run / "run.json").exists()
    assert (mini_run / "loss_history.json").exists()
    assert (mini_run / "view_log.jsonl").exists()
    assert (mini_run / "checkpoints" / "final.npz").exists()
    curves = load_curves(mini_run / "curves.json")
    assert len(curves) == 6  # 3 + 3 curve preset
    assert curves.transform is not None


def test_evaluate_cli(mini_run, sphere_obj, desk_config_path, tmp_path):
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["evaluate", str(sphere_obj), "--config", str(desk_config_path),
         "--out", str(tmp_path), "--curves", str(mini_run / "curves.json"),
         *MINI_OVERRIDES],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "report.json").read_text())
    assert {"coverage", "patch_similarity", "encoder_similarity"} <= set(report)
    assert (tmp_path / "report.csv").exists()


def test_refine_cli_appends_curves(mini_run, sphere_obj, desk_config_path, tmp_path):
    mesh = normalize_mesh(load_mesh(sphere_obj))
    vis = mesh.vertices[np.argmax(mesh.vertices[:, 0])]
    top = mesh.vertices[np.argmax(mesh.vertices[:, 1])]
    kp_path = tmp_path / "new_kps.json"
    save_keypoints([Keypoint(vis, label="a"), Keypoint(top, label="b")], kp_path)
    out = tmp_path / "refined"
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["refine", str(sphere_obj), "--config", str(desk_config_path),
         "--out", str(out), "--curves", str(mini_run / "curves.json"),
         "--keypoints", str(kp_path), *MINI_OVERRIDES],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    refined = load_curves(out / "curves.json")
    assert len(refined) == 6 + 12  # 6 existing + 2 keypoints x 6 curves


def test_fit_sdf_cli(sphere_obj, desk_config_path, tmp_path):
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["fit-sdf", str(sphere_obj), "--config", str(desk_config_path),
         "--out", str(tmp_path), *MINI_OVERRIDES],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    stats = json.loads(result.output.strip().splitlines()[-1])
    assert "holdout_median_error" in stats


def test_render_targets_cli(sphere_obj, desk_config_path, tmp_path):
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["render-targets", str(sphere_obj), "--config", str(desk_config_path),
         "--out", str(tmp_path), "--views", "2", *MINI_OVERRIDES],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    assert "4 renders" in result.output


def test_export_cli(mini_run, sphere_obj, tmp_path):
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["export", str(sphere_obj), "--out", str(tmp_path),
         "--curves", str(mini_run / "curves.json")],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    assert (tmp_path / "mesh.obj").exists()
    assert (tmp_path / "curves.obj").exists()


def test_detect_keypoints_cli(sphere_obj, desk_config_path, tmp_path):
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["detect-keypoints", str(sphere_obj), "--config", str(desk_config_path),
         "--out", str(tmp_path), *MINI_OVERRIDES],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    kps = json.loads((tmp_path / "keypoints.json").read_text())
    assert len(kps) == 3  # stage-2 curve count


def test_config_error_exit_code(sphere_obj, tmp_path):
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["abstract", str(sphere_obj), "--out", str(tmp_path),
         "--set", "nonsense.key=1"],
    )
    assert result.exit_code == 2


def test_runtime_error_exit_code(tmp_path, sphere_obj):
    # unreadable curves file -> runtime failure (exit 3)
    bad = tmp_path / "curves.json"
    bad.write_text("{not json")
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["evaluate", str(sphere_obj), "--out", str(tmp_path), "--curves", str(bad)],
    )
    assert result.exit_code == 3


# --- service ---------------------------------------------------------------


@pytest.fixture(scope="module")
def client(mini_run):
    app = create_app(mini_run)
    with TestClient(app) as c:
        yield c


def test_health(client):
    assert client.get("/health").json() == {"status": "ok"}


def test_scene_payload(client, mini_run):
    scene = client.get("/scene").json()
    n_verts = len(scene["mesh"]["positions"]) // 3
    assert len(scene["mesh"]["faces"]) % 3 == 0
    assert scene["curves"]["format"] == "meshsketch-curves"
    n_curves = len(scene["curves"]["curves"])
    assert n_curves == 6
    blob = base64.b64decode(scene["skinning_blob"])
    d = scene["deform"]
    expected = blob_byte_length(n_curves * d["samples_per_curve"], n_verts, d["k_handles"])
    assert len(blob) == expected
    sw = parse_skinning(blob)
    assert sw.n_handles == n_curves * d["samples_per_curve"]


def test_deform_rest_is_identity(client):
    scene = client.get("/scene").json()
    rest = [c["control_points"] for c in scene["curves"]["curves"]]
    out = client.post("/deform", json={"control_points": rest}).json()
    verts = np.asarray(out["vertices"]).reshape(-1, 3)
    mesh_verts = np.asarray(scene["mesh"]["positions"]).reshape(-1, 3)
    assert np.array_equal(verts, mesh_verts)


def test_deform_matches_local_bitwise(client, mini_run, sphere_obj):
    scene = client.get("/scene").json()
    rest = np.asarray([c["control_points"] for c in scene["curves"]["curves"]])
    edited = rest.copy()
    edited[0] += np.array([0.05, -0.03, 0.02])
    out = client.post("/deform", json={"control_points": edited.tolist()}).json()
    server_verts = np.asarray(out["vertices"]).reshape(-1, 3)

    from meshsketch.pipeline import RunConfig

    cfg = RunConfig.load(mini_run / "resolved_config.yaml")
    mesh = normalize_mesh(load_mesh(sphere_obj))
    curves = load_curves(mini_run / "curves.json")
    from meshsketch.deform import build_skinning

    sw = build_skinning(mesh, curves, cfg.deform.samples_per_curve,
                        cfg.deform.temperature, cfg.deform.k_handles)
    disp = displace_handles(curves, curves.with_controls(edited), cfg.deform.samples_per_curve)
    local = apply_deformation(mesh, sw, disp)
    assert np.array_equal(server_verts, local.vertices)


def test_deform_shape_validation(client):
    r = client.post("/deform", json={"control_points": [[[0.0, 0.0, 0.0]]]})
    assert r.status_code == 422
    r = client.post("/deform", json={"wrong": 1})
    assert r.status_code == 422


def test_unknown_job_404(client):
    assert client.get("/jobs/doesnotexist").status_code == 404


def test_keypoint_refinement_job_and_conflict(client):
    scene = client.get("/scene").json()
    positions = np.asarray(scene["mesh"]["positions"]).reshape(-1, 3)
    kp = positions[np.argmax(positions[:, 0])]
    body = {"keypoints": [{"x": float(kp[0]), "y": float(kp[1]), "z": float(kp[2]),
                           "label": "probe"}]}
    n_before = len(scene["curves"]["curves"])
    first = client.post("/keypoints", json=body)
    assert first.status_code == 200
    job_id = first.json()["job_id"]
    second = client.post("/keypoints", json=body)
    assert second.status_code == 409

    for _ in range(600):
        job = client.get(f"/jobs/{job_id}").json()
        if job["state"] in ("done", "failed"):
            break
        time.sleep(0.2)
    assert job["state"] == "done", job
    assert job["progress"] == 1.0
    scene_after = client.get("/scene").json()
    assert len(scene_after["curves"]["curves"]) == n_before + 6


def test_keypoints_validation(client):
    assert client.post("/keypoints", json={"keypoints": []}).status_code == 422
