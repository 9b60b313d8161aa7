import dataclasses
import json

import numpy as np
import pytest
import torch
import yaml

from meshsketch.curves import BezierCurve, CurveSet
from meshsketch.geometry import ViewSampler, project
from meshsketch.keypoints import Keypoint
from meshsketch.pipeline import (
    AblationFlags,
    Checkpoint,
    ConfigError,
    MaskedAdam,
    OptimizationError,
    RunConfig,
    abstract,
    auto_keypoints,
    init_stage_curves,
    load_checkpoint,
    refine,
    run_stage1,
    run_stage2,
    save_checkpoint,
)
from meshsketch.targets import RenderCache, render_surface


def mini_cfg(seed=0, iterations=6):
    """Small fast config for loop mechanics tests (64px, stub encoders)."""
    cfg = RunConfig.desk_preset(seed=seed)
    cfg.raster = dataclasses.replace(cfg.raster, resolution=64)
    cfg.stage1 = dataclasses.replace(cfg.stage1, iterations=iterations, curves=3)
    cfg.stage2 = dataclasses.replace(cfg.stage2, iterations=iterations, curves=3)
    cfg.refine = dataclasses.replace(cfg.refine, iterations=4)
    cfg.keypoints = dataclasses.replace(cfg.keypoints, backproject_views=8)
    cfg.eval = dataclasses.replace(cfg.eval, views=2, coverage_points=1000)
    return cfg


def test_config_yaml_roundtrip(tmp_path):
    cfg = RunConfig.desk_preset(seed=5)
    cfg.ablation = AblationFlags(no_sdf=True, no_local=True)
    path = tmp_path / "config.yaml"
    cfg.save(path)
    back = RunConfig.load(path)
    assert back.to_dict() == cfg.to_dict()
    assert back.hash() == cfg.hash()
    assert back.ablation.no_sdf and back.ablation.no_local


def test_config_every_field_roundtrips():
    cfg = RunConfig()
    d = cfg.to_dict()
    # flip every leaf in the ablation section and a sample of scalars
    d["ablation"] = {k: True for k in d["ablation"]}
    d["stage1"]["iterations"] = 123
    d["views"]["elevation"] = [5.0, 25.0]
    back = RunConfig.from_dict(d)
    assert back.stage1.iterations == 123
    assert back.views.elevation == (5.0, 25.0)
    assert all(vars(back.ablation).values())


def test_config_validation_errors():
    cfg = RunConfig()
    cfg.eval = dataclasses.replace(cfg.eval, encoder=cfg.stage1.encoder)
    with pytest.raises(ConfigError, match="eval.encoder"):
        cfg.validate()
    cfg2 = RunConfig()
    cfg2.eval = dataclasses.replace(cfg2.eval, patch_model=cfg2.stage2.patch_model)
    with pytest.raises(ConfigError, match="patch_model"):
        cfg2.validate()


def test_defaults_match_published_values():
    cfg = RunConfig()
    assert cfg.stage1.iterations == 20_000 and cfg.stage2.iterations == 20_000
    assert cfg.stage1.curves == 20 and cfg.stage2.curves == 20
    assert cfg.stage1.lr == 1e-3 and cfg.stage2.lr == 1e-3
    assert cfg.stage1.lambda_fc == 0.1
    assert cfg.stage2.lambda_fc == 75.0
    assert cfg.stage2.lambda_lpips == 0.1
    assert cfg.keypoints.sigma == 0.1
    assert cfg.stage1.sdf_weight == 0.1 and cfg.stage2.sdf_weight == 1.0
    assert cfg.augment.count == 4
    assert cfg.views.elevation == (0.0, 30.0)
    assert cfg.views.azimuth == (0.0, 360.0)
    assert cfg.stage1.encoder == "clip:RN101"
    assert cfg.stage2.encoder == "clip:RN50x16"


def test_masked_adam_skips_frozen_rows():
    param = torch.zeros(3, 4, 3, dtype=torch.float64, requires_grad=True)
    loss = ((param - 1.0) ** 2).sum()
    loss.backward()
    adam = MaskedAdam(param.shape, lr=0.1)
    frozen_before = param[0].detach().clone()
    active = torch.tensor([False, True, True])
    adam.step(param, active)
    assert torch.equal(param[0], frozen_before)
    assert not torch.equal(param[1], torch.zeros(4, 3, dtype=torch.float64))


def test_zero_iterations_returns_initialization(sphere_mesh, sphere_field):
    cfg = mini_cfg(iterations=0)
    result = run_stage1(sphere_mesh, sphere_field, cfg)
    init = init_stage_curves(sphere_mesh, cfg, cfg.stage1.curves, "geometry", "stage1")
    assert np.array_equal(result.curve_set.control_array(), init.control_array())
    assert all(c.stage == "geometry" for c in result.curve_set.curves)


def test_seed_determinism(sphere_mesh, sphere_field):
    cfg = mini_cfg(seed=3)
    a = run_stage1(sphere_mesh, sphere_field, cfg)
    b = run_stage1(sphere_mesh, sphere_field, cfg)
    assert a.loss_history == b.loss_history
    assert np.array_equal(a.curve_set.control_array(), b.curve_set.control_array())


def test_checkpoint_roundtrip(tmp_path, sphere_mesh, sphere_field):
    cfg = mini_cfg()
    result = run_stage1(sphere_mesh, sphere_field, cfg)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(result.checkpoint, path)
    back = load_checkpoint(path, expect_config_hash=cfg.hash())
    assert np.array_equal(back.curve_set.control_array(), result.curve_set.control_array())
    assert back.iteration == result.checkpoint.iteration
    assert np.array_equal(back.adam["m"], result.checkpoint.adam["m"])
    assert back.rng_states == result.checkpoint.rng_states
    with pytest.raises(ConfigError, match="hash"):
        load_checkpoint(path, expect_config_hash="0" * 16)
    # force overrides the mismatch
    load_checkpoint(path, expect_config_hash="0" * 16, force=True)


def test_resume_zero_steps_is_identity(tmp_path, sphere_mesh, sphere_field):
    cfg = mini_cfg()
    first = run_stage1(sphere_mesh, sphere_field, cfg, stop_at=4)
    resumed = run_stage1(sphere_mesh, sphere_field, cfg, resume=first.checkpoint, stop_at=4)
    assert np.array_equal(
        resumed.curve_set.control_array(), first.curve_set.control_array()
    )


def test_split_resume_matches_straight_run(sphere_mesh, sphere_field):
    cfg = mini_cfg(iterations=8)
    straight = run_stage1(sphere_mesh, sphere_field, cfg)
    half = run_stage1(sphere_mesh, sphere_field, cfg, stop_at=4)
    resumed = run_stage1(sphere_mesh, sphere_field, cfg, resume=half.checkpoint)
    assert len(resumed.loss_history) == len(straight.loss_history)
    for a, b in zip(straight.loss_history, resumed.loss_history):
        assert abs(a["total"] - b["total"]) < 1e-6
    assert np.allclose(
        resumed.curve_set.control_array(), straight.curve_set.control_array(), atol=1e-12
    )


def test_stage2_freezes_stage1(sphere_mesh, sphere_field):
    cfg = mini_cfg()
    s1 = run_stage1(sphere_mesh, sphere_field, cfg)
    s2 = run_stage2(sphere_mesh, sphere_field, cfg, s1.curve_set, keypoints=[])
    assert len(s2.curve_set) == 6
    assert np.array_equal(
        s2.curve_set.control_array()[:3], s1.curve_set.control_array()
    )
    assert all(c.frozen for c in s2.curve_set.curves[:3])
    assert all(not c.frozen for c in s2.curve_set.curves[3:])
    assert all(c.stage == "texture" for c in s2.curve_set.curves[3:])


def test_stage2_auto_keypoint_count(sphere_mesh, sphere_field):
    cfg = mini_cfg()
    kps = auto_keypoints(sphere_mesh, cfg)
    assert len(kps) == cfg.stage2.curves
    assert all(k.source == "auto" for k in kps)


def test_abstract_no_stage1_ablation(sphere_mesh, sphere_field):
    cfg = mini_cfg()
    cfg.ablation = AblationFlags(no_stage1=True)
    result = abstract(sphere_mesh, sphere_field, cfg, keypoints=[])
    assert len(result.curve_set) == cfg.stage2.curves
    assert all(c.stage == "texture" for c in result.curve_set.curves)


def test_no_sdf_ablation_records_zero(sphere_mesh, sphere_field):
    cfg = mini_cfg(iterations=2)
    cfg.ablation = AblationFlags(no_sdf=True)
    result = run_stage1(sphere_mesh, sphere_field, cfg)
    assert all(h["sdf"] == 0.0 for h in result.loss_history)


def test_refine_appends_six_per_keypoint(sphere_mesh, sphere_field, rng):
    cfg = mini_cfg()
    base = CurveSet(
        [BezierCurve(rng.standard_normal((4, 3)) * 0.2) for _ in range(4)],
        stroke_width=cfg.raster.stroke_width,
    )
    eye_side = sphere_mesh.vertices[np.argmax(sphere_mesh.vertices[:, 0])]
    top = sphere_mesh.vertices[np.argmax(sphere_mesh.vertices[:, 1])]
    kps = [Keypoint(eye_side, label="side"), Keypoint(top, label="top")]
    result = refine(sphere_mesh, sphere_field, base, kps, cfg)
    assert len(result.curve_set) == 4 + 2 * cfg.refine.curves_per_keypoint
    assert np.array_equal(result.curve_set.control_array()[:4], base.control_array())
    assert all(c.frozen for c in result.curve_set.curves[:4])
    assert all(c.stage == "refinement" for c in result.curve_set.curves[4:])
    assert len(result.loss_history) == cfg.refine.iterations


def test_refine_samples_only_keypoint_visible_views(sphere_mesh, sphere_field, rng):
    cfg = mini_cfg()
    base = CurveSet([BezierCurve(rng.standard_normal((4, 3)) * 0.2)],
                    stroke_width=cfg.raster.stroke_width)
    kp = Keypoint(sphere_mesh.vertices[np.argmax(sphere_mesh.vertices[:, 0])], label="px")
    result = refine(sphere_mesh, sphere_field, base, [kp], cfg)
    sampler = cfg.views.sampler(cfg.raster.resolution)
    from meshsketch.pipeline import _keypoint_visible

    assert len(result.view_log) == cfg.refine.iterations
    for entry in result.view_log:
        cam = sampler.camera_at(entry["elevation"], entry["azimuth"])
        depth = render_surface(sphere_mesh, cam).depth
        assert _keypoint_visible(kp, cam, depth, cfg.keypoints.visibility_eps)


def test_refine_unreachable_keypoint_named(sphere_mesh, sphere_field, rng):
    cfg = mini_cfg()
    cfg.views = dataclasses.replace(cfg.views, azimuth=(0.0, 1.0), elevation=(0.0, 1.0))
    cfg.refine = dataclasses.replace(cfg.refine, max_view_tries=10)
    base = CurveSet([BezierCurve(rng.standard_normal((4, 3)) * 0.2)],
                    stroke_width=cfg.raster.stroke_width)
    hidden = sphere_mesh.vertices[np.argmin(sphere_mesh.vertices[:, 0])]
    kp = Keypoint(hidden, label="backside")
    with pytest.raises(OptimizationError, match="backside"):
        refine(sphere_mesh, sphere_field, base, [kp], cfg)


def test_refine_requires_keypoints(sphere_mesh, sphere_field, rng):
    cfg = mini_cfg()
    base = CurveSet([BezierCurve(rng.standard_normal((4, 3)))], stroke_width=1.0)
    with pytest.raises(ValueError, match="keypoint"):
        refine(sphere_mesh, sphere_field, base, [], cfg)


def test_nonfinite_loss_aborts_with_snapshot(tmp_path, sphere_mesh, sphere_field, monkeypatch):
    cfg = mini_cfg()
    import meshsketch.pipeline as pl

    def poisoned(*args, **kwargs):
        return torch.tensor(float("nan"), dtype=torch.float64)

    monkeypatch.setattr(pl, "semantic_loss", poisoned)
    with pytest.raises(OptimizationError, match="non-finite"):
        run_stage1(sphere_mesh, sphere_field, cfg, snapshot_dir=tmp_path)
    assert list(tmp_path.glob("diagnostic-stage1-*.npz"))


def test_cached_and_fresh_runs_identical(tmp_path, sphere_mesh, sphere_field):
    cfg = mini_cfg(seed=8)
    cache = RenderCache(tmp_path / "renders")
    first = run_stage1(sphere_mesh, sphere_field, cfg, cache=cache)
    second = run_stage1(sphere_mesh, sphere_field, cfg, cache=cache)
    assert first.loss_history == second.loss_history
    assert cache.hits > 0
