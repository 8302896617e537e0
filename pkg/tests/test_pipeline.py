import json

import numpy as np
import pytest

from volsplat.errors import InvalidInputError, StageError
from volsplat.pipeline import PipelineConfig, evaluate, run_pipeline
from volsplat.scenes import CameraPose, SceneSpec, hold_out, synthesize


def wall_views(n_cams=3, size=24, use_gt=True):
    cams = [CameraPose((0.15 * i, 0.0, 0.0), (0.0, 0.0, 2.0)) for i in range(n_cams)]
    spec = SceneSpec(kind="textured-wall", cameras=cams, image_size=(size, size), seed=1)
    views, _ = synthesize(spec)
    return views


def base_config(**sections):
    cfg = PipelineConfig()
    cfg.depth.use_gt = True
    cfg.feature.channels = 6
    for sec, kv in sections.items():
        for k, v in kv.items():
            setattr(getattr(cfg, sec), k, v)
    return cfg


class TestConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert cfg.loss.lam == 0.05
        assert cfg.voxel.size == 0.1
        assert cfg.head.offset_radius_multiplier == 3.0
        assert cfg.depth.num_hypotheses == 32
        assert cfg.depth.temperature == 0.05

    def test_from_json_with_lambda_alias(self):
        cfg = PipelineConfig.from_json({"loss": {"lambda": 0.2}, "voxel": {"size": 0.05}})
        assert cfg.loss.lam == 0.2
        assert cfg.voxel.size == 0.05

    def test_rejects_unknown_section_and_key(self):
        with pytest.raises(InvalidInputError):
            PipelineConfig.from_json({"nope": {}})
        with pytest.raises(InvalidInputError):
            PipelineConfig.from_json({"voxel": {"sizes": 0.1}})

    def test_from_json_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"unet": {"enabled": False, "levels": [4, 8]}}))
        cfg = PipelineConfig.from_json(path)
        assert cfg.unet.enabled is False
        assert cfg.unet.levels == (4, 8)

    def test_overrides(self):
        cfg = PipelineConfig()
        cfg.apply_override("voxel.size", "0.25")
        assert cfg.voxel.size == 0.25
        cfg.apply_override("unet.enabled", "false")
        assert cfg.unet.enabled is False
        cfg.apply_override("depth.num_hypotheses", "16")
        assert cfg.depth.num_hypotheses == 16
        cfg.apply_override("loss.lambda", "0.3")
        assert cfg.loss.lam == 0.3

    def test_override_bad_key(self):
        cfg = PipelineConfig()
        with pytest.raises(InvalidInputError):
            cfg.apply_override("novoxel.size", "1")
        with pytest.raises(InvalidInputError):
            cfg.apply_override("plainkey", "1")


class TestRunPipeline:
    def test_gt_depth_path_produces_gaussians(self):
        views = wall_views()
        gset, diag = run_pipeline(views, base_config())
        assert len(gset) > 0
        assert diag["gaussian_count"] == len(gset)
        assert diag["point_count"] == 3 * 24 * 24
        assert diag["occupied_voxels"] == len(gset)
        assert diag["pgs"] == pytest.approx(len(gset) / 3)
        assert set(diag["stages"]) >= {"features", "depth", "lift", "voxelize", "refine", "decode"}

    def test_estimated_depth_path_runs(self):
        views = wall_views()
        cfg = base_config(depth={"use_gt": False, "num_hypotheses": 8,
                                 "near": 1.0, "far": 4.0})
        gset, diag = run_pipeline(views, cfg)
        assert len(gset) > 0

    def test_determinism_bit_exact(self):
        views = wall_views()
        a, _ = run_pipeline(views, base_config())
        b, _ = run_pipeline(views, base_config())
        np.testing.assert_array_equal(a.centers, b.centers)
        np.testing.assert_array_equal(a.sh, b.sh)
        np.testing.assert_array_equal(a.opacity_logits, b.opacity_logits)

    def test_duplicate_views_do_not_grow_the_set(self):
        views = wall_views(n_cams=2)
        dup = list(views) + [views[0], views[1]]
        a, _ = run_pipeline(views, base_config())
        b, _ = run_pipeline(dup, base_config())
        assert len(b) == len(a)  # coincident points fall into the same voxels

    def test_no_decoder_mode(self):
        views = wall_views()
        on = base_config()
        off = base_config(unet={"enabled": False})
        _, diag_on = run_pipeline(views, on)
        _, diag_off = run_pipeline(views, off)
        assert diag_on["unet_enabled"] and not diag_off["unet_enabled"]

    def test_zero_unet_weights_match_disabled_unet(self, tmp_path):
        from volsplat.sparse_unet import UNetSpec, save_weights, zero_weights

        views = wall_views()
        wpath = tmp_path / "zero.vswt"
        save_weights(wpath, zero_weights(UNetSpec(), 6))
        with_zero = base_config(unet={"weights_path": str(wpath)})
        without = base_config(unet={"enabled": False})
        a, _ = run_pipeline(views, with_zero)
        b, _ = run_pipeline(views, without)
        np.testing.assert_array_equal(a.centers, b.centers)
        np.testing.assert_array_equal(a.sh, b.sh)

    def test_smaller_voxels_give_more_gaussians(self):
        views = wall_views()
        counts = []
        for size in (0.4, 0.2, 0.1, 0.05):
            cfg = base_config(voxel={"size": size})
            _, diag = run_pipeline(views, cfg)
            counts.append(diag["gaussian_count"])
        assert counts == sorted(counts)
        assert counts[0] < counts[-1]

    def test_gaussian_count_bounded_by_pixel_budget(self):
        views = wall_views()
        _, diag = run_pipeline(views, base_config())
        assert diag["gaussian_count"] <= 3 * 24 * 24

    def test_color_copy_head(self):
        views = wall_views()
        cfg = base_config(head={"kind": "color-copy"})
        gset, _ = run_pipeline(views, cfg)
        # dc coefficients encode colors inside [0, 1]
        from volsplat.gaussians import SH_C0

        colors = 0.5 + SH_C0 * gset.sh
        assert np.all(colors >= -1e-6) and np.all(colors <= 1 + 1e-6)
        assert np.all(gset.opacities > 0.99)

    def test_stage_errors_are_tagged(self, tmp_path):
        views = wall_views()
        cfg = base_config(unet={"weights_path": str(tmp_path / "missing.vswt")})
        with pytest.raises(StageError) as exc_info:
            run_pipeline(views, cfg)
        assert exc_info.value.stage == "refine"

    def test_bad_head_kind_fails_in_decode(self):
        views = wall_views()
        cfg = base_config(head={"kind": "telepathic"})
        with pytest.raises(StageError) as exc_info:
            run_pipeline(views, cfg)
        assert exc_info.value.stage == "decode"

    def test_rejects_too_few_views(self):
        views = wall_views(n_cams=2)
        cfg = base_config(depth={"use_gt": False})
        with pytest.raises(InvalidInputError):
            run_pipeline(views[:1], cfg)


class TestEvaluate:
    def test_report_shape(self):
        views = wall_views(n_cams=4)
        train, targets = hold_out(views, 1)
        cfg = base_config(head={"kind": "color-copy"}, voxel={"size": 0.05})
        gset, _ = run_pipeline(train, cfg)
        report = evaluate(gset, targets)
        assert len(report["per_view"]) == 1
        for key in ("mse", "psnr", "ssim"):
            assert key in report["mean"]
        assert report["gaussian_count"] == len(gset)

    def test_rejects_empty_targets(self):
        views = wall_views()
        gset, _ = run_pipeline(views, base_config())
        with pytest.raises(InvalidInputError):
            evaluate(gset, [])
