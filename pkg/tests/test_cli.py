import hashlib
import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from volsplat import __version__
from volsplat.cli import main, report_schema
from volsplat.sceneio import load_scene, read_depth, save_scene, write_depth
from volsplat.scenes import CameraPose, SceneSpec, synthesize


@pytest.fixture
def runner():
    return CliRunner()


def wall_spec_dict(size=24, n_cams=3):
    return {
        "kind": "textured-wall",
        "cameras": [
            {"position": [0.15 * i, 0.0, 0.0], "look_at": [0.0, 0.0, 2.0]}
            for i in range(n_cams)
        ],
        "image_size": [size, size],
        "seed": 1,
    }


@pytest.fixture
def scene_dir(tmp_path):
    spec = SceneSpec.from_json(wall_spec_dict())
    views, _ = synthesize(spec)
    d = tmp_path / "scene"
    save_scene(views, d)
    return d


def run_args(scene_dir, out_dir, *extra):
    return ["run", "--scene", str(scene_dir), "--out", str(out_dir),
            "-o", "depth.use_gt=true", "-o", "feature.channels=6", *extra]


def file_hashes(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in sorted(files):
            p = os.path.join(base, f)
            out[os.path.relpath(p, root)] = hashlib.sha256(open(p, "rb").read()).hexdigest()
    return out


class TestVersion:
    def test_version_flag(self, runner):
        res = runner.invoke(main, ["--version"])
        assert res.exit_code == 0
        assert __version__ in res.output


class TestSynth:
    def test_writes_manifest(self, runner, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(wall_spec_dict()))
        out = tmp_path / "scene"
        res = runner.invoke(main, ["synth", "--spec", str(spec_path), "--out", str(out)])
        assert res.exit_code == 0, res.output
        listed = res.output.split()
        assert len(listed) == 9  # 3 views x (ppm, json, depth)
        for p in listed:
            assert os.path.exists(p)
        views = load_scene(out)
        assert len(views) == 3
        assert views[0].gt_depth is not None

    def test_garden_exports_gt_ply(self, runner, tmp_path):
        spec = {
            "kind": "gaussian-garden",
            "cameras": [
                {"position": [0.0, 0.0, 0.0], "look_at": [0.0, 0.0, 2.0]},
                {"position": [0.2, 0.0, 0.0], "look_at": [0.0, 0.0, 2.0]},
            ],
            "image_size": [16, 16],
            "params": {"side": 16},
        }
        spec_path = tmp_path / "g.json"
        spec_path.write_text(json.dumps(spec))
        out = tmp_path / "garden"
        res = runner.invoke(main, ["synth", "--spec", str(spec_path), "--out", str(out)])
        assert res.exit_code == 0, res.output
        assert (out / "gt_gaussians.ply").exists()

    def test_bad_spec_exits_2(self, runner, tmp_path):
        spec_path = tmp_path / "bad.json"
        spec_path.write_text(json.dumps({"kind": "nope", "cameras": []}))
        res = runner.invoke(main, ["synth", "--spec", str(spec_path), "--out", str(tmp_path / "x")])
        assert res.exit_code == 2

    def test_missing_spec_file_exits_2(self, runner, tmp_path):
        res = runner.invoke(main, ["synth", "--spec", str(tmp_path / "none.json"),
                                   "--out", str(tmp_path / "x")])
        assert res.exit_code == 2


class TestRun:
    def test_produces_outputs(self, runner, scene_dir, tmp_path):
        out = tmp_path / "out"
        res = runner.invoke(main, run_args(scene_dir, out))
        assert res.exit_code == 0, res.output
        assert (out / "gaussians.ply").exists()
        assert (out / "summary.json").exists()
        diag = json.loads((out / "diagnostics.json").read_text())
        assert diag["gaussian_count"] > 0
        renders = sorted(os.listdir(out / "renders"))
        assert renders == ["render_000.ppm", "render_001.ppm", "render_002.ppm"]

    def test_idempotent_outputs(self, runner, scene_dir, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert runner.invoke(main, run_args(scene_dir, out_a)).exit_code == 0
        assert runner.invoke(main, run_args(scene_dir, out_b)).exit_code == 0
        ha, hb = file_hashes(out_a), file_hashes(out_b)
        # stage timings differ run to run; everything else is bit-identical
        del ha["timings.json"], hb["timings.json"]
        assert ha == hb

    def test_thread_count_does_not_change_outputs(self, runner, scene_dir, tmp_path):
        out_a, out_b = tmp_path / "t1", tmp_path / "t8"
        assert runner.invoke(main, run_args(scene_dir, out_a, "--threads", "1")).exit_code == 0
        assert runner.invoke(main, run_args(scene_dir, out_b, "--threads", "8")).exit_code == 0
        ha, hb = file_hashes(out_a), file_hashes(out_b)
        del ha["timings.json"], hb["timings.json"]
        assert ha == hb

    def test_ablate_no_decoder(self, runner, scene_dir, tmp_path):
        out = tmp_path / "abl"
        res = runner.invoke(main, run_args(scene_dir, out, "--ablate", "no-decoder"))
        assert res.exit_code == 0, res.output
        diag = json.loads((out / "diagnostics.json").read_text())
        assert diag["unet_enabled"] is False

    def test_voxel_size_flag(self, runner, scene_dir, tmp_path):
        big = tmp_path / "big"
        small = tmp_path / "small"
        assert runner.invoke(main, run_args(scene_dir, big, "--voxel-size", "0.4")).exit_code == 0
        assert runner.invoke(main, run_args(scene_dir, small, "--voxel-size", "0.05")).exit_code == 0
        nb = json.loads((big / "diagnostics.json").read_text())["gaussian_count"]
        ns = json.loads((small / "diagnostics.json").read_text())["gaussian_count"]
        assert ns > nb

    def test_bad_override_exits_2(self, runner, scene_dir, tmp_path):
        res = runner.invoke(main, ["run", "--scene", str(scene_dir),
                                   "--out", str(tmp_path / "x"), "-o", "bogus.key=1"])
        assert res.exit_code == 2

    def test_stage_failure_exits_1(self, runner, scene_dir, tmp_path):
        res = runner.invoke(main, run_args(
            scene_dir, tmp_path / "x",
            "-o", f"unet.weights_path={tmp_path / 'missing.vswt'}"))
        assert res.exit_code == 1

    def test_empty_scene_dir_exits_2(self, runner, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        res = runner.invoke(main, ["run", "--scene", str(empty), "--out", str(tmp_path / "x")])
        assert res.exit_code == 2


class TestEval:
    def test_report_validates_and_prints_table(self, runner, scene_dir, tmp_path):
        out = tmp_path / "out"
        assert runner.invoke(main, run_args(scene_dir, out)).exit_code == 0
        report_path = tmp_path / "report.json"
        res = runner.invoke(main, [
            "eval", "--gaussians", str(out / "gaussians.ply"),
            "--targets", str(scene_dir), "--out", str(report_path),
        ])
        assert res.exit_code == 0, res.output
        assert "psnr" in res.output and "PGS" in res.output
        report = json.loads(report_path.read_text())
        assert report["schema_version"] == 1
        assert len(report["per_view"]) == 3
        import jsonschema

        jsonschema.validate(report, report_schema())

    def test_missing_ply_exits_2(self, runner, scene_dir, tmp_path):
        res = runner.invoke(main, [
            "eval", "--gaussians", str(tmp_path / "nope.ply"),
            "--targets", str(scene_dir), "--out", str(tmp_path / "r.json"),
        ])
        assert res.exit_code == 2

    def test_corrupt_ply_exits_2(self, runner, scene_dir, tmp_path):
        bad = tmp_path / "bad.ply"
        bad.write_bytes(b"garbage")
        res = runner.invoke(main, [
            "eval", "--gaussians", str(bad),
            "--targets", str(scene_dir), "--out", str(tmp_path / "r.json"),
        ])
        assert res.exit_code == 2


class TestSceneIO:
    def test_depth_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        depth = rng.uniform(0.5, 5.0, (7, 9))
        mask = rng.uniform(size=(7, 9)) > 0.3
        path = tmp_path / "d.depth"
        write_depth(path, depth, mask)
        d, m = read_depth(path)
        np.testing.assert_array_equal(d, depth.astype(np.float32).astype(float))
        np.testing.assert_array_equal(m, mask)

    def test_scene_roundtrip_preserves_cameras(self, tmp_path):
        spec = SceneSpec.from_json(wall_spec_dict(size=16, n_cams=2))
        views, _ = synthesize(spec)
        d = tmp_path / "s"
        save_scene(views, d)
        back = load_scene(d)
        assert len(back) == 2
        for a, b in zip(views, back):
            assert a.intrinsics == b.intrinsics
            np.testing.assert_array_equal(a.extrinsics.R, b.extrinsics.R)
            # images survive 8-bit quantization within half a step
            assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-12
