"""End-to-end forward pass: images -> features -> depth -> voxels ->
refinement -> Gaussians, plus evaluation against held-out views."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError, StageError
from .features import (
    FeatureExtractorSpec,
    FeatureMap,
    build_cost_volume,
    extract_features,
    regress_depth,
    sample_depth_hypotheses,
    upsample_depth,
)
from .gaussians import (
    GaussianSet,
    RawGaussianParams,
    activate_set,
    decode_raw,
    param_length,
    random_head_weights,
)
from .geometry import CameraView, DepthMap
from .renderer import compute_image_metrics, render
from .sparse_unet import (
    SparseTensor,
    UNetSpec,
    load_weights,
    random_weights,
    residual_refine,
    unet_forward,
)
from .voxels import lift_views, voxelize


@dataclass
class FeatureConfig:
    kind: str = "gradient-descriptor"
    channels: int = 12
    scale: int = 1
    seed: int = 0
    path: str = ""


@dataclass
class DepthConfig:
    num_hypotheses: int = 32
    spacing: str = "inverse"
    temperature: float = 0.05
    near: float = 0.5
    far: float = 10.0
    use_gt: bool = False


@dataclass
class VoxelConfig:
    size: float = 0.1


@dataclass
class UNetConfig:
    enabled: bool = True
    levels: Tuple[int, ...] = ()
    blocks: int = 2
    weights_path: str = ""
    seed: int = 0


@dataclass
class HeadConfig:
    kind: str = "linear"  # linear | color-copy
    sh_degree: int = 0
    offset_radius_multiplier: float = 3.0
    symmetric_offset: bool = False
    weights_path: str = ""
    seed: int = 0


@dataclass
class LossConfig:
    lam: float = 0.05
    perceptual: bool = False


@dataclass
class RenderConfig:
    tile: int = 16
    bg: Tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class PipelineConfig:
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    depth: DepthConfig = field(default_factory=DepthConfig)
    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    @staticmethod
    def from_json(path_or_dict) -> "PipelineConfig":
        if isinstance(path_or_dict, dict):
            d = path_or_dict
        else:
            with open(path_or_dict) as f:
                d = json.load(f)
        cfg = PipelineConfig()
        sections = {
            "feature": cfg.feature, "depth": cfg.depth, "voxel": cfg.voxel,
            "unet": cfg.unet, "head": cfg.head, "loss": cfg.loss, "render": cfg.render,
        }
        renames = {"lambda": "lam"}
        for sec_name, sec_val in d.items():
            if sec_name not in sections:
                raise InvalidInputError(f"unknown config section {sec_name!r}")
            target = sections[sec_name]
            for key, value in sec_val.items():
                attr = renames.get(key, key)
                if not hasattr(target, attr):
                    raise InvalidInputError(f"unknown config key {sec_name}.{key}")
                if isinstance(value, list):
                    value = tuple(value)
                setattr(target, attr, value)
        return cfg

    def apply_override(self, dotted_key: str, value: str) -> None:
        """Set `section.key` from its string form (CLI overrides)."""
        try:
            sec_name, key = dotted_key.split(".", 1)
        except ValueError:
            raise InvalidInputError(f"override key must be section.key, got {dotted_key!r}")
        section = getattr(self, sec_name, None)
        key = {"lambda": "lam"}.get(key, key)
        if section is None or not hasattr(section, key):
            raise InvalidInputError(f"unknown config key {dotted_key!r}")
        current = getattr(section, key)
        if isinstance(current, bool):
            parsed = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(current, int):
            parsed = int(value)
        elif isinstance(current, float):
            parsed = float(value)
        elif isinstance(current, tuple):
            parsed = tuple(json.loads(value))
        else:
            parsed = value
        setattr(section, key, parsed)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - every stage error gets tagged
        raise StageError(name, e) from e


def _estimate_depths(
    views: Sequence[CameraView],
    fmaps: Sequence[FeatureMap],
    cfg: PipelineConfig,
) -> List[DepthMap]:
    hyp = sample_depth_hypotheses(cfg.depth.near, cfg.depth.far,
                                  cfg.depth.num_hypotheses, cfg.depth.spacing)
    s = cfg.feature.scale
    cams = [(v.intrinsics.scaled(s), v.extrinsics) for v in views]
    depths = []
    for i, view in enumerate(views):
        neighbors = [(fmaps[j], cams[j]) for j in range(len(views)) if j != i]
        cv = build_cost_volume(fmaps[i], neighbors, cams[i], hyp)
        d = regress_depth(cv, cfg.depth.temperature)
        h, w = view.image.shape[:2]
        depths.append(upsample_depth(d, (h, w)) if s > 1 else d)
    return depths


def _color_copy_raw(grid_feats: np.ndarray, cfg: HeadConfig) -> np.ndarray:
    """Raw params whose activation yields a voxel-centered opaque splat
    colored by the first three feature channels (taken as RGB)."""
    from .gaussians import SH_C0

    if grid_feats.shape[1] < 3:
        raise InvalidInputError("color-copy head needs >= 3 feature channels")
    n = grid_feats.shape[0]
    p = param_length(cfg.sh_degree)
    raw = np.zeros((n, p))
    raw[:, 0:3] = -40.0  # sigmoid -> 0: center stays at the voxel center
    raw[:, 3] = 8.0  # opacity ~ 0.99966
    raw[:, 4:7] = np.log(0.7)  # scale = 0.7 * voxel size
    raw[:, 7] = 1.0  # identity quaternion
    # feature channels 0..2 hold colors centered at 0.5
    raw[:, 11:14] = np.clip(grid_feats[:, 0:3], -0.5, 0.5) / SH_C0
    return raw


def run_pipeline(views: Sequence[CameraView], config: PipelineConfig):
    """Full forward pass; returns (GaussianSet, diagnostics dict)."""
    has_gt = all(v.gt_depth is not None for v in views)
    use_gt = config.depth.use_gt and has_gt
    if len(views) < (1 if use_gt else 2):
        raise InvalidInputError("need >= 2 views (>= 1 with ground-truth depth)")
    k0 = views[0].intrinsics
    if any(v.intrinsics != k0 for v in views):
        raise InvalidInputError("all views must share intrinsics")

    diagnostics: dict = {"stages": {}}
    t0 = time.perf_counter()

    def tick(name):
        nonlocal t0
        t1 = time.perf_counter()
        diagnostics["stages"][name] = t1 - t0
        t0 = t1

    fspec = FeatureExtractorSpec(
        kind=config.feature.kind, channels=config.feature.channels,
        scale=config.feature.scale, seed=config.feature.seed,
        path=config.feature.path,
    )
    fmaps = _stage("features", lambda: [extract_features(v, fspec) for v in views])
    tick("features")

    if use_gt:
        depths = [
            DepthMap(values=np.where(v.gt_depth_mask, v.gt_depth, 1.0)
                     if v.gt_depth_mask is not None else v.gt_depth,
                     valid_mask=(v.gt_depth_mask if v.gt_depth_mask is not None
                                 else np.ones(v.gt_depth.shape, bool)))
            for v in views
        ]
    else:
        depths = _stage("depth", _estimate_depths, views, fmaps, config)
    tick("depth")

    cloud = _stage("lift", lift_views, views, fmaps, depths)
    tick("lift")
    grid = _stage("voxelize", voxelize, cloud, config.voxel.size)
    tick("voxelize")

    v_tensor = SparseTensor(coords=grid.keys.copy(), feats=grid.features.copy(), stride=1)
    if config.unet.enabled:
        def refine():
            spec = UNetSpec(levels=tuple(config.unet.levels), blocks_per_level=config.unet.blocks)
            if config.unet.weights_path:
                weights = load_weights(config.unet.weights_path)
            else:
                weights = random_weights(spec, v_tensor.feats.shape[1], config.unet.seed)
            r = unet_forward(v_tensor, spec, weights)
            return residual_refine(v_tensor, r)

        refined = _stage("refine", refine)
    else:
        refined = v_tensor
    tick("refine")

    def decode():
        if config.head.kind == "color-copy":
            raw = RawGaussianParams(_color_copy_raw(refined.feats, config.head),
                                    config.head.sh_degree)
        elif config.head.kind == "linear":
            if config.head.weights_path:
                head_w = load_weights(config.head.weights_path)
            else:
                head_w = random_head_weights(refined.feats.shape[1],
                                             config.head.sh_degree, config.head.seed)
            raw = decode_raw(refined, head_w, config.head.sh_degree)
        else:
            raise InvalidInputError(f"unknown head kind {config.head.kind!r}")
        radius = config.head.offset_radius_multiplier * config.voxel.size
        return activate_set(raw, grid.keys, config.voxel.size, radius,
                            config.head.symmetric_offset)

    gset = _stage("decode", decode)
    tick("decode")

    n = len(views)
    diagnostics.update(
        {
            "num_views": n,
            "point_count": len(cloud),
            "occupied_voxels": len(grid),
            "gaussian_count": len(gset),
            "pgs": len(gset) / n,
            "voxel_size": config.voxel.size,
            "unet_enabled": bool(config.unet.enabled),
        }
    )
    return gset, diagnostics


def evaluate(
    gset: GaussianSet,
    targets: Sequence[CameraView],
    config: Optional[PipelineConfig] = None,
    threads: int = 1,
) -> dict:
    """Render each target camera and report PSNR/SSIM/MSE per view + means."""
    if len(targets) == 0:
        raise InvalidInputError("need at least one target view")
    config = config or PipelineConfig()
    per_view = []
    for v in targets:
        out = render(gset, v.intrinsics, v.extrinsics, bg=config.render.bg, threads=threads)
        per_view.append(compute_image_metrics(out.rgb, np.asarray(v.image, float)))
    mean = {k: float(np.mean([m[k] for m in per_view])) for k in ("mse", "psnr", "ssim")}
    return {
        "per_view": per_view,
        "mean": mean,
        "pgs": len(gset) / max(1, len(targets)),
        "gaussian_count": len(gset),
    }
