"""Per-view feature maps, plane-sweep cost volumes and depth regression.

The learned 2D backbone is replaced by deterministic extractors selected
through FeatureExtractorSpec; everything downstream only assumes a per-view
feature grid at 1/s resolution.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import FormatError, InvalidInputError
from .geometry import CameraView, DepthMap, Intrinsics, bilinear_sample, warp_feature

_ALLOWED_SCALES = (1, 2, 4, 8)
FEATURE_MAGIC = b"VSFM"


@dataclass
class FeatureMap:
    data: np.ndarray  # (H/s) x (W/s) x C
    scale_factor: int
    channels: int

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != self.channels:
            raise InvalidInputError("feature data must be (H/s, W/s, C)")
        if self.scale_factor < 1:
            raise InvalidInputError("scale factor must be positive")


@dataclass
class CostVolume:
    scores: np.ndarray  # (H/s) x (W/s) x D
    depth_hypotheses: np.ndarray  # strictly increasing, length D

    def __post_init__(self):
        d = np.asarray(self.depth_hypotheses, dtype=float)
        if d.size < 2 or np.any(np.diff(d) <= 0):
            raise InvalidInputError("need >= 2 strictly increasing depth hypotheses")
        if self.scores.shape[-1] != d.size:
            raise InvalidInputError("score depth axis does not match hypotheses")
        if not np.all(np.isfinite(self.scores)):
            raise InvalidInputError("scores must be finite")
        self.depth_hypotheses = d


@dataclass(frozen=True)
class FeatureExtractorSpec:
    kind: str = "gradient-descriptor"  # | random-projection | external-file
    channels: int = 32
    scale: int = 4
    seed: int = 0
    path: str = ""  # only for external-file

    def __post_init__(self):
        if self.kind not in ("gradient-descriptor", "random-projection", "external-file"):
            raise InvalidInputError(f"unknown extractor kind {self.kind!r}")
        if self.channels < 1:
            raise InvalidInputError("channels must be >= 1")
        if self.scale not in _ALLOWED_SCALES:
            raise InvalidInputError(f"scale must be one of {_ALLOWED_SCALES}")


def _luma(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def _block_mean(a: np.ndarray, s: int) -> np.ndarray:
    h, w = a.shape[:2]
    return a.reshape(h // s, s, w // s, s, *a.shape[2:]).mean(axis=(1, 3))


def _gradient_descriptor(img: np.ndarray, spec: FeatureExtractorSpec) -> np.ndarray:
    # Forward differences so a period-2 pattern still registers edges;
    # the trailing row/column is replicated (zero gradient there).
    y = _luma(img)
    gx = np.zeros_like(y)
    gy = np.zeros_like(y)
    gx[:, :-1] = y[:, 1:] - y[:, :-1]
    gy[:-1, :] = y[1:, :] - y[:-1, :]
    # RGB first so downstream color-copy decoding can read channels 0..2.
    # Color and luma are centered at 0.5: zero-mean descriptors make the
    # plane-sweep dot product behave like a correlation, so misaligned
    # warps score near zero instead of rewarding bright regions.
    base = np.stack([img[..., 0] - 0.5, img[..., 1] - 0.5, img[..., 2] - 0.5,
                     y - 0.5, gx, gy], axis=-1)
    reps = -(-spec.channels // base.shape[-1])
    feat = np.tile(base, (1, 1, reps))[..., : spec.channels]
    return _block_mean(feat, spec.scale)


def _random_projection(img: np.ndarray, spec: FeatureExtractorSpec) -> np.ndarray:
    s = spec.scale
    h, w = img.shape[:2]
    patches = (
        img.reshape(h // s, s, w // s, s, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(h // s, w // s, s * s * 3)
    )
    rng = np.random.default_rng(spec.seed)
    proj = rng.standard_normal((s * s * 3, spec.channels)) / np.sqrt(s * s * 3)
    return patches @ proj


def read_feature_file(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16 or header[:4] != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad feature-file header")
        h, w, c = struct.unpack("<III", header[4:])
        data = np.fromfile(f, dtype="<f4")
    if data.size != h * w * c:
        raise FormatError(f"{path}: payload size does not match header {h}x{w}x{c}")
    return data.reshape(h, w, c).astype(float)


def write_feature_file(path, data: np.ndarray) -> None:
    h, w, c = data.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<III", h, w, c))
        data.astype("<f4").tofile(f)


def extract_features(view: CameraView, spec: FeatureExtractorSpec) -> FeatureMap:
    """Turn a view into its deterministic (H/s, W/s, C) feature grid."""
    img = np.asarray(view.image, dtype=float)
    h, w = img.shape[:2]
    if h % spec.scale or w % spec.scale:
        raise InvalidInputError("image size must be divisible by the feature scale")
    if spec.kind == "gradient-descriptor":
        data = _gradient_descriptor(img, spec)
    elif spec.kind == "random-projection":
        data = _random_projection(img, spec)
    else:
        data = read_feature_file(spec.path)
        if data.shape != (h // spec.scale, w // spec.scale, spec.channels):
            raise FormatError(
                f"external feature file shape {data.shape} does not match "
                f"({h // spec.scale}, {w // spec.scale}, {spec.channels})"
            )
    return FeatureMap(data=data, scale_factor=spec.scale, channels=spec.channels)


def sample_depth_hypotheses(near: float, far: float, count: int, spacing: str = "inverse"):
    """D candidate depths between near and far, endpoints included exactly."""
    if not 0 < near < far:
        raise InvalidInputError(f"need 0 < near < far, got ({near}, {far})")
    if count < 2:
        raise InvalidInputError("need at least 2 hypotheses")
    if spacing == "linear":
        d = np.linspace(near, far, count)
    elif spacing == "inverse":
        d = 1.0 / np.linspace(1.0 / near, 1.0 / far, count)
        d[0], d[-1] = near, far
    else:
        raise InvalidInputError(f"unknown spacing {spacing!r}")
    return d


def build_cost_volume(
    ref: FeatureMap,
    neighbors: Sequence[Tuple[FeatureMap, tuple]],
    ref_cam: tuple,
    hypotheses,
) -> CostVolume:
    """Plane-sweep dot-product matching volume for one reference view.

    Cameras are (Intrinsics, Extrinsics) at feature resolution. Scores are
    channel-normalized means over the neighbors with valid warps.
    """
    if len(neighbors) == 0:
        raise InvalidInputError("need at least one neighbor view")
    hyp = np.asarray(hypotheses, dtype=float)
    h, w, c = ref.data.shape
    scores = np.zeros((h, w, hyp.size))
    for m, depth in enumerate(hyp):
        acc = np.zeros((h, w))
        n_valid = np.zeros((h, w))
        for nb_feat, nb_cam in neighbors:
            if nb_feat.data.shape != ref.data.shape:
                raise InvalidInputError("all feature maps must share shape")
            warped, valid = warp_feature(nb_feat.data, nb_cam, ref_cam, depth)
            dot = np.einsum("hwc,hwc->hw", ref.data, warped) / c
            acc += np.where(valid, dot, 0.0)
            n_valid += valid
        scores[:, :, m] = np.divide(acc, n_valid, out=np.zeros_like(acc), where=n_valid > 0)
    return CostVolume(scores=scores, depth_hypotheses=hyp)


def regress_depth(cv: CostVolume, temperature: float = 0.05) -> DepthMap:
    """Softargmax over the depth axis of a cost volume."""
    if temperature <= 0:
        raise InvalidInputError("temperature must be positive")
    s = cv.scores / temperature
    s = s - s.max(axis=-1, keepdims=True)
    w = np.exp(s)
    w /= w.sum(axis=-1, keepdims=True)
    depth = w @ cv.depth_hypotheses
    return DepthMap(values=depth)


def _upsample_coords(n_dst: int, ratio: int) -> np.ndarray:
    # Pixel-center mapping; endpoints extrapolate by edge clamping.
    return (np.arange(n_dst) + 0.5) / ratio - 0.5


def bilinear_upsample(src: np.ndarray, target: tuple) -> np.ndarray:
    """Upsample an H x W (or H x W x C) array by an integer factor."""
    h, w = src.shape[:2]
    th, tw = target
    if th % h or tw % w or th // h != tw // w:
        raise InvalidInputError(f"target {target} is not an integer multiple of {(h, w)}")
    ratio = th // h
    if ratio == 1:
        return src.copy()
    xs = np.clip(_upsample_coords(tw, ratio), 0, w - 1)
    ys = np.clip(_upsample_coords(th, ratio), 0, h - 1)
    u, v = np.meshgrid(xs, ys)
    if src.ndim == 2:
        out, _ = bilinear_sample(src[..., None], u, v)
        return out[..., 0]
    out, _ = bilinear_sample(src, u, v)
    return out


def upsample_depth(d: DepthMap, target: tuple) -> DepthMap:
    """Bilinear depth upsampling with conservative validity propagation."""
    values = bilinear_upsample(d.values, target)
    # A target pixel stays valid only if every contributing source pixel is.
    inv = bilinear_upsample((~d.valid_mask).astype(float), target)
    mask = inv == 0.0
    values = np.where(mask, values, 1.0)  # placeholder on invalid cells
    return DepthMap(values=values, valid_mask=mask)
