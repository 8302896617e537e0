"""Per-voxel Gaussian decoding, activation transforms and PLY export.

GaussianSet stores the same float32 payload the PLY format does (centers,
pre-activation opacity, log scales, quaternions, SH), so export/import is a
verbatim roundtrip; activated opacity/scale are derived properties.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import FormatError, InvalidInputError, WeightLoadError
from .sparse_unet import SparseTensor, WeightBlob
from .voxels import voxel_center

SH_C0 = 0.28209479177387814

_LOG_SCALE_MIN = -10.0
_LOG_SCALE_MAX = 3.0


def param_length(sh_degree: int) -> int:
    """offset(3) + opacity(1) + log-scale(3) + quaternion(4) + SH."""
    return 11 + 3 * (sh_degree + 1) ** 2


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class RawGaussianParams:
    """Pre-activation per-voxel parameter vectors, (V, 11 + 3(L+1)^2)."""

    values: np.ndarray
    sh_degree: int = 0

    def __post_init__(self):
        expect = param_length(self.sh_degree)
        if self.values.ndim != 2 or self.values.shape[1] != expect:
            raise InvalidInputError(
                f"raw params must be (V, {expect}) for SH degree {self.sh_degree}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("raw params must be finite")

    @property
    def offset(self):
        return self.values[:, 0:3]

    @property
    def opacity(self):
        return self.values[:, 3]

    @property
    def log_scale(self):
        return self.values[:, 4:7]

    @property
    def quaternion(self):
        return self.values[:, 7:11]

    @property
    def sh(self):
        return self.values[:, 11:]


@dataclass
class Gaussian3D:
    center: np.ndarray
    opacity: float
    scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    sh: np.ndarray

    def covariance(self) -> np.ndarray:
        R = quat_to_rotmat(self.rotation[None])[0]
        return R @ np.diag(self.scale**2) @ R.T


@dataclass
class GaussianSet:
    centers: np.ndarray  # N x 3 f32
    opacity_logits: np.ndarray  # N f32
    log_scales: np.ndarray  # N x 3 f32, log of world-unit scale
    rotations: np.ndarray  # N x 4 f32, unit quaternions
    sh: np.ndarray  # N x (3 (L+1)^2) f32
    sh_degree: int = 0
    voxel_keys: Optional[np.ndarray] = None  # provenance, N x 3

    def __post_init__(self):
        n = self.centers.shape[0]
        for name in ("centers", "opacity_logits", "log_scales", "rotations", "sh"):
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if arr.shape[0] != n:
                raise InvalidInputError(f"{name} length mismatch")
            setattr(self, name, arr)
        if self.sh.shape[1] != 3 * (self.sh_degree + 1) ** 2:
            raise InvalidInputError("SH coefficient count does not match degree")

    def __len__(self):
        return self.centers.shape[0]

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(float))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(N, 4) unit quaternions (w, x, y, z) -> (N, 3, 3) rotations."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def decode_raw(grid: SparseTensor, head_weights: WeightBlob, sh_degree: int = 0) -> RawGaussianParams:
    """1x1x1 linear head mapping voxel features to raw Gaussian parameters."""
    w = head_weights["head.weight"]
    b = head_weights["head.bias"]
    expect = param_length(sh_degree)
    if w.shape != (grid.feats.shape[1], expect) or b.shape != (expect,):
        raise WeightLoadError(
            f"head weights {w.shape}/{b.shape} do not match C={grid.feats.shape[1]}, P={expect}"
        )
    return RawGaussianParams(values=grid.feats @ w + b, sh_degree=sh_degree)


def random_head_weights(channels: int, sh_degree: int = 0, seed: int = 0) -> WeightBlob:
    rng = np.random.default_rng(seed)
    p = param_length(sh_degree)
    bound = np.sqrt(6.0 / channels)
    blob = WeightBlob()
    blob.tensors["head.weight"] = rng.uniform(-bound, bound, size=(channels, p))
    blob.tensors["head.bias"] = np.zeros(p)
    return blob


def _normalized_quats(q: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=1)
    out = np.zeros_like(q)
    out[:, 0] = 1.0  # zero quaternion maps to identity
    nz = norm > 0
    out[nz] = q[nz] / norm[nz, None]
    return out


def activate_set(
    raw: RawGaussianParams,
    keys: np.ndarray,
    voxel_size: float,
    offset_radius: float,
    symmetric_offset: bool = False,
) -> GaussianSet:
    """Apply the activation transforms to every voxel's raw parameters."""
    if offset_radius <= 0:
        raise InvalidInputError("offset radius must be positive")
    if raw.values.shape[0] != keys.shape[0]:
        raise InvalidInputError("raw params / keys length mismatch")
    centers = voxel_center(keys, voxel_size)
    s = sigmoid(raw.offset)
    if symmetric_offset:
        centers = centers + offset_radius * (s - 0.5)
    else:
        centers = centers + offset_radius * s
    log_scales = np.clip(raw.log_scale, _LOG_SCALE_MIN, _LOG_SCALE_MAX) + np.log(voxel_size)
    return GaussianSet(
        centers=centers,
        opacity_logits=raw.opacity,
        log_scales=log_scales,
        rotations=_normalized_quats(raw.quaternion),
        sh=raw.sh,
        sh_degree=raw.sh_degree,
        voxel_keys=keys.copy(),
    )


def activate(
    raw_vector: np.ndarray,
    key,
    voxel_size: float,
    offset_radius: float,
    sh_degree: int = 0,
    symmetric_offset: bool = False,
) -> Gaussian3D:
    """Single-voxel form of activate_set."""
    raw = RawGaussianParams(np.asarray(raw_vector, float)[None, :], sh_degree)
    gs = activate_set(raw, np.asarray(key, np.int64)[None, :], voxel_size,
                      offset_radius, symmetric_offset)
    return Gaussian3D(
        center=gs.centers[0].astype(float),
        opacity=float(gs.opacities[0]),
        scale=gs.scales[0],
        rotation=gs.rotations[0].astype(float),
        sh=gs.sh[0].astype(float),
    )


# --- PLY export / import (3DGS field layout) ---------------------------------

def _ply_property_names(sh_degree: int):
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    n_rest = 3 * ((sh_degree + 1) ** 2 - 1)
    names += [f"f_rest_{i}" for i in range(n_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def export_ply(gset: GaussianSet, path) -> None:
    if len(gset) == 0:
        raise InvalidInputError("refusing to export an empty Gaussian set")
    names = _ply_property_names(gset.sh_degree)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(gset)}"]
    header += [f"property float {n}" for n in names]
    header.append("end_header")
    n_coeff = (gset.sh_degree + 1) ** 2
    dc = gset.sh[:, :3]
    rest = gset.sh[:, 3:]
    payload = np.concatenate(
        [gset.centers, dc, rest, gset.opacity_logits[:, None], gset.log_scales, gset.rotations],
        axis=1,
    ).astype("<f4")
    assert payload.shape[1] == len(names)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(payload.tobytes())


def import_ply(path) -> GaussianSet:
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    names = []
    count = 0
    for line in header:
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
        elif line.startswith("property float"):
            names.append(line.split()[-1])
        elif line.startswith("property"):
            raise FormatError(f"{path}: unsupported property type in {line!r}")
    n_rest = sum(1 for n in names if n.startswith("f_rest_"))
    sh_degree = int(round(np.sqrt(n_rest / 3 + 1))) - 1
    if names != _ply_property_names(sh_degree):
        raise FormatError(f"{path}: unexpected property layout")
    data = np.frombuffer(raw, dtype="<f4", count=count * len(names), offset=end + len(b"end_header\n"))
    data = data.reshape(count, len(names))
    dc = data[:, 3:6]
    rest = data[:, 6 : 6 + n_rest]
    off = 6 + n_rest
    return GaussianSet(
        centers=data[:, 0:3],
        opacity_logits=data[:, off],
        log_scales=data[:, off + 1 : off + 4],
        rotations=data[:, off + 4 : off + 8],
        sh=np.concatenate([dc, rest], axis=1),
        sh_degree=sh_degree,
    )


def summarize(gset: GaussianSet) -> dict:
    """JSON-ready summary: count, bbox, opacity histogram deciles."""
    ops = gset.opacities
    return {
        "count": len(gset),
        "bbox": {
            "min": [float(v) for v in gset.centers.min(axis=0)],
            "max": [float(v) for v in gset.centers.max(axis=0)],
        },
        "opacity_deciles": [float(np.quantile(ops, q / 10)) for q in range(11)],
    }


def write_summary(gset: GaussianSet, path) -> None:
    with open(path, "w") as f:
        json.dump(summarize(gset), f, indent=2)
