"""Lifting pixels to world points and average-pooled sparse voxelization."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import FormatError, InvalidInputError
from .features import FeatureMap, bilinear_upsample
from .geometry import CameraView, DepthMap, unproject_pixel

GRID_MAGIC = b"VSVG"


@dataclass
class FeaturedPointCloud:
    positions: np.ndarray  # M x 3
    features: np.ndarray  # M x C
    source_view: np.ndarray  # M

    def __post_init__(self):
        m = self.positions.shape[0]
        if self.features.shape[0] != m or self.source_view.shape[0] != m:
            raise InvalidInputError("point cloud arrays disagree on length")
        if not np.all(np.isfinite(self.positions)):
            raise InvalidInputError("positions must be finite")

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class SparseVoxelGrid:
    voxel_size: float
    keys: np.ndarray  # V x 3 int64, sorted lexicographically
    features: np.ndarray  # V x C
    counts: np.ndarray  # V

    def __post_init__(self):
        if np.any(self.counts < 1):
            raise InvalidInputError("every voxel needs count >= 1")
        if not np.all(np.isfinite(self.features)):
            raise InvalidInputError("voxel features must be finite")

    def __len__(self):
        return self.keys.shape[0]


def voxel_index(p: np.ndarray, voxel_size: float) -> np.ndarray:
    """Nearest-integer voxel key of world point(s), (..., 3) -> int64.

    Rounding is half-away-from-zero. Quotients within a few ulps of an
    exact half-integer are snapped to it first so that tie handling does
    not depend on division rounding (e.g. 0.15/0.1 evaluating below 1.5).
    """
    if voxel_size <= 0:
        raise InvalidInputError("voxel size must be positive")
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("points must be finite")
    q = p / voxel_size
    doubled = 2.0 * q
    nearest = np.rint(doubled)
    snap = np.abs(doubled - nearest) <= 8 * np.finfo(float).eps * np.maximum(1.0, np.abs(doubled))
    q = np.where(snap, nearest / 2.0, q)
    return np.copysign(np.floor(np.abs(q) + 0.5), q).astype(np.int64)


def voxel_center(key, voxel_size: float) -> np.ndarray:
    """World position whose voxel_index is exactly `key`."""
    if voxel_size <= 0:
        raise InvalidInputError("voxel size must be positive")
    return np.asarray(key, dtype=float) * voxel_size


def lift_views(
    views: Sequence[CameraView],
    features: Sequence[FeatureMap],
    depths: Sequence[DepthMap],
) -> FeaturedPointCloud:
    """Unproject every valid pixel of every view, carrying its feature.

    Feature maps below full resolution are bilinearly upsampled so each
    pixel owns a feature vector.
    """
    if not (len(views) == len(features) == len(depths)):
        raise InvalidInputError("views/features/depths lists must align")
    pos_chunks: List[np.ndarray] = []
    feat_chunks: List[np.ndarray] = []
    src_chunks: List[np.ndarray] = []
    for idx, (view, fmap, depth) in enumerate(zip(views, features, depths)):
        h, w = view.image.shape[:2]
        if depth.values.shape != (h, w):
            raise InvalidInputError("depth map must be at full image resolution")
        feat = fmap.data
        if feat.shape[:2] != (h, w):
            feat = bilinear_upsample(feat, (h, w))
        mask = depth.valid_mask
        vs, us = np.nonzero(mask)
        if vs.size == 0:
            continue
        pts = unproject_pixel(
            us.astype(float), vs.astype(float), depth.values[vs, us],
            view.intrinsics, view.extrinsics,
        )
        pos_chunks.append(pts)
        feat_chunks.append(feat[vs, us])
        src_chunks.append(np.full(vs.size, idx, dtype=np.int64))
    if not pos_chunks:
        c = features[0].channels if features else 0
        return FeaturedPointCloud(np.zeros((0, 3)), np.zeros((0, c)), np.zeros(0, np.int64))
    return FeaturedPointCloud(
        positions=np.concatenate(pos_chunks),
        features=np.concatenate(feat_chunks),
        source_view=np.concatenate(src_chunks),
    )


def voxelize(cloud: FeaturedPointCloud, voxel_size: float) -> SparseVoxelGrid:
    """Average-pool point features into their voxels.

    Points are canonically ordered by (key, source_view, position,
    feature bytes) before accumulation, so the result is bit-identical
    regardless of input order or sharding.
    """
    if voxel_size <= 0:
        raise InvalidInputError("voxel size must be positive")
    m = len(cloud)
    c = cloud.features.shape[1] if cloud.features.ndim == 2 else 0
    if m == 0:
        return SparseVoxelGrid(voxel_size, np.zeros((0, 3), np.int64), np.zeros((0, c)), np.zeros(0, np.int64))
    keys = voxel_index(cloud.positions, voxel_size)
    minor = [np.ascontiguousarray(cloud.features[:, j]) for j in range(c - 1, -1, -1)]
    minor += [cloud.positions[:, 2], cloud.positions[:, 1], cloud.positions[:, 0]]
    order = np.lexsort(tuple(minor) + (cloud.source_view, keys[:, 2], keys[:, 1], keys[:, 0]))
    keys = keys[order]
    feats = cloud.features[order]
    new_group = np.empty(m, dtype=bool)
    new_group[0] = True
    new_group[1:] = np.any(keys[1:] != keys[:-1], axis=1)
    starts = np.nonzero(new_group)[0]
    counts = np.diff(np.append(starts, m))
    sums = np.add.reduceat(feats, starts, axis=0)
    return SparseVoxelGrid(
        voxel_size=voxel_size,
        keys=keys[starts],
        features=sums / counts[:, None],
        counts=counts.astype(np.int64),
    )


def write_grid(path, grid: SparseVoxelGrid) -> None:
    c = grid.features.shape[1]
    with open(path, "wb") as f:
        f.write(GRID_MAGIC + struct.pack("<fIQ", grid.voxel_size, c, len(grid)))
        for i in range(len(grid)):
            f.write(struct.pack("<iiiI", *grid.keys[i], int(grid.counts[i])))
            grid.features[i].astype("<f4").tofile(f)


def read_grid(path) -> SparseVoxelGrid:
    with open(path, "rb") as f:
        header = f.read(20)
        if len(header) != 20 or header[:4] != GRID_MAGIC:
            raise FormatError(f"{path}: bad grid header")
        v_s, c, n = struct.unpack("<fIQ", header[4:])
        keys = np.zeros((n, 3), np.int64)
        counts = np.zeros(n, np.int64)
        feats = np.zeros((n, c))
        for i in range(n):
            rec = f.read(16)
            if len(rec) != 16:
                raise FormatError(f"{path}: truncated grid entry {i}")
            ki, kj, kk, cnt = struct.unpack("<iiiI", rec)
            keys[i] = (ki, kj, kk)
            counts[i] = cnt
            data = np.fromfile(f, dtype="<f4", count=c)
            if data.size != c:
                raise FormatError(f"{path}: truncated grid features at {i}")
            feats[i] = data
    return SparseVoxelGrid(voxel_size=float(v_s), keys=keys, features=feats, counts=counts)
