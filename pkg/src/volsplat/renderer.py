"""Deterministic CPU tile-based splatting rasterizer plus image metrics.

EWA projection: each 3D Gaussian is mapped to a 2D Gaussian through the
local projection Jacobian, then alpha-composited front to back in 16x16
tiles. Tiles are independent, so the worker count never changes output.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import correlate

from ._kernels import ALPHA_MAX, T_CUTOFF, composite_tile
from .errors import InvalidInputError
from .gaussians import GaussianSet, quat_to_rotmat
from .geometry import Extrinsics, Intrinsics

TILE = 16
NEAR_PLANE = 0.01
COV2D_DILATION = 0.3
PSNR_CAP = 99.0

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


@dataclass
class ProjectedSplat:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    radius: float


@dataclass
class RenderedImage:
    rgb: np.ndarray  # H x W x 3 in [0, 1]
    alpha: np.ndarray  # H x W accumulated opacity


def eval_sh(sh: np.ndarray, degree: int, dirs: np.ndarray) -> np.ndarray:
    """View-dependent RGB from SH coefficients, clipped to [0, 1].

    sh is (N, 3 (L+1)^2) laid out channel-fastest per coefficient;
    dirs are unit view directions (N, 3).
    """
    coeff = sh.reshape(sh.shape[0], -1, 3).astype(float)
    c = 0.5 + SH_C0 * coeff[:, 0]
    if degree >= 1:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        c = c - SH_C1 * y * coeff[:, 1] + SH_C1 * z * coeff[:, 2] - SH_C1 * x * coeff[:, 3]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        c = (c + SH_C2[0] * xy * coeff[:, 4] + SH_C2[1] * yz * coeff[:, 5]
             + SH_C2[2] * (2 * zz - xx - yy) * coeff[:, 6]
             + SH_C2[3] * xz * coeff[:, 7] + SH_C2[4] * (xx - yy) * coeff[:, 8])
    if degree >= 3:
        c = (c + SH_C3[0] * y * (3 * xx - yy) * coeff[:, 9]
             + SH_C3[1] * xy * z * coeff[:, 10]
             + SH_C3[2] * y * (4 * zz - xx - yy) * coeff[:, 11]
             + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * coeff[:, 12]
             + SH_C3[4] * x * (4 * zz - xx - yy) * coeff[:, 13]
             + SH_C3[5] * z * (xx - yy) * coeff[:, 14]
             + SH_C3[6] * x * (xx - 3 * yy) * coeff[:, 15])
    return np.clip(c, 0.0, 1.0)


def _project_all(gset: GaussianSet, K: Intrinsics, E: Extrinsics):
    """Vectorized EWA projection of a whole set; returns per-splat arrays
    plus the surviving-index array (culled splats removed)."""
    n = len(gset)
    centers = gset.centers.astype(float)
    p_cam = E.world_to_cam(centers)
    z = p_cam[:, 2]
    keep = z > NEAR_PLANE
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return (np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
                np.zeros(0), np.zeros(0), idx)
    p_cam = p_cam[idx]
    z = z[idx]
    x, y = p_cam[:, 0], p_cam[:, 1]
    mean2d = np.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], axis=1)

    # J W Sigma W^T J^T with J the 2x3 perspective Jacobian at the mean
    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / (z * z)
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / (z * z)
    W = E.R.T  # world -> camera rotation
    Rq = quat_to_rotmat(gset.rotations[idx].astype(float))
    S = gset.scales[idx]
    M = Rq * S[:, None, :]
    sigma = M @ M.transpose(0, 2, 1)
    JW = J @ W
    cov2d = JW @ sigma @ JW.transpose(0, 2, 1)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    radius = 3.0 * np.sqrt(np.maximum(mid + disc, 0.0))

    cam_pos = E.T
    dirs = centers[idx] - cam_pos
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = np.divide(dirs, norms, out=np.zeros_like(dirs), where=norms > 0)
    colors = eval_sh(gset.sh[idx], gset.sh_degree, dirs)

    # drop splats whose 3-sigma footprint misses the image
    inside = (
        (mean2d[:, 0] + radius >= -0.5) & (mean2d[:, 0] - radius <= K.width - 0.5)
        & (mean2d[:, 1] + radius >= -0.5) & (mean2d[:, 1] - radius <= K.height - 0.5)
    )
    conics = np.stack([c, -b, a], axis=1) / (a * c - b * b)[:, None]
    return (mean2d[inside], conics[inside], z[inside], colors[inside],
            gset.opacities[idx][inside], radius[inside], idx[inside])


def project_gaussian(gset_or_g, K: Intrinsics, E: Extrinsics) -> Optional[ProjectedSplat]:
    """Project a single Gaussian; None when culled."""
    from .gaussians import Gaussian3D

    g = gset_or_g
    if isinstance(g, Gaussian3D):
        logit = np.log(g.opacity / (1 - g.opacity))
        gset = GaussianSet(
            centers=g.center[None], opacity_logits=np.array([logit]),
            log_scales=np.log(g.scale)[None], rotations=g.rotation[None],
            sh=g.sh[None], sh_degree=int(round(np.sqrt(g.sh.size / 3))) - 1,
        )
    else:
        gset = g
    mean2d, conics, z, colors, ops, radius, idx = _project_all(gset, K, E)
    if idx.size == 0:
        return None
    ca, cb, cc = conics[0]  # conic [[ca, cb], [cb, cc]]
    det = ca * cc - cb * cb
    cov = np.array([[cc, -cb], [-cb, ca]]) / det
    return ProjectedSplat(mean2d=mean2d[0], cov2d=cov, depth=float(z[0]),
                          color=colors[0], opacity=float(ops[0]), radius=float(radius[0]))


def render(
    gset: GaussianSet,
    K: Intrinsics,
    E: Extrinsics,
    bg=(0.0, 0.0, 0.0),
    threads: int = 1,
) -> RenderedImage:
    """Rasterize a Gaussian set into an RGB + alpha image."""
    h, w = K.height, K.width
    bg = np.asarray(bg, dtype=float)
    rgb = np.zeros((h, w, 3))
    transmit = np.ones((h, w))
    if len(gset) > 0:
        mean2d, conics, z, colors, ops, radius, idx = _project_all(gset, K, E)
        # global front-to-back order with original index as the tiebreak
        order = np.lexsort((idx, z))
        mean2d, conics, colors, ops, radius = (
            mean2d[order], conics[order], colors[order], ops[order], radius[order])
        mean2d = np.ascontiguousarray(mean2d)
        conics = np.ascontiguousarray(conics)
        colors = np.ascontiguousarray(colors)
        ops = np.ascontiguousarray(ops)

        nx = -(-w // TILE)
        ny = -(-h // TILE)
        tx0 = np.clip(((mean2d[:, 0] - radius) // TILE).astype(int), 0, nx - 1)
        tx1 = np.clip(((mean2d[:, 0] + radius) // TILE).astype(int), 0, nx - 1)
        ty0 = np.clip(((mean2d[:, 1] - radius) // TILE).astype(int), 0, ny - 1)
        ty1 = np.clip(((mean2d[:, 1] + radius) // TILE).astype(int), 0, ny - 1)

        tile_lists = [[] for _ in range(nx * ny)]
        for i in range(mean2d.shape[0]):
            for ty in range(ty0[i], ty1[i] + 1):
                for tx in range(tx0[i], tx1[i] + 1):
                    tile_lists[ty * nx + tx].append(i)

        def do_tile(t):
            ty, tx = divmod(t, nx)
            rows = tile_lists[t]
            if not rows:
                return
            x0, y0 = tx * TILE, ty * TILE
            tw = min(TILE, w - x0)
            th = min(TILE, h - y0)
            sel = np.asarray(rows, dtype=np.intp)
            tile_rgb = np.zeros((th, tw, 3))
            tile_T = np.ones((th, tw))
            composite_tile(
                np.ascontiguousarray(mean2d[sel]), np.ascontiguousarray(conics[sel]),
                np.ascontiguousarray(colors[sel]), np.ascontiguousarray(ops[sel]),
                x0, y0, tile_rgb, tile_T,
            )
            rgb[y0 : y0 + th, x0 : x0 + tw] = tile_rgb
            transmit[y0 : y0 + th, x0 : x0 + tw] = tile_T

        if threads == 1:
            for t in range(nx * ny):
                do_tile(t)
        else:
            workers = threads if threads > 0 else None
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(do_tile, range(nx * ny)))

    rgb = rgb + transmit[..., None] * bg
    return RenderedImage(rgb=np.clip(rgb, 0.0, 1.0), alpha=1.0 - transmit)


# --- image metrics -----------------------------------------------------------

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _ssim_kernel() -> np.ndarray:
    r = _SSIM_WINDOW // 2
    g = np.exp(-0.5 * (np.arange(-r, r + 1) / _SSIM_SIGMA) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM with an 11x11 Gaussian window, reflect-padded, per channel."""
    if a.shape != b.shape:
        raise InvalidInputError("SSIM inputs must share shape")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    k = _ssim_kernel()
    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch].astype(float), b[..., ch].astype(float)
        mx = correlate(x, k, mode="reflect")
        my = correlate(y, k, mode="reflect")
        sxx = correlate(x * x, k, mode="reflect") - mx * mx
        syy = correlate(y * y, k, mode="reflect") - my * my
        sxy = correlate(x * y, k, mode="reflect") - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def compute_image_metrics(a: np.ndarray, b: np.ndarray) -> dict:
    """MSE / PSNR (capped at 99 dB) / SSIM for images in [0, 1]."""
    if a.shape != b.shape:
        raise InvalidInputError("metric inputs must share shape")
    mse = float(np.mean((a.astype(float) - b.astype(float)) ** 2))
    psnr = PSNR_CAP if mse == 0 else min(PSNR_CAP, -10.0 * np.log10(mse))
    return {"mse": mse, "psnr": float(psnr), "ssim": ssim(a, b)}


def combined_loss(renders: Sequence[np.ndarray], refs: Sequence[np.ndarray],
                  lam: float = 0.05, perceptual_enabled: bool = False) -> float:
    """Summed MSE over view pairs plus an (optional, disabled) perceptual term."""
    if len(renders) != len(refs):
        raise InvalidInputError("render/reference list length mismatch")
    total = 0.0
    for r, t in zip(renders, refs):
        if r.shape != t.shape:
            raise InvalidInputError("render/reference shape mismatch")
        total += float(np.mean((r.astype(float) - t.astype(float)) ** 2))
        if perceptual_enabled:
            total += lam * 0.0  # perceptual metric intentionally not shipped
    return total


# --- PPM I/O (bit-exact comparison format) -----------------------------------

def write_ppm(path, rgb: np.ndarray) -> None:
    """P6, maxval 255, rounding half-up from [0, 1]."""
    h, w = rgb.shape[:2]
    data = np.floor(np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Returns H x W x 3 floats in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6" or parts[3] != b"255":
        raise InvalidInputError(f"{path}: expected binary P6 maxval-255 PPM")
    w, h = int(parts[1]), int(parts[2])
    data = np.frombuffer(parts[4], dtype=np.uint8, count=h * w * 3)
    return data.reshape(h, w, 3).astype(float) / 255.0
