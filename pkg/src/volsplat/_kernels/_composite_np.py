"""Pure-numpy tile compositing kernel (fallback backend).

Splat-major vectorization over the tile's pixels; per pixel the arithmetic
sequence matches the compiled kernel (same order, same formulas).
"""

import numpy as np

ALPHA_MAX = 0.99
T_CUTOFF = 1e-4


def composite_tile(means, conics, colors, opacities, x0, y0, rgb, transmit):
    """Front-to-back composite pre-sorted splats into one tile.

    rgb (th, tw, 3) and transmit (th, tw) are updated in place; transmit
    must start at 1 and rgb at 0 for a fresh tile.
    """
    th, tw = transmit.shape
    ys, xs = np.mgrid[0:th, 0:tw]
    px = (x0 + xs).astype(float)
    py = (y0 + ys).astype(float)
    active = transmit >= T_CUTOFF
    for i in range(means.shape[0]):
        if not active.any():
            break
        dx = px - means[i, 0]
        dy = py - means[i, 1]
        q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy + conics[i, 2] * dy * dy
        alpha = np.minimum(ALPHA_MAX, opacities[i] * np.exp(-0.5 * q))
        upd = active
        a = np.where(upd, alpha, 0.0)
        rgb += (a * transmit)[..., None] * colors[i]
        transmit *= np.where(upd, 1.0 - a, 1.0)
        active = transmit >= T_CUTOFF
