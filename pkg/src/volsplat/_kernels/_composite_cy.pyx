# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled tile compositing kernel (hot loop of the rasterizer)."""

from libc.math cimport exp

ALPHA_MAX = 0.99
T_CUTOFF = 1e-4

cdef double _ALPHA_MAX = 0.99
cdef double _T_CUTOFF = 1e-4


def composite_tile(double[:, ::1] means, double[:, ::1] conics,
                   double[:, ::1] colors, double[::1] opacities,
                   int x0, int y0,
                   double[:, :, ::1] rgb, double[:, ::1] transmit):
    """Front-to-back composite pre-sorted splats into one tile (in place)."""
    cdef Py_ssize_t th = transmit.shape[0]
    cdef Py_ssize_t tw = transmit.shape[1]
    cdef Py_ssize_t n = means.shape[0]
    cdef Py_ssize_t yi, xi, i
    cdef double px, py, dx, dy, q, alpha, t

    for yi in range(th):
        for xi in range(tw):
            t = transmit[yi, xi]
            if t < _T_CUTOFF:
                continue
            px = x0 + xi
            py = y0 + yi
            for i in range(n):
                dx = px - means[i, 0]
                dy = py - means[i, 1]
                q = conics[i, 0] * dx * dx + 2.0 * conics[i, 1] * dx * dy \
                    + conics[i, 2] * dy * dy
                alpha = opacities[i] * exp(-0.5 * q)
                if alpha > _ALPHA_MAX:
                    alpha = _ALPHA_MAX
                rgb[yi, xi, 0] += alpha * t * colors[i, 0]
                rgb[yi, xi, 1] += alpha * t * colors[i, 1]
                rgb[yi, xi, 2] += alpha * t * colors[i, 2]
                t = t * (1.0 - alpha)
                if t < _T_CUTOFF:
                    break
            transmit[yi, xi] = t
