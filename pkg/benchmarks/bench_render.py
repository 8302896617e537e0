"""Compare the compiled and pure-numpy compositing kernels.

Runs the same tile workload through both backends, checks they agree, and
prints per-backend timings. The full-frame renderer is also timed via
subprocesses so each run picks its backend at import time.

Usage: python benchmarks/bench_render.py [--tiles 200] [--splats 400]
"""

import argparse
import json
import subprocess
import sys
import time

import numpy as np


def make_workload(rng, n_tiles, n_splats):
    tiles = []
    for _ in range(n_tiles):
        means = rng.uniform(-4.0, 20.0, (n_splats, 2))
        conics = np.zeros((n_splats, 3))
        conics[:, 0] = rng.uniform(0.05, 2.0, n_splats)
        conics[:, 2] = rng.uniform(0.05, 2.0, n_splats)
        conics[:, 1] = rng.uniform(-0.1, 0.1, n_splats) * np.sqrt(conics[:, 0] * conics[:, 2])
        colors = rng.uniform(0.0, 1.0, (n_splats, 3))
        ops = rng.uniform(0.05, 0.99, n_splats)
        tiles.append((means, conics, colors, ops))
    return tiles


def bench_kernel(composite_tile, tiles):
    start = time.perf_counter()
    checksum = 0.0
    for means, conics, colors, ops in tiles:
        rgb = np.zeros((16, 16, 3))
        transmit = np.ones((16, 16))
        composite_tile(means, conics, colors, ops, 0, 0, rgb, transmit)
        checksum += float(rgb.sum())
    return time.perf_counter() - start, checksum


def bench_full_frame(force_numpy: bool) -> dict:
    """Time a full 256x256 render in a fresh interpreter."""
    code = (
        "import json, sys, time\n"
        "import numpy as np\n"
        "from volsplat import KERNEL_BACKEND\n"
        "from volsplat.gaussians import GaussianSet, SH_C0\n"
        "from volsplat.geometry import Extrinsics, Intrinsics\n"
        "from volsplat.renderer import render\n"
        "rng = np.random.default_rng(0)\n"
        "n = 4000\n"
        "gset = GaussianSet(\n"
        "    centers=np.c_[rng.uniform(-1.5, 1.5, (n, 2)), rng.uniform(1.0, 6.0, n)],\n"
        "    opacity_logits=rng.uniform(-2, 4, n),\n"
        "    log_scales=np.log(rng.uniform(0.02, 0.08, (n, 3))),\n"
        "    rotations=np.tile([1.0, 0, 0, 0], (n, 1)),\n"
        "    sh=(rng.uniform(0, 1, (n, 3)) - 0.5) / SH_C0)\n"
        "K = Intrinsics(fx=220, fy=220, cx=127.5, cy=127.5, width=256, height=256)\n"
        "out = render(gset, K, Extrinsics.identity())  # warm-up\n"
        "t0 = time.perf_counter()\n"
        "out = render(gset, K, Extrinsics.identity())\n"
        "dt = time.perf_counter() - t0\n"
        "print(json.dumps({'backend': KERNEL_BACKEND, 'seconds': dt,\n"
        "                  'checksum': float(out.rgb.sum())}))\n"
    )
    env = dict(VOLSPLAT_FORCE_NUMPY="1") if force_numpy else {}
    import os

    result = subprocess.run([sys.executable, "-c", code],
                            env={**os.environ, **env}, capture_output=True, text=True)
    if result.returncode != 0:
        raise RuntimeError(result.stderr)
    return json.loads(result.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tiles", type=int, default=200)
    ap.add_argument("--splats", type=int, default=400)
    args = ap.parse_args()

    from volsplat._kernels import _composite_np

    backends = [("numpy", _composite_np.composite_tile)]
    try:
        from volsplat._kernels import _composite_cy

        backends.append(("cython", _composite_cy.composite_tile))
    except ImportError:
        print("compiled kernel unavailable; benchmarking the numpy fallback only")

    tiles = make_workload(np.random.default_rng(0), args.tiles, args.splats)
    print(f"tile kernel: {args.tiles} tiles x {args.splats} splats (16x16)")
    results = {}
    for name, fn in backends:
        dt, checksum = bench_kernel(fn, tiles)
        results[name] = (dt, checksum)
        print(f"  {name:>7}: {dt:.3f}s  ({args.tiles / dt:.0f} tiles/s)")
    if len(results) == 2:
        gap = abs(results["numpy"][1] - results["cython"][1])
        speedup = results["numpy"][0] / results["cython"][0]
        print(f"  agreement: |checksum gap| = {gap:.2e}")
        print(f"  speedup:   {speedup:.1f}x (cython over numpy)")

    print("full frame: 4000 splats at 256x256, fresh interpreter per backend")
    for force_numpy in (False, True):
        r = bench_full_frame(force_numpy)
        print(f"  {r['backend']:>7}: {r['seconds']:.3f}s  (checksum {r['checksum']:.6f})")


if __name__ == "__main__":
    main()
