"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Also times one full stack render (80 frames, 64x64) under each backend by
re-running this script with FOCUSLAB_DISABLE_NUMBA set.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from focuslab import _kernels
from focuslab.optics import psf_kernel


def cases(rng):
    img = rng.uniform(size=(64, 64))
    big = rng.uniform(size=(256, 256))
    taps = psf_kernel(4.0).profile
    dcols = rng.uniform(size=(8, 144, 1024))
    return [
        ("separable 64x64, r=4", lambda b: _kernels.separable_convolve(img, taps, backend=b)),
        ("separable 256x256, r=4", lambda b: _kernels.separable_convolve(big, taps, backend=b)),
        ("convolve2d 64x64, 3x3", lambda b: _kernels.convolve2d(img, _kernels.GX, backend=b)),
        ("gradient magnitude 64x64", lambda b: _kernels.gradient_magnitude(img, backend=b)),
        ("gradient magnitude 256x256", lambda b: _kernels.gradient_magnitude(big, backend=b)),
        ("shift 64x64", lambda b: _kernels.shift_image(img, 3, -2, backend=b)),
        ("col2im 8x16x32x32", lambda b: _kernels.col2im3(dcols, (8, 16, 32, 32), backend=b)),
    ]


def stack_render_seconds():
    code = ("import time; from focuslab.camera import synthetic_stack; synthetic_stack(0, size=16, n_positions=2);"
            "t = time.perf_counter(); synthetic_stack(1); print(time.perf_counter() - t)")
    out = {}
    for name, flag in (("numba", ""), ("numpy", "1")):
        env = dict(os.environ, FOCUSLAB_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        out[name] = float(res.stdout)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    backends = _kernels.available_backends()
    if "numba" not in backends:
        print("numba is not installed (or FOCUSLAB_DISABLE_NUMBA is set); timing numpy only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}" + "".join(f"{b + ' us':>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for label, fn in cases(rng):
        times = []
        for b in backends:
            fn(b)   # compile / warm up
            times.append(min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) * 1e6)
        line = f"{label:<28}" + "".join(f"{t:>12.1f}" for t in times)
        if len(times) > 1:
            line += f"{times[1] / times[0]:>11.1f}x"
        print(line)
    if "numba" in backends:
        r = stack_render_seconds()
        print(f"\nstack render (80 frames, 64x64): numba {r['numba']:.3f}s, numpy {r['numpy']:.3f}s")


if __name__ == "__main__":
    main()
