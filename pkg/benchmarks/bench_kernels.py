"""Time the numba kernels against their pure-numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--no-end-to-end]

Prints a table on stderr and the same numbers as JSON on stdout.  The
end-to-end rows run ``imponderous bench`` in a subprocess per backend, since
the backend is fixed at import time by ``IMPONDEROUS_BACKEND``.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from imponderous import kernels

# (batch, channels, height, width) of the feature maps the network convolves
SHAPES = [(1, 48, 64, 64), (1, 96, 32, 32), (1, 128, 16, 16)]


def _median_ms(fn, repeat):
    fn()  # compile / warm caches
    return 1e3 * float(np.median(timeit.repeat(fn, number=1, repeat=repeat)))


def _cases(table, shape, rng):
    n, c, h, w = shape
    x = rng.standard_normal(shape).astype(np.float32)
    pooled, arg = table["maxpool2_forward"](x)
    gout = rng.standard_normal(pooled.shape).astype(np.float32)
    cols = table["im2col"](x, 3, 3, 1, 1, h, w)
    tile = 4 if h % 4 == 0 and w % 4 == 0 else 2
    th, tw = h // tile, w // tile
    cout = 2 * c
    m = rng.standard_normal(((tile + 2) ** 2, cout, n * th * tw)).astype(np.float32)
    bias = np.zeros(cout, np.float32)
    return {
        "im2col": lambda: table["im2col"](x, 3, 3, 1, 1, h, w),
        "col2im": lambda: table["col2im"](cols, c, h, w, 3, 3, 1, 1, h, w),
        "maxpool2_forward": lambda: table["maxpool2_forward"](x),
        "maxpool2_backward": lambda: table["maxpool2_backward"](gout, arg),
        f"winograd_input_f{tile}": lambda: table["winograd_input"](x, 1, tile),
        f"winograd_output_f{tile}": lambda: table["winograd_output"](m, bias, n, th, tw, tile),
        f"winograd_output_mfm_f{tile}": lambda: table["winograd_output_mfm"](m, bias, n, th, tw, tile),
    }


def kernel_rows(repeat: int) -> list[dict]:
    if kernels.NUMBA_KERNELS is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rows = []
    for shape in SHAPES:
        numba_cases = _cases(kernels.NUMBA_KERNELS, shape, np.random.default_rng(0))
        numpy_cases = _cases(kernels.NUMPY_KERNELS, shape, np.random.default_rng(0))
        for name in numba_cases:
            a = _median_ms(numba_cases[name], repeat)
            b = _median_ms(numpy_cases[name], repeat)
            rows.append({"kernel": name, "shape": list(shape), "numba_ms": a, "numpy_ms": b, "speedup": b / a})
    return rows


def end_to_end(iterations: int) -> list[dict]:
    rows = []
    for backend in ("numba", "numpy"):
        env = dict(os.environ, IMPONDEROUS_BACKEND=backend)
        out = subprocess.run([sys.executable, "-m", "imponderous.cli", "bench", "--iterations", str(iterations)],
                             env=env, capture_output=True, text=True, check=True).stdout
        report = json.loads(out)
        rows.append({"backend": backend, "fps": report["fps_single_lane"],
                     "latency_ms_p50": report["latency_ms"]["p50"], "conv_algorithm": report["conv_algorithm"]})
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--iterations", type=int, default=20, help="frames per end-to-end run")
    ap.add_argument("--no-end-to-end", dest="e2e", action="store_false")
    args = ap.parse_args(argv)

    rows = kernel_rows(args.repeat)
    print(f"{'kernel':<26}{'shape':<20}{'numba ms':>10}{'numpy ms':>10}{'x':>7}", file=sys.stderr)
    for r in rows:
        print(f"{r['kernel']:<26}{str(tuple(r['shape'])):<20}{r['numba_ms']:>10.3f}{r['numpy_ms']:>10.3f}"
              f"{r['speedup']:>7.2f}", file=sys.stderr)
    result = {"kernels": rows}
    if args.e2e:
        result["end_to_end"] = end_to_end(args.iterations)
        for r in result["end_to_end"]:
            print(f"predict, {r['backend']:<6} backend: {r['fps']:.1f} fps mirrored "
                  f"({r['conv_algorithm']} conv)", file=sys.stderr)
    print(json.dumps(result, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
