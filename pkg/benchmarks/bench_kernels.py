"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--rows 2048] [--width 64] [--repeat 50]

Shapes default to one training step's worth of layernorm/softmax rows for the
default image tower (batch 32, 17 tokens, 4 heads).
"""

import argparse
import timeit

import numpy as np

from camoret.numerics import _kernels_py as py

try:
    from camoret.numerics import _kernels_c as cy
except ImportError:
    cy = None


def cases(rows, width, rng):
    x = rng.standard_normal((rows, width))
    g, b = rng.standard_normal(width), rng.standard_normal(width)
    gy = rng.standard_normal((rows, width))
    _, xhat, rstd = py.layernorm_forward(x, g, b, 1e-5)
    s = rng.standard_normal((rows, 17))
    sy = py.softmax_forward(s)
    gs = rng.standard_normal((rows, 17))
    _, t = py.gelu_forward(x)
    return {
        "layernorm_forward": lambda k: k.layernorm_forward(x, g, b, 1e-5),
        "layernorm_backward": lambda k: k.layernorm_backward(gy, xhat, rstd, g),
        "softmax_forward": lambda k: k.softmax_forward(s),
        "softmax_backward": lambda k: k.softmax_backward(sy, gs),
        "gelu_backward": lambda k: k.gelu_backward(x, t, gy),
    }


def max_diff(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return max(float(np.max(np.abs(np.asarray(u) - np.asarray(v)))) for u, v in zip(a, b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=32 * 17 * 4)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    if cy is None:
        print("compiled kernels are not built; only the numpy fallback is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20s} {'numpy ms':>9s} {'cython ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, run in cases(args.rows, args.width, rng).items():
        tp = min(timeit.repeat(lambda: run(py), number=args.repeat, repeat=3)) / args.repeat
        tc = min(timeit.repeat(lambda: run(cy), number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:<20s} {tp * 1e3:9.3f} {tc * 1e3:10.3f} {tp / tc:7.2f}x "
              f"{max_diff(run(py), run(cy)):11.2e}")


if __name__ == "__main__":
    main()
