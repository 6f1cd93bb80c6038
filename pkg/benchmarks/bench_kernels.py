"""Compare the compiled and pure-Python convolution kernel backends.

Times im2col/col2im and a full conv2d forward+backward at a few model-like
geometries, and verifies the two backends agree bit for bit.

Run: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from lesionseg.kernels import available_backends, get_backend
from lesionseg.tensor import ConvParams, Tensor, Tape, backward, conv2d, reduce_sum

GEOMETRIES = [
    # (label, n, c_in, h, w, c_out, k, stride, dilation)
    ("encoder 3x3", 4, 16, 64, 64, 16, 3, 1, 1),
    ("downsample", 4, 16, 64, 64, 32, 3, 2, 1),
    ("aspp rate 6", 4, 64, 16, 16, 16, 3, 1, 6),
    ("fusion 1x1", 4, 144, 16, 16, 64, 1, 1, 1),
]


def time_call(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_backend(mod, repeats):
    rows = []
    rng = np.random.default_rng(0)
    for label, n, c_in, h, w, c_out, k, stride, dil in GEOMETRIES:
        pad = dil * (k - 1) // 2
        oh = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
        ow = (w + 2 * pad - dil * (k - 1) - 1) // stride + 1
        x = rng.random((n, c_in, h, w)).astype(np.float32)
        cols = mod.im2col(x, k, k, stride, stride, dil, dil, pad, pad, oh, ow)
        t_fwd = time_call(
            lambda: mod.im2col(x, k, k, stride, stride, dil, dil, pad, pad, oh, ow),
            repeats)
        t_bwd = time_call(
            lambda: mod.col2im(cols, n, c_in, h, w, k, k, stride, stride,
                               dil, dil, pad, pad, oh, ow),
            repeats)
        rows.append((label, t_fwd, t_bwd))
    return rows


def bench_full_step(repeats):
    """Forward+backward of a single conv through the autodiff layer,
    using whichever backend is active."""
    rng = np.random.default_rng(1)
    x = Tensor(rng.random((4, 16, 64, 64)).astype(np.float32), requires_grad=True)
    kern = Tensor((0.05 * rng.standard_normal((16, 16, 3, 3))).astype(np.float32),
                  requires_grad=True)
    params = ConvParams(kernel=kern, stride=(1, 1), dilation=(1, 1),
                        padding=(1, 1))

    def step():
        with Tape() as tape:
            y = conv2d(x, params)
            backward(reduce_sum(y), tape)

    return time_call(step, repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    names = available_backends()
    print(f"available backends: {', '.join(names)}")
    results = {name: bench_backend(get_backend(name), args.repeats)
               for name in names}

    header = f"{'geometry':<14}"
    for name in names:
        header += f"  {name+' im2col':>16}  {name+' col2im':>16}"
    print(header)
    for i, (label, *_rest) in enumerate(GEOMETRIES):
        line = f"{label:<14}"
        for name in names:
            _, t_fwd, t_bwd = results[name][i]
            line += f"  {t_fwd*1e3:14.2f}ms  {t_bwd*1e3:14.2f}ms"
        print(line)

    if len(names) == 2:
        a, b = names
        speedups = [results[b][i][1] / results[a][i][1]
                    for i in range(len(GEOMETRIES))]
        print(f"\nmedian im2col speedup {a} vs {b}: "
              f"{np.median(speedups):.1f}x")

    # agreement check: identical outputs across backends
    rng = np.random.default_rng(2)
    x = rng.random((2, 8, 32, 32)).astype(np.float32)
    outs = [get_backend(n).im2col(x, 3, 3, 1, 1, 2, 2, 2, 2, 32, 32)
            for n in names]
    for other in outs[1:]:
        assert np.array_equal(outs[0], other), "backends disagree"
    print("backend agreement: bit-identical" if len(outs) > 1
          else "single backend only")

    t = bench_full_step(args.repeats)
    print(f"full conv2d forward+backward (active backend): {t*1e3:.2f}ms")


if __name__ == "__main__":
    main()
