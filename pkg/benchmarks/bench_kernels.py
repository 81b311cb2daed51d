#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times every hot kernel on the default architecture's layer shapes plus
a full-model forward at both precisions. Run:

    python benchmarks/bench_kernels.py [--repeat 50]
"""

import argparse
import time

import numpy as np

from thermodet.graph import (
    CONV3X3,
    DEPTHWISE3X3,
    default_architecture,
    _spatial_after,
)
from thermodet.kernels import numba_backend, numpy_backend


def time_fn(fn, *args, repeat=50):
    fn(*args)  # warm-up (JIT compile / cache load)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def layer_cases(graph):
    rng = np.random.default_rng(0)
    h, w = 24, 32
    for i, (desc, p) in enumerate(zip(graph.layers, graph.params)):
        x = rng.normal(size=(desc.in_channels, h, w)).astype(np.float32)
        xq = rng.integers(-128, 128, size=x.shape).astype(np.int8)
        wq = rng.integers(-127, 128, size=p.w.shape).astype(np.int8)
        bias = rng.integers(-1000, 1000, size=desc.out_channels).astype(np.int32)
        mult = rng.integers(1 << 30, (1 << 31) - 1, size=desc.out_channels).astype(
            np.int32
        )
        shift = np.full(desc.out_channels, 34, dtype=np.int32)
        if desc.kind == CONV3X3:
            f32_args = (x, p.w, p.b, desc.stride)
            i8_args = (xq, 0, wq, bias, mult, shift, 0, -128, 127, desc.stride)
            names = ("conv3x3", "conv3x3_int8")
        elif desc.kind == DEPTHWISE3X3:
            f32_args = (x, p.w, p.b, desc.stride)
            i8_args = (xq, 0, wq, bias, mult, shift, 0, -128, 127, desc.stride)
            names = ("depthwise3x3", "depthwise3x3_int8")
        else:
            f32_args = (x, p.w, p.b)
            i8_args = (xq, 0, wq, bias, mult, shift, 0, -128, 127)
            names = ("pointwise", "pointwise_int8")
        shape = f"{desc.in_channels}x{h}x{w}->{desc.out_channels}"
        yield i, names[0], shape, f32_args
        yield i, names[1], shape, i8_args
        h, w = _spatial_after(h, w, desc.stride)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=50)
    args = parser.parse_args()

    graph = default_architecture(1, seed=0)
    print(f"{'layer':>5} {'kernel':<18} {'shape':<18} "
          f"{'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    totals = {"numpy": 0.0, "numba": 0.0}
    for i, kernel, shape, call_args in layer_cases(graph):
        t_np = time_fn(getattr(numpy_backend, kernel), *call_args, repeat=args.repeat)
        t_nb = time_fn(getattr(numba_backend, kernel), *call_args, repeat=args.repeat)
        totals["numpy"] += t_np
        totals["numba"] += t_nb
        print(
            f"{i:>5} {kernel:<18} {shape:<18} "
            f"{t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>8.2f}x"
        )
    print(
        f"{'':>5} {'TOTAL':<18} {'':<18} "
        f"{totals['numpy'] * 1e3:>10.3f} {totals['numba'] * 1e3:>10.3f} "
        f"{totals['numpy'] / totals['numba']:>8.2f}x"
    )


if __name__ == "__main__":
    main()
