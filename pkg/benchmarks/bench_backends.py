#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallback.

Times the convolution forward/backward kernels and one LeNet-style
training step under both implementations, printing a small table. Run:

    python3 benchmarks/bench_backends.py [--repeats N]

The library itself picks one backend per process via KFLO_BACKEND; this
script imports both implementation modules directly, so a single run
compares them side by side.
"""

import argparse
import time

import numpy as np

from kflo.backends import numba_ops, numpy_ops


def _median_time(fn, repeats):
    fn()  # warm-up (numba compiles here)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    times.sort()
    return times[len(times) // 2]


CASES = [
    # name, batch, cin, cout, hw, khw, stride, pad, groups
    ("conv 3x3 32ch 32px", 8, 32, 32, 32, 3, 1, 1, 1),
    ("conv 5x5 16ch 14px", 32, 6, 16, 14, 5, 1, 0, 1),
    ("conv 1x1 256ch 8px", 8, 256, 256, 8, 1, 1, 0, 1),
    ("depthwise 3x3 64ch", 8, 64, 64, 16, 3, 1, 1, 64),
]


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for name, b, cin, cout, hw, k, s, p, g in CASES:
        x = rng.standard_normal((b, cin, hw, hw)).astype(np.float32)
        w = rng.standard_normal((cout, cin // g, k, k)).astype(np.float32)
        args = (s, s, p, p, 1, 1, g)
        y = numpy_ops.conv2d_forward(x, w, *args)
        for tag, mod in (("numba", numba_ops), ("numpy", numpy_ops)):
            fwd = _median_time(lambda m=mod: m.conv2d_forward(x, w, *args), repeats)
            bwd_in = _median_time(
                lambda m=mod: m.conv2d_backward_input(
                    y, w, hw, hw, *args), repeats)
            bwd_k = _median_time(
                lambda m=mod: m.conv2d_backward_kernel(
                    y, x, k, k, *args), repeats)
            rows.append((name, tag, fwd, bwd_in, bwd_k))
    return rows


def bench_training_step(repeats):
    from kflo import TrainConfig, build_lenet5, iter_params
    from kflo import autodiff as ad
    from kflo.autodiff import Tape
    from kflo.model import forward_on_tape
    from kflo.train import sgd_step

    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 1, 28, 28)).astype(np.float32)
    y = rng.integers(0, 10, 64)
    graph = build_lenet5(depth=2, width_mult=4.0, seed=0)
    params = list(iter_params(graph))
    config = TrainConfig()
    velocity = {}

    def step():
        tape = Tape()
        logits, collapsed = forward_on_tape(tape, graph, tape.input(x))
        loss = ad.softmax_cross_entropy(logits, y, "mean")
        for wp in collapsed:
            loss = ad.add(loss, ad.scale(ad.half_sum_squares(wp), 5e-4))
        for p in params:
            p.zero_grad()
        tape.backward(loss)
        sgd_step(params, config, 0, velocity)

    return _median_time(step, repeats)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    print(f"{'case':<22} {'backend':<8} {'fwd ms':>9} {'bwd_in ms':>10} "
          f"{'bwd_k ms':>9}")
    print("-" * 62)
    for name, tag, fwd, bwd_in, bwd_k in bench_kernels(args.repeats):
        print(f"{name:<22} {tag:<8} {fwd * 1e3:>9.2f} {bwd_in * 1e3:>10.2f} "
              f"{bwd_k * 1e3:>9.2f}")

    from kflo.backends import BACKEND
    step = bench_training_step(args.repeats)
    print(f"\nLeNet-5 2x4 training step (batch 64, {BACKEND} backend): "
          f"{step * 1e3:.1f} ms")
    print("re-run with KFLO_BACKEND=numpy or KFLO_BACKEND=numba to compare "
          "the full step under the other backend")


if __name__ == "__main__":
    main()
