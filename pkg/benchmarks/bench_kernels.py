#!/usr/bin/env python3
"""Benchmark the compiled conv kernels against the NumPy fallback.

Runs each kernel on the detector's layer shapes and then times a full
training step of the default backbone, reporting the native/python ratio.

    python benchmarks/bench_kernels.py [--batch 32] [--reps 20]
"""

import argparse
import time

import numpy as np

from anovis.nn import _py_kernels

try:
    from anovis import _native
except ImportError:
    _native = None

LAYERS = [
    ("block1 64x64x1 -> 32x32x8 /2", (64, 64, 1), (3, 3, 1, 8), 2, 1),
    ("block2 32x32x8 -> 16x16x16 /2", (32, 32, 8), (3, 3, 8, 16), 2, 1),
    ("block3 16x16x16 -> 8x8x32 /2", (16, 16, 16), (3, 3, 16, 32), 2, 1),
    ("block4 8x8x32 -> 8x8x32 /1", (8, 8, 32), (3, 3, 32, 32), 1, 1),
    ("head 8x8x32 -> 8x8x1 1x1", (8, 8, 32), (1, 1, 32, 1), 1, 0),
]


def time_op(fn, reps):
    fn()  # warmup
    start = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - start) / reps


def bench_kernels(batch, reps):
    rng = np.random.default_rng(0)
    impls = [("python", _py_kernels)]
    if _native is not None:
        impls.insert(0, ("native", _native))
    print(f"{'layer':<34} {'op':<8} " + " ".join(f"{name:>10}" for name, _ in impls))
    totals = {name: 0.0 for name, _ in impls}
    for label, in_shape, w_shape, stride, pad in LAYERS:
        x = rng.standard_normal((batch, *in_shape)).astype(np.float32)
        w = rng.standard_normal(w_shape).astype(np.float32)
        b = np.zeros(w_shape[3], dtype=np.float32)
        y = _py_kernels.conv2d_forward(x, w, b, stride, pad)
        gy = np.ascontiguousarray(rng.standard_normal(y.shape).astype(np.float32))
        ops = {
            "fwd": lambda impl: impl.conv2d_forward(x, w, b, stride, pad),
            "bwd_in": lambda impl: impl.conv2d_backward_input(
                gy, w, stride, pad, in_shape[0], in_shape[1]
            ),
            "bwd_w": lambda impl: impl.conv2d_backward_weight(
                gy, x, w_shape[0], w_shape[1], stride, pad
            ),
        }
        for op_name, op in ops.items():
            times = []
            for name, impl in impls:
                t = time_op(lambda: op(impl), reps)
                totals[name] += t
                times.append(f"{t * 1e3:8.2f}ms")
            print(f"{label:<34} {op_name:<8} " + " ".join(f"{t:>10}" for t in times))
    print(f"{'all kernels':<34} {'total':<8} "
          + " ".join(f"{totals[name] * 1e3:8.2f}ms" for name, _ in impls))
    if _native is not None:
        print(f"native speedup over python fallback: {totals['python'] / totals['native']:.2f}x")


def bench_train_step(batch, reps):
    import os

    from anovis.fcdd import ToyFCN, fcdd_loss_and_grad
    from anovis.nn import Adam, active_backend

    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, 64, 64, 1)).astype(np.float32)
    labels = rng.integers(0, 2, batch).astype(float)
    net = ToyFCN((64, 64), 1, seed=0)
    opt = Adam(net.params())

    def step():
        maps = net.forward(x, train=True)
        _, grad, _ = fcdd_loss_and_grad(maps.astype(np.float64), labels)
        net.zero_grad()
        net.backward(grad.astype(np.float32))
        opt.step()

    t = time_op(step, reps)
    print(f"\nfull train step (batch {batch}, backend {active_backend()}): {t * 1e3:.1f} ms")
    print("force the fallback with ANOVIS_NO_NATIVE=1 to compare "
          f"(currently {'set' if os.environ.get('ANOVIS_NO_NATIVE') == '1' else 'unset'})")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--reps", type=int, default=20)
    args = parser.parse_args()
    if _native is None:
        print("compiled kernels not available; benchmarking the fallback only")
    bench_kernels(args.batch, args.reps)
    bench_train_step(args.batch, args.reps)
