#!/usr/bin/env python3
"""Benchmark the compiled kernels against the NumPy fallback.

Runs each kernel on representative shapes from the experiment configs, plus
one full transformer-block forward+backward, and prints per-call times for
both backends.  Usage:

    python benchmarks/bench_kernels.py [--repeats 200]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from sbprop import backend
from sbprop.autograd import Tape, backward
from sbprop.models import TransformerBlock
from sbprop.tensor import Rng


def time_call(fn, args, repeats: int) -> float:
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def kernel_cases(rng: Rng):
    x_small = rng.normal((16, 32))
    x_tok = rng.normal((2, 32, 32))
    scores = rng.normal((2, 2, 32, 32))
    gamma, beta = rng.normal((32,)), rng.normal((32,))
    big = rng.normal((4, 392, 392))
    return [
        ("matmul 16x32 @ 32x32", "matmul", (x_small, rng.normal((32, 32)))),
        ("matmul 2x32x32 @ 32x128", "matmul", (x_tok, rng.normal((32, 128)))),
        ("matmul qk^T 2x2x32x16", "matmul",
         (rng.normal((2, 2, 32, 16)), rng.normal((2, 2, 32, 16)), True)),
        ("softmax 4x392x392", "softmax_lastdim", (big,)),
        ("softmax_vjp", "softmax_vjp",
         (np.abs(rng.normal((2, 2, 32, 32))) + 0.1, scores)),
        ("layer_norm 2x32x32", "layer_norm", (x_tok, gamma, beta, 1e-5)),
        ("layer_norm_vjp", "layer_norm_vjp", (x_tok, gamma, 1e-5, x_tok)),
        ("gelu 2x32x128", "gelu", (rng.normal((2, 32, 128)),)),
        ("gelu_vjp", "gelu_vjp", (rng.normal((2, 32, 128)), rng.normal((2, 32, 128)))),
        ("relu 50k", "relu", (rng.normal((50_000,)),)),
        ("add 50k", "add", (rng.normal((50_000,)), rng.normal((50_000,)))),
        ("mul 50k", "mul", (rng.normal((50_000,)), rng.normal((50_000,)))),
        ("scale 50k", "scale", (rng.normal((50_000,)), 1.7)),
    ]


def bench_block_step(impl_name: str, repeats: int) -> float:
    """One transformer-block forward+backward, forcing a backend via env is
    not possible mid-process, so this reports the active backend only."""
    rng = Rng(0)
    blk = TransformerBlock(2, 16, rng=rng)
    x = rng.normal((2, 32, 32))

    def step():
        tape = Tape(counting=False, charging=False)
        xn = tape.leaf(x, requires_grad=True, kind="data")
        _, y = blk.record(tape, xn)
        s = tape.record("sum_all", [y])
        backward(tape, s)

    step()
    t0 = time.perf_counter()
    for _ in range(repeats):
        step()
    return (time.perf_counter() - t0) / repeats


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args()

    impls = backend.available_backends()
    rng = Rng(123)
    cases = kernel_cases(rng)

    names = sorted(impls)
    print(f"active backend: {backend.ACTIVE_BACKEND}")
    header = f"{'kernel':>28} " + " ".join(f"{n:>12}" for n in names)
    if len(names) == 2:
        header += f" {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for label, fn_name, call_args in cases:
        times = {}
        for impl_name in names:
            impl = impls[impl_name]
            fn = getattr(impl, fn_name, None)
            times[impl_name] = time_call(fn, call_args, args.repeats) if fn else float("nan")
        row = f"{label:>28} " + " ".join(f"{times[n] * 1e6:>10.1f}us" for n in names)
        if len(names) == 2 and np.isfinite(times["cython"]):
            row += f" {times['python'] / times['cython']:>8.2f}x"
        print(row)

    blk_time = bench_block_step(backend.ACTIVE_BACKEND, max(10, args.repeats // 10))
    print(f"\ntransformer block fwd+bwd ({backend.ACTIVE_BACKEND} backend): "
          f"{blk_time * 1e3:.2f} ms")
    if len(names) < 2:
        print("note: compiled extension not built; only the NumPy backend was timed")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
