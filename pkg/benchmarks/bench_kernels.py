#!/usr/bin/env python3
"""Compare the compiled conv kernels against the pure-numpy fallback.

Runs the encoder's actual conv shapes (batch 32, the four MicroRes stages)
plus one larger shape, forward and backward, and prints a table with the
speedup.  A full train-step timing per backend closes the report.

    python3 benchmarks/bench_kernels.py [--repeats 5]
"""

import argparse
import time

import numpy as np

from soi import _kernels

SHAPES = [
    # (input, kernel)                      stage
    ((32, 3, 32, 32), (16, 3, 3, 3)),    # stem
    ((32, 16, 32, 32), (16, 16, 3, 3)),  # stage 0
    ((32, 32, 16, 16), (32, 32, 3, 3)),  # stage 1
    ((32, 64, 8, 8), (64, 64, 3, 3)),    # stage 2
    ((32, 128, 4, 4), (128, 128, 3, 3)),  # stage 3
    ((64, 32, 32, 32), (64, 32, 3, 3)),  # wider
]


def time_call(fn, repeats):
    fn()  # warm
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def bench_conv(repeats):
    backends = {name: _kernels.get_backend(name) for name in _kernels.available_backends()}
    if "native" not in backends:
        print("note: compiled kernels unavailable; timing the fallback only")
    rng = np.random.default_rng(0)
    header = f"{'shape':<28}{'dir':<5}" + "".join(f"{n:>12}" for n in backends) + "   speedup"
    print(header)
    print("-" * len(header))
    for xs, ws in SHAPES:
        x = rng.normal(size=xs).astype(np.float32)
        w = rng.normal(size=ws).astype(np.float32)
        g = np.ones_like(backends["python"].conv2d_forward(x, w, 1, 1))
        label = f"{xs}x{ws[0]}f"
        rows = {
            "fwd": {n: time_call(lambda m=m: m.conv2d_forward(x, w, 1, 1), repeats)
                    for n, m in backends.items()},
            "bwd": {n: time_call(lambda m=m: m.conv2d_backward(x, w, 1, 1, g), repeats)
                    for n, m in backends.items()},
        }
        for direction, times in rows.items():
            cells = "".join(f"{times[n]:>10.2f}ms" for n in backends)
            if "native" in times:
                speedup = f"{times['python'] / times['native']:>8.2f}x"
            else:
                speedup = "     n/a"
            print(f"{label:<28}{direction:<5}{cells}{speedup}")


def bench_train_step(repeats):
    from soi.augment import AugmentationPolicy
    from soi.contrastive import SGD, DualEncoderState, EmbeddingQueue, TrainConfig, train_step
    from soi.nn import EncoderConfig, HeadConfig

    print(f"\nfull train step (batch 32, MicroRes encoder), backend={_kernels.BACKEND}")
    cfg = TrainConfig(batch_size=32, queue_capacity=512, total_steps=100, seed=0)
    state = DualEncoderState(EncoderConfig(), HeadConfig(), 0)
    queue = EmbeddingQueue(cfg.queue_capacity, HeadConfig().out_dim)
    opt = SGD(state._online_params(), cfg.sgd_momentum, cfg.weight_decay)
    policy = AugmentationPolicy(output_size=(32, 32))
    rng = np.random.default_rng(1)
    images = [rng.uniform(size=(3, 32, 32)).astype(np.float32) for _ in range(32)]
    train_step(state, images, queue, cfg, policy, opt)  # warm
    t0 = time.perf_counter()
    for _ in range(repeats):
        train_step(state, images, queue, cfg, policy, opt)
    print(f"  {(time.perf_counter() - t0) / repeats * 1000:.0f} ms/step")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    print(f"active backend: {_kernels.BACKEND} "
          f"(override with SOI_KERNELS=native|python|auto)\n")
    bench_conv(args.repeats)
    bench_train_step(args.repeats)
