#!/usr/bin/env python3
"""Benchmark the compiled training-step kernel against the numpy fallback.

Times one fused loss-and-gradient call across batch sizes on the default
benchmark architecture, then a short end-to-end training run per backend.

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from rosettavae import _kernels, vae
from rosettavae.datasets import gen_8gaussians, partition_halfplane, split_train_val


def time_call(fn, repeats):
    fn()  # warm up
    best = float("inf")
    for _ in range(3):
        start = time.perf_counter()
        for _ in range(repeats):
            fn()
        best = min(best, (time.perf_counter() - start) / repeats)
    return best


def bench_step(repeats):
    arch = vae.ArchSpec(input_dim=5, latent_dim=2, hidden=(32, 32))
    model = vae.init_model(arch, seed=1)
    layout = vae._layout_for(arch)
    theta = layout.pack(model.params)
    rng = np.random.default_rng(0)
    anchors_x = rng.standard_normal((8, 5))
    anchors_z = rng.standard_normal((8, 2))

    print(f"fused loss+gradient call (hidden=32x32, anchors=8, {repeats} reps)")
    header = f"{'batch':>6} " + "".join(f"{n:>14}" for n in _kernels.available_backends())
    print(header + f"{'speedup':>10}")
    for batch in (16, 64, 128, 512):
        x = rng.standard_normal((batch, 5))
        eps = rng.standard_normal((batch, 2))
        times = {}
        for name in _kernels.available_backends():
            impl = _kernels.get_impl(name)
            times[name] = time_call(
                lambda: impl.loss_and_grad(
                    layout, theta, x, eps, 1.0, 0.5, anchors_x, anchors_z
                ),
                repeats,
            )
        row = f"{batch:>6} " + "".join(f"{times[n] * 1e6:>11.1f} us" for n in times)
        if "compiled" in times:
            row += f"{times['python'] / times['compiled']:>9.2f}x"
        print(row)


def bench_training():
    d1, _ = partition_halfplane(gen_8gaussians(100, seed=0))
    train_rows, val_rows = split_train_val(d1, 0.6, seed=1)
    arch = vae.ArchSpec(input_dim=5, latent_dim=2, hidden=(32, 32))
    config = vae.TrainConfig(epochs=200, seed=3)
    print("\nfull training run (240 rows, 200 epochs, batch 128)")
    times = {}
    for name in _kernels.available_backends():
        start = time.perf_counter()
        result = vae.train(arch, train_rows, config, val_data=val_rows, backend=name)
        times[name] = time.perf_counter() - start
        print(
            f"  {name:>9}: {times[name]:.2f} s "
            f"(final val loss {result.trace[-1].val_loss:.4f})"
        )
    if "compiled" in times:
        print(f"  speedup: {times['python'] / times['compiled']:.2f}x")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=2000)
    args = parser.parse_args()
    print(f"available backends: {', '.join(_kernels.available_backends())}")
    print(f"default backend: {_kernels.BACKEND}\n")
    bench_step(args.repeats)
    bench_training()


if __name__ == "__main__":
    main()
