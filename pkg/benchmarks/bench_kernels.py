"""Compiled vs numpy kernels, per kernel and for one full training step.

    python benchmarks/bench_kernels.py [--repeat N]

Kernel timings call both backend modules directly. The training-step
timing runs in two subprocesses, since the backend is fixed at import.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from splitfed import kernels

STEP_SNIPPET = """
import timeit, numpy as np
from splitfed import kernels, losses, nn, segnet
enc = segnet.build_encoder(segnet.EncoderSpec("small"), 0)[0]
dec = segnet.build_decoder(segnet.DecoderSpec(), 1)
rng = np.random.default_rng(0)
x = rng.random((4, 1, 32, 32), dtype=np.float32)
y = (rng.random((4, 1, 32, 32)) < 0.3).astype(np.float32)
def step():
    lat, ec = segnet.encoder_forward(enc, x)
    logits, dc = segnet.decoder_forward(dec, lat)
    r = losses.bce_from_logits(logits, y)
    d_lat, _ = segnet.decoder_backward(dec, dc, r.d_logits)
    segnet.encoder_backward(enc, ec, d_lat)
step()
print(kernels.BACKEND, min(timeit.repeat(step, number=20, repeat={repeat})) / 20)
"""


def kernel_cases(rng):
    x = rng.standard_normal((16, 4, 32, 32)).astype(np.float32)
    cols = rng.standard_normal((16 * 9, 4 * 32 * 32)).astype(np.float32)
    pooled, idx = kernels.python_backend.maxpool2_forward(x)
    small = rng.standard_normal((16, 4, 8, 8)).astype(np.float32)
    grad_up = rng.standard_normal((16, 4, 16, 16)).astype(np.float32)
    return {
        "im2col 3x3": lambda b: b.im2col(x, 3, 1),
        "col2im 3x3": lambda b: b.col2im(cols, x.shape, 3, 1),
        "maxpool2 forward": lambda b: b.maxpool2_forward(x),
        "maxpool2 backward": lambda b: b.maxpool2_backward(pooled, idx),
        "upsample2 forward": lambda b: b.upsample2_forward(small),
        "upsample2 backward": lambda b: b.upsample2_backward(grad_up),
    }


def best_of(fn, repeat):
    fn()
    number = 50
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if kernels.compiled_backend is None:
        sys.exit("compiled extension not built; run `python setup.py build_ext --inplace` first")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<20} {'numpy us':>10} {'cython us':>10} {'speedup':>8}")
    for name, call in kernel_cases(rng).items():
        py = best_of(lambda: call(kernels.python_backend), args.repeat)
        cy = best_of(lambda: call(kernels.compiled_backend), args.repeat)
        print(f"{name:<20} {py * 1e6:>10.1f} {cy * 1e6:>10.1f} {py / cy:>7.1f}x")

    times = {}
    for backend in ("python", "cython"):
        env = {**os.environ, "SPLITFED_BACKEND": backend}
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=args.repeat)],
                             env=env, capture_output=True, text=True, check=True).stdout.split()
        times[out[0]] = float(out[1])
    print(f"\ntrain step (batch 4, small encoder): numpy {times['python'] * 1e3:.2f} ms, "
          f"cython {times['cython'] * 1e3:.2f} ms, {times['python'] / times['cython']:.2f}x")


if __name__ == "__main__":
    main()
