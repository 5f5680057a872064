"""Compare the compiled im2col/col2im kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints per-shape timings for both backends, then times one forward+backward
step of the segmentation model under each backend (the numpy run happens in
a subprocess with MUCA_PURE_PYTHON=1, since the backend is fixed at import).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from muca import kernels
from muca.kernels import _conv_py

CASES = [
    # (N, C, H, W), k, stride, pad
    ((8, 3, 64, 64), 3, 2, 1),
    ((8, 16, 32, 32), 3, 1, 1),
    ((8, 16, 32, 32), 3, 2, 1),
    ((8, 64, 8, 8), 3, 1, 1),
    ((32, 128, 4, 4), 3, 1, 1),
]

STEP_SNIPPET = """
import time, numpy as np
from muca import kernels, tensor as T
from muca.model import SegModel
m = SegModel(seed=0)
x = np.random.default_rng(0).random((8, 3, 64, 64)).astype(np.float32)
y = np.random.default_rng(1).integers(0, 5, size=(8, 64, 64))
def step():
    out = m.forward(T.Tensor(x), "train", np.random.default_rng(0))
    T.backward(T.cross_entropy(out.logits, y))
    m.zero_grad()
step()
t = time.perf_counter()
for _ in range({repeat}):
    step()
print(kernels.BACKEND, (time.perf_counter() - t) / {repeat})
"""


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat):
    if kernels.BACKEND != "cython":
        print("compiled extension not available; only the numpy fallback is importable")
        return
    from muca.kernels import _conv_ext
    print(f"{'shape':>18} k s | {'im2col ext':>10} {'numpy':>8} | {'col2im ext':>10} {'numpy':>8}")
    for shape, k, s, p in CASES:
        x = np.random.default_rng(0).standard_normal(shape).astype(np.float32)
        cols = _conv_py.im2col(x, k, s, p)
        assert np.array_equal(cols, _conv_ext.im2col(x, k, s, p))
        times = [best_of(lambda: _conv_ext.im2col(x, k, s, p), repeat),
                 best_of(lambda: _conv_py.im2col(x, k, s, p), repeat),
                 best_of(lambda: _conv_ext.col2im(cols, shape, k, s, p), repeat),
                 best_of(lambda: _conv_py.col2im(cols, shape, k, s, p), repeat)]
        ms = [f"{1e3 * t:8.3f}ms" for t in times]
        print(f"{str(shape):>18} {k} {s} | {ms[0]:>10} {ms[1]:>8} | {ms[2]:>10} {ms[3]:>8}")


def bench_step(repeat):
    code = STEP_SNIPPET.format(repeat=repeat)
    for pure in ("0", "1"):
        env = dict(os.environ, MUCA_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        print(f"model fwd+bwd, batch 8 @64x64, backend {out[0]:>6}: {1e3 * float(out[1]):.1f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    bench_kernels(args.repeat)
    bench_step(max(3, args.repeat // 4))


if __name__ == "__main__":
    main()
