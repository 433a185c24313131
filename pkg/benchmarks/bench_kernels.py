"""Compare the numba kernels with their pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--end-to-end]

Kernel timings use both implementations in one process. ``--end-to-end``
also times a desk-scale training step in two subprocesses, one with
DISENTLAB_DISABLE_JIT=1, since that flag is read at import.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from disentlab import kernels
from disentlab._jit import HAVE_NUMBA


def _cases(rng):
    x = rng.uniform(size=(256, 64, 64, 3))
    cols = kernels.im2col_numpy(x, 3, 3, 2, 1)
    segs = rng.uniform(2, 26, size=(40, 4))
    tex = (64, np.array([3.0, 5.0]), np.array([0.3, 1.2]), np.array([0.1, 2.0]), np.array([1.0, 0.6]),
           np.array([0.1, 0.2, 0.3]), np.array([0.8, 0.7, 0.6]))
    return {
        "im2col 256x64x64x3 k3 s2": (kernels.im2col_numpy, kernels.im2col_jit, (x, 3, 3, 2, 1)),
        "col2im 256x64x64x3 k3 s2": (kernels.col2im_numpy, kernels.col2im_jit, (cols, 256, 64, 64, 3, 3, 3, 2, 1)),
        "rasterize 40 segments 28px": (kernels.rasterize_numpy, kernels.rasterize_jit, (segs, 1.4, 28)),
        "texture 64px": (kernels.texture_numpy, kernels.texture_jit, tex),
    }


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, (np_fn, jit_fn, args) in _cases(rng).items():
        jit_fn(*args)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: np_fn(*args), number=1, repeat=repeat))
        t_jit = min(timeit.repeat(lambda: jit_fn(*args), number=1, repeat=repeat))
        print(f"{name:32s} {1e3 * t_np:10.2f} {1e3 * t_jit:10.2f} {t_np / t_jit:8.2f}")


_STEP = """
import time, numpy as np
from disentlab import autodiff as ad, losses as L
from disentlab.model import init_params, encode, project
from disentlab._jit import backend_name
p = init_params(seed=0)
x = np.random.default_rng(0).uniform(size=(256, 64, 64, 3))
def step():
    z, _, _ = project(p, encode(p, x))
    ad.backward(L.sub_infomax(L.ContrastiveBatch.from_view_pairs(z, 0.1), L.SubembeddingLayout(2, 16)))
step()
ts = []
for _ in range({repeat}):
    t0 = time.perf_counter(); step(); ts.append(time.perf_counter() - t0)
print(backend_name(), min(ts))
"""


def bench_step(repeat):
    print("\ntraining step, batch of 128 view pairs at 64x64")
    for flag in ("0", "1"):
        env = dict(os.environ, DISENTLAB_DISABLE_JIT=flag)
        out = subprocess.run([sys.executable, "-c", _STEP.format(repeat=repeat)], env=env,
                             capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        print(f"  {backend:8s} {1e3 * float(secs):9.1f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()
    if not HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    bench_kernels(args.repeat)
    if args.end_to_end:
        bench_step(args.repeat)


if __name__ == "__main__":
    main()
