"""Compare the compiled and numpy kernel backends, plus one training step.

    python3 benchmarks/bench_kernels.py [--repeat 5]

The kernel table imports both backends directly. The training-step timing
runs the model under each backend in a subprocess, because the backend is
chosen once at import time (``TRIHORN_PURE_PYTHON=1`` forces numpy).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from trihorn import _pykernels

try:
    from trihorn import _ckernels
except ImportError:  # extension not built
    _ckernels = None

# (label, N, H, W, C, k, stride, pad): shapes seen by the default preset
CASES = [
    ("stem 3x3 s1, 128px", 32, 128, 128, 1, 3, 1, 1),
    ("enc 3x3 s2, 64px", 32, 64, 64, 16, 3, 2, 1),
    ("enc 3x3 s1, 32px", 32, 32, 32, 16, 3, 1, 1),
    ("head 3x3 s1, 64px", 32, 64, 64, 16, 3, 1, 1),
]

STEP_SNIPPET = """
import time, numpy as np
from trihorn.config import preset_config
from trihorn.model import build_model, compute_losses
from trihorn.kernels import BACKEND
cfg = preset_config("default")
m = build_model(cfg.model_spec(), seed=0)
rng = np.random.default_rng(0)
x = rng.uniform(-1, 1, (8, 1, 128, 128)).astype(np.float32)
y = np.concatenate([rng.uniform(0, 127, (8, 14, 2)), rng.uniform(-1, 1, (8, 14, 1))], -1)
best = 1e9
for _ in range({repeat}):
    t = time.perf_counter()
    compute_losses(m, x, y)[1]["loss"].backward()
    m.zero_grad()
    best = min(best, time.perf_counter() - t)
print(BACKEND, best)
"""


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(repeat):
    rows = []
    for label, N, H, W, C, k, s, p in CASES:
        x = np.random.default_rng(0).standard_normal((N, H, W, C)).astype(np.float32)
        py_cols = _pykernels.im2col(x, k, s, p)
        entry = [label, best_of(lambda: _pykernels.im2col(x, k, s, p), repeat),
                 best_of(lambda: _pykernels.col2im(py_cols, x.shape, k, s, p), repeat)]
        if _ckernels is not None:
            assert np.array_equal(_ckernels.im2col(x, k, s, p), py_cols)
            entry += [best_of(lambda: _ckernels.im2col(x, k, s, p), repeat),
                      best_of(lambda: _ckernels.col2im(py_cols, x.shape, k, s, p), repeat)]
        rows.append(entry)
    x = np.random.default_rng(1).standard_normal((32, 16, 64, 64)).astype(np.float32)
    out, arg = _pykernels.maxpool2(x)
    entry = ["maxpool2 fwd+bwd, 64px", best_of(lambda: _pykernels.maxpool2(x), repeat),
             best_of(lambda: _pykernels.maxpool2_backward(out, arg), repeat)]
    if _ckernels is not None:
        entry += [best_of(lambda: _ckernels.maxpool2(x), repeat),
                  best_of(lambda: _ckernels.maxpool2_backward(out, arg), repeat)]
    rows.append(entry)
    return rows


def step_time(pure: bool, repeat: int):
    env = dict(os.environ, TRIHORN_PURE_PYTHON="1" if pure else "0")
    res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env,
                         capture_output=True, text=True, check=True)
    backend, seconds = res.stdout.split()
    return backend, float(seconds)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    print(f"{'kernel':26s} {'numpy fwd':>10s} {'numpy adj':>10s} {'cython fwd':>11s} {'cython adj':>11s} {'speedup':>8s}")
    for row in kernel_table(args.repeat):
        label, pf, pb = row[:3]
        if len(row) == 5:
            cf, cb = row[3:]
            print(f"{label:26s} {pf * 1e3:9.2f}ms {pb * 1e3:9.2f}ms {cf * 1e3:10.2f}ms {cb * 1e3:10.2f}ms "
                  f"{(pf + pb) / (cf + cb):7.2f}x")
        else:
            print(f"{label:26s} {pf * 1e3:9.2f}ms {pb * 1e3:9.2f}ms {'(not built)':>11s}")

    print("\nforward+backward, default preset, batch 8, 128px:")
    for pure in (True, False):
        backend, sec = step_time(pure, args.repeat)
        print(f"  {backend:7s} {sec * 1e3:8.1f} ms")


if __name__ == "__main__":
    main()
