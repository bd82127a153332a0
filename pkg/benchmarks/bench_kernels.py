"""Compare the compiled (Cython) and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Kernel timings call both backends directly in one process.  The training
step timing runs a tiny3d forward/backward in subprocesses, one per
backend, because the backend is fixed at import time.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from cov3d import _pykernels

try:
    from cov3d import _ckernels
except ImportError:  # pragma: no cover - depends on build
    _ckernels = None

STEP_SNIPPET = """
import time, numpy as np
from cov3d import kernels, ops
from cov3d.model import build_model, preset
from cov3d.tensor import Tensor
model = build_model(preset("tiny3d"), init_seed=0)
model.train()
x = Tensor(np.random.default_rng(0).random((2, 1, 16, 32, 32), dtype=np.float32))
times = []
for _ in range({repeat}):
    t = time.perf_counter()
    ops.cross_entropy(model(x), [0, 1]).backward()
    times.append(time.perf_counter() - t)
print(kernels.BACKEND, min(times))
"""


def kernel_cases(rng):
    x = rng.standard_normal((2, 16, 18, 34, 34)).astype(np.float32)
    od, oh, ow = 16, 32, 32
    cols = _pykernels.vol2col(x, 3, 3, 3, 1, 1, 1, od, oh, ow)
    pool_in = rng.standard_normal((2, 16, 16, 32, 32)).astype(np.float32)
    _, arg = _pykernels.maxpool_forward(pool_in, 2, 2, 2, 2, 2, 2, 8, 16, 16)
    gout = rng.standard_normal((2, 16, 8, 16, 16)).astype(np.float32)
    vol = rng.random((48, 64, 64), dtype=np.float32)
    return {
        "vol2col 3x3x3 (2,16,18,34,34)": lambda k: k.vol2col(x, 3, 3, 3, 1, 1, 1, od, oh, ow),
        "col2vol 3x3x3 (2,16,18,34,34)": lambda k: k.col2vol(cols, 18, 34, 34, 1, 1, 1),
        "maxpool fwd 2x2x2 (2,16,16,32,32)": lambda k: k.maxpool_forward(pool_in, 2, 2, 2, 2, 2, 2, 8, 16, 16),
        "maxpool bwd 2x2x2 (2,16,16,32,32)": lambda k: k.maxpool_backward(gout, arg, 16, 32, 32),
        "resize (48,64,64)->(128,256,256)": lambda k: k.resize_trilinear(vol, 128, 256, 256),
    }


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def training_step(backend, repeat):
    env = dict(os.environ)
    if backend == "python":
        env["COV3D_PURE_PYTHON"] = "1"
    else:
        env.pop("COV3D_PURE_PYTHON", None)
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    if out[0] != backend:
        raise RuntimeError(f"expected backend {backend}, subprocess used {out[0]}")
    return float(out[1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1

    rows = []
    for name, call in kernel_cases(np.random.default_rng(0)).items():
        py = best_of(lambda: call(_pykernels), args.repeat)
        cy = best_of(lambda: call(_ckernels), args.repeat)
        rows.append({"case": name, "numpy_s": py, "cython_s": cy})
    step = {f"{name}_s": training_step(backend, args.repeat) for name, backend in (("numpy", "python"), ("cython", "cython"))}
    rows.append({"case": "tiny3d fwd+bwd batch 2 (16,32,32)", **step})

    print(f"{'case':40s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for r in rows:
        print(f"{r['case']:40s} {1e3 * r['numpy_s']:10.2f} {1e3 * r['cython_s']:10.2f} "
              f"{r['numpy_s'] / r['cython_s']:7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
