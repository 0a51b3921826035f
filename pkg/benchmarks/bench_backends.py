#!/usr/bin/env python3
"""Compare the compiled kernel core against the pure-Python fallback.

Times the hot kernels on training-shaped inputs, then an end-to-end
supervised fit under each backend (the fallback runs in a subprocess with
MARKERMAP_PURE_PYTHON=1 since the backend is chosen at import time).

Usage: python benchmarks/bench_backends.py [--skip-fit]
"""

import argparse
import json
import os
import subprocess
import sys
import time
from array import array

from markermap._core import pure
from markermap.rng import Rng

try:
    from markermap._core import _native as native
except ImportError:
    native = None

# batch 64, d=100 features, hidden 64: the shapes one training step touches
N, D, H = 64, 100, 64


def make_buffers():
    rng = Rng(0)
    return {
        "x": rng.normals(N * D),
        "w": rng.normals(D * H),
        "h": rng.normals(N * H),
        "g": rng.normals(N * H),
        "vec": rng.normals(N * H),
        "cols": rng.normals(H),
        "cols2": rng.normals(H),
        "pos": array("d", [abs(v) + 0.1 for v in rng.normals(N * H)]),
        "out_nh": array("d", bytes(8 * N * H)),
        "out_nd": array("d", bytes(8 * N * D)),
        "out_h": array("d", bytes(8 * H)),
        "m": array("d", bytes(8 * N * H)),
        "v": array("d", bytes(8 * N * H)),
    }


CASES = [
    ("matmul (64x100 @ 100x64)", "matmul_acc",
     lambda b: (b["x"], b["w"], b["out_nh"], N, D, H)),
    ("matmul_abt (64x64 @ 64x64^T)", "matmul_abt_acc",
     lambda b: (b["h"], b["g"], b["out_nh"], N, H, H)),
    ("matmul_atb (64x100^T @ 64x64)", "matmul_atb_acc",
     lambda b: (b["x"], b["h"], array("d", bytes(8 * D * H)), N, D, H)),
    ("softmax rows (64x64)", "softmax_rows",
     lambda b: (b["h"], 0.5, b["out_nh"], N, H)),
    ("batch-norm forward (64x64)", "bn_train_forward",
     lambda b: (b["h"], array("d", [1.0] * H), array("d", bytes(8 * H)), 1e-5,
                b["out_nh"], array("d", bytes(8 * N * H)),
                array("d", bytes(8 * H)), array("d", bytes(8 * H)), N, H)),
    ("leaky relu (4096)", "leaky_relu",
     lambda b: (b["h"], 0.01, b["out_nh"], N * H)),
    ("adam step (4096 params)", "adam_step",
     lambda b: (b["vec"], b["g"], b["m"], b["v"],
                1e-3, 0.9, 0.999, 1e-8, 0.9, 0.999, N * H)),
    ("column mean/var (64x64)", "col_mean_var",
     lambda b: (b["h"], array("d", bytes(8 * H)), array("d", bytes(8 * H)), N, H)),
]


def time_kernel(module, name, make_args, repeats):
    buffers = make_buffers()
    args = make_args(buffers)
    fn = getattr(module, name)
    fn(*args)  # warm up
    started = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - started) / repeats


_FIT_SNIPPET = """
import json, time
from markermap._core import backend_name
from markermap.data import SyntheticSpec, synthesize, preprocess, split
from markermap.model import MarkerMapModel, TrainConfig, fit

spec = SyntheticSpec(n=%(n)d, d=100, classes=4, planted=5, delta=4.0, seed=0)
ds = preprocess(synthesize(spec), "classification", log_transform=False)
sp = split(ds, 0)
cfg = TrainConfig(mode="supervised", k=5, hidden=64, seed=0, learning_rate=1e-3,
                  min_epochs=%(epochs)d, max_epochs=%(epochs)d)
m = MarkerMapModel.build(ds.n_genes, ds.n_classes, cfg)
t0 = time.perf_counter()
rep = fit(m, ds, sp, cfg)
print(json.dumps({"backend": backend_name(), "seconds": time.perf_counter() - t0,
                  "markers": rep.markers}))
"""


def run_fit(pure_python, n, epochs):
    env = dict(os.environ)
    env.pop("MARKERMAP_PURE_PYTHON", None)
    if pure_python:
        env["MARKERMAP_PURE_PYTHON"] = "1"
    out = subprocess.run(
        [sys.executable, "-c", _FIT_SNIPPET % {"n": n, "epochs": epochs}],
        capture_output=True, text=True, env=env, check=True,
    )
    return json.loads(out.stdout)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--skip-fit", action="store_true",
                        help="only run the kernel microbenchmarks")
    args = parser.parse_args()

    if native is None:
        print("compiled core not built; showing pure-Python timings only")
    print(f"{'kernel':36s} {'pure':>12s} {'native':>12s} {'speedup':>9s}")
    for label, name, make_args in CASES:
        t_pure = time_kernel(pure, name, make_args, repeats=3)
        if native is not None:
            t_native = time_kernel(native, name, make_args, repeats=200)
            print(f"{label:36s} {t_pure * 1e3:10.3f}ms {t_native * 1e3:10.3f}ms "
                  f"{t_pure / t_native:8.0f}x")
        else:
            print(f"{label:36s} {t_pure * 1e3:10.3f}ms {'-':>12s} {'-':>9s}")

    if args.skip_fit or native is None:
        return
    print()
    n, epochs = 400, 8
    compiled = run_fit(False, n, epochs)
    fallback = run_fit(True, n, epochs)
    same = compiled["markers"] == fallback["markers"]
    print(f"end-to-end fit (n={n}, d=100, {epochs} epochs):")
    print(f"  native {compiled['seconds']:.2f}s   pure {fallback['seconds']:.2f}s   "
          f"speedup {fallback['seconds'] / compiled['seconds']:.0f}x   "
          f"identical markers: {same}")


if __name__ == "__main__":
    main()
