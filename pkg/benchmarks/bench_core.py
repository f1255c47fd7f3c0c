"""Compiled CAL core versus the numpy fallback.

Two measurements:
  * kernel: ``cal_exec`` on a random MADD-heavy stream, both backends in-process
  * end-to-end: one timed conv run, each backend in a fresh interpreter
    (``RISC_NN_PURE=1`` forces the fallback at import)

Usage: python benchmarks/bench_core.py [--length N] [--repeat R] [--layer NAME]
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from risc_nn import _core_py

try:
    from risc_nn import _core
except ImportError:  # extension not built
    _core = None

E2E = """
import time
from risc_nn import fastpath
from risc_nn.config import HardwareConfig
from risc_nn.kernels import conv_kernel
from risc_nn.uncore import host_run
cfg = HardwareConfig()
k = conv_kernel({layer!r}, "all_reuse")
p = k.translate(cfg)
t = time.perf_counter()
res = host_run(p)
print(fastpath.BACKEND, time.perf_counter() - t, res.cycles, not k.mismatches(res.read_region))
"""


def stream(length: int, simd: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    opm = rng.integers(0, 1 << 16, size=(2048, simd), dtype=np.uint16)
    ops = rng.choice(np.array([1, 2, 3, 4, 5, 6, 6, 6], dtype=np.int32), size=length).astype(np.int32)
    f0, f1, f2 = (rng.integers(0, 2048, size=length, dtype=np.int32) for _ in range(3))
    return opm, ops, f0, f1, f2


def time_kernel(fn, args, repeat: int) -> tuple[float, np.ndarray]:
    best = float("inf")
    out = None
    for _ in range(repeat):
        opm = args[0].copy()
        t = time.perf_counter()
        fn(opm, *args[1:])
        best = min(best, time.perf_counter() - t)
        out = opm
    return best, out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--length", type=int, default=20000)
    ap.add_argument("--simd", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--layer", default="conv12")
    args = ap.parse_args(argv)

    data = stream(args.length, args.simd)
    t_py, out_py = time_kernel(_core_py.cal_exec, data, args.repeat)
    print(f"kernel  python  {t_py * 1e3:9.2f} ms  ({args.length} CAL, simd {args.simd})")
    if _core is None:
        print("kernel  cython  not built (run: python setup.py build_ext --inplace)")
    else:
        t_cy, out_cy = time_kernel(_core.cal_exec, data, args.repeat)
        same = np.array_equal(out_py, out_cy)
        print(f"kernel  cython  {t_cy * 1e3:9.2f} ms  speedup {t_py / t_cy:6.1f}x  identical={same}")

    for pure in (True, False):
        env = dict(os.environ)
        env.pop("RISC_NN_PURE", None)
        if pure:
            env["RISC_NN_PURE"] = "1"
        r = subprocess.run([sys.executable, "-c", E2E.format(layer=args.layer)], env=env,
                           capture_output=True, text=True, check=True)
        backend, secs, cycles, ok = r.stdout.split()
        print(f"e2e     {backend:7s} {float(secs):9.2f} s   {args.layer} all_reuse, {cycles} cycles, ok={ok}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
