"""Benchmark the two convolution backends (compiled vs pure numpy).

Runs each kernel in a subprocess with SSCL_NUMBA set accordingly, so both
paths are measured exactly as the package would use them. Usage:

    python3 benchmarks/bench_conv.py

Representative shapes mirror real workloads: the single-channel feature
extractor (many small images, 3x3 kernels) and the encoder-decoder trunk
(fewer images, wide channel counts).
"""

from __future__ import annotations

import json
import os
import subprocess
import sys

CASES = [
    # (name, B, Cin, H, W, Cout, k, stride)
    ("fe 3x3", 64, 1, 34, 34, 16, 3, 1),
    ("fe block", 64, 16, 34, 34, 16, 3, 1),
    ("trunk reduce 1x1", 8, 128, 64, 64, 32, 1, 1),
    ("enc 3x3 s2", 8, 32, 66, 66, 64, 3, 2),
    ("dec 3x3", 8, 64, 34, 34, 32, 3, 1),
]

_WORKER = r"""
import json, sys, time
import numpy as np
from sscl import backend

name, b, cin, h, w, cout, k, stride = json.loads(sys.argv[1])
rng = np.random.default_rng(0)
x = rng.standard_normal((b, cin, h, w)).astype(np.float32)
wt = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
y = backend.conv2d(x, wt, stride)  # warmup / jit compile
gy = rng.standard_normal(y.shape).astype(np.float32)
backend.conv2d_grad_w(x, gy, k, k, stride)
backend.conv2d_grad_x(gy, wt, h, w, stride)

def best_of(f, reps=5):
    t = []
    for _ in range(reps):
        t0 = time.perf_counter()
        f()
        t.append(time.perf_counter() - t0)
    return min(t)

ho, wo = y.shape[2], y.shape[3]
flops = 2 * b * cout * ho * wo * cin * k * k
res = {
    "backend": backend.active_backend(),
    "fwd_s": best_of(lambda: backend.conv2d(x, wt, stride)),
    "dw_s": best_of(lambda: backend.conv2d_grad_w(x, gy, k, k, stride)),
    "dx_s": best_of(lambda: backend.conv2d_grad_x(gy, wt, h, w, stride)),
    "flops": flops,
}
print(json.dumps(res))
"""


def run_case(case, use_numba: bool) -> dict:
    env = dict(os.environ, SSCL_NUMBA="1" if use_numba else "0")
    out = subprocess.run(
        [sys.executable, "-c", _WORKER, json.dumps(case)],
        capture_output=True, text=True, env=env, check=True,
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


def main() -> None:
    print(f"{'case':<18} {'kernel':<5} {'numba':>10} {'numpy':>10} "
          f"{'speedup':>8} {'numba GFLOP/s':>14}")
    for case in CASES:
        nb = run_case(case, True)
        np_ = run_case(case, False)
        for kern in ("fwd", "dw", "dx"):
            t_nb, t_np = nb[f"{kern}_s"], np_[f"{kern}_s"]
            gflops = nb["flops"] / t_nb / 1e9
            print(f"{case[0]:<18} {kern:<5} {t_nb * 1e3:8.2f}ms {t_np * 1e3:8.2f}ms "
                  f"{t_np / t_nb:7.2f}x {gflops:13.1f}")


if __name__ == "__main__":
    main()
