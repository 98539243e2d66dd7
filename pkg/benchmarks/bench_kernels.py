#!/usr/bin/env python3
"""Timing comparison of the compiled and pure-Python kernel backends.

Only two operators are loop-bound enough to ship a compiled implementation:
depthwise convolution (the high-pass filter path) and per-site adaptive 3x3
filtering (the guided upsampler). Everything else is BLAS-shaped and shares
one numpy implementation. This script times the two kernels head-to-head at
training-realistic sizes, then measures an end-to-end training step under
each backend in a subprocess (the backend is fixed at import time).

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--skip-e2e]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from sepseg import _kernels_np

try:
    from sepseg import _kernels_cy
except ImportError:
    _kernels_cy = None

def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    # Sizes match the default 64x64 training configuration: the separation
    # blocks run depthwise 5x5 at 16x16 on 128 expanded channels; the two
    # upsampling stages filter 64 channels in 8 groups at 8x8 and 16x16.
    x_dw = rng.standard_normal((8, 128, 16, 16)).astype(np.float32)
    w_dw = rng.standard_normal((128, 1, 5, 5)).astype(np.float32)
    go_dw = rng.standard_normal((8, 128, 16, 16)).astype(np.float32)
    x_saf = rng.standard_normal((8, 64, 16, 16)).astype(np.float32)
    saf = rng.random((8, 8, 4, 9, 16, 16)).astype(np.float32)
    go_saf = rng.standard_normal((8, 256, 16, 16)).astype(np.float32)

    cases = [
        ("depthwise fwd", lambda m: m.dw_conv2d_forward(x_dw, w_dw, 1, 2)),
        ("depthwise bwd", lambda m: m.dw_conv2d_backward(
            x_dw, w_dw, go_dw, 1, 2, True, True)),
        ("saf apply fwd", lambda m: m.saf_apply_forward(x_saf, saf)),
        ("saf apply bwd", lambda m: m.saf_apply_backward(
            x_saf, saf, go_saf, True, True)),
    ]
    rows = []
    for name, call in cases:
        t_py = best_of(lambda: call(_kernels_np), repeats)
        if _kernels_cy is not None:
            t_cy = best_of(lambda: call(_kernels_cy), repeats)
            rows.append((name, t_py, t_cy, t_py / t_cy))
        else:
            rows.append((name, t_py, None, None))
    return rows


def bench_end_to_end():
    script = (
        "import time\n"
        "from sepseg import tensor as T\n"
        "from sepseg.backend import BACKEND_NAME\n"
        "from sepseg.config import load_config\n"
        "from sepseg.gradcheck import make_batch\n"
        "import numpy as np\n"
        "from sepseg.model import build_model\n"
        "from sepseg.train import AdamW, compute_losses\n"
        "cfg = load_config('configs/default.cfg')\n"
        "model = build_model(cfg)\n"
        "opt = AdamW(model.param_groups(), weight_decay=cfg.weight_decay)\n"
        "images, labels = make_batch(cfg, cfg.batch_size, dtype=np.float32)\n"
        "times = []\n"
        "for _ in range(4):\n"
        "    t0 = time.perf_counter()\n"
        "    with T.Tape():\n"
        "        report, _ = compute_losses(model, images, labels)\n"
        "        T.backward(report.total)\n"
        "    opt.step(1e-3)\n"
        "    model.zero_grad()\n"
        "    times.append(time.perf_counter() - t0)\n"
        "print(BACKEND_NAME, min(times))\n"
    )
    results = {}
    for backend in ("python", "cython"):
        env = dict(os.environ, SEPSEG_KERNELS=backend)
        proc = subprocess.run([sys.executable, "-c", script], env=env,
                              capture_output=True, text=True,
                              cwd=os.path.dirname(os.path.dirname(
                                  os.path.abspath(__file__))))
        if proc.returncode:
            print(f"  {backend}: failed\n{proc.stderr.strip()}")
            continue
        name, t = proc.stdout.split()
        assert name == backend, f"backend selection leak: {proc.stdout!r}"
        results[backend] = float(t)
    return results


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5,
                    help="timing repeats per kernel (best-of)")
    ap.add_argument("--skip-e2e", action="store_true",
                    help="skip the subprocess end-to-end step timing")
    args = ap.parse_args(argv)

    if _kernels_cy is None:
        print("compiled extension not built; timing pure-Python only "
              "(run: python3 setup.py build_ext --inplace)")

    print(f"{'kernel':<16} {'python':>10} {'cython':>10} {'speedup':>8}")
    for name, t_py, t_cy, ratio in bench_kernels(args.repeats):
        cy = f"{t_cy * 1e3:8.2f}ms" if t_cy is not None else "       n/a"
        sp = f"{ratio:7.1f}x" if ratio is not None else "     n/a"
        print(f"{name:<16} {t_py * 1e3:8.2f}ms {cy} {sp}")

    if not args.skip_e2e and _kernels_cy is not None:
        print("\nend-to-end training step (default config, batch "
              "8 @ 64x64, forward+backward+update):")
        results = bench_end_to_end()
        for backend, t in results.items():
            print(f"  {backend:<8} {t:.3f} s/step")
        if len(results) == 2:
            print(f"  speedup  {results['python'] / results['cython']:.1f}x")


if __name__ == "__main__":
    main()
