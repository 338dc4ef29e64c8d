"""Compare the compiled and pure-NumPy convolution kernels.

Times im2col / col2im at the shapes of the toy network's first layers and
one full forward + backward step, once per available backend.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
import argparse
import json
import time

import numpy as np

from munet import kernels
from munet import losses as L
from munet.network import NetworkConfig, build_network

CASES = [
    # (B, C, H, W, k, stride, pad)
    (8, 1, 256, 256, 4, 2, 1),
    (8, 4, 128, 128, 4, 2, 1),
    (8, 16, 32, 32, 4, 2, 1),
    (8, 64, 4, 4, 3, 1, 1),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_kernel_cases(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for B, C, H, W, k, s, p in CASES:
        x = rng.standard_normal((B, C, H, W)).astype(np.float32)
        cols = kernels.im2col(x, k, k, s, p)
        row = {"shape": [B, C, H, W], "kernel": k, "stride": s}
        for name in kernels.available_backends():
            with kernels.use_backend(name):
                row[f"im2col_{name}"] = best_of(lambda: kernels.im2col(x, k, k, s, p), repeat)
                row[f"col2im_{name}"] = best_of(lambda: kernels.col2im(cols, x.shape, k, k, s, p), repeat)
        rows.append(row)
    return rows


def bench_train_step(repeat):
    rng = np.random.default_rng(0)
    x = rng.normal(-2, 2, size=(8, 1, 256, 256)).astype(np.float32)
    mix = np.exp(x)
    src = mix[:, [0, 0]] * 0.5
    net = build_network(NetworkConfig(seed=0))

    def step():
        est = net(x, train_mode=True)
        per = L.task_losses(est, "indirect", source_mags=src, mixture_mags=mix)
        L.total_loss(per, np.ones(2)).backward()
        net.zero_grad()

    out = {}
    for name in kernels.available_backends():
        with kernels.use_backend(name):
            out[name] = best_of(step, repeat)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()
    rows = bench_kernel_cases(args.repeat)
    print(f"backends: {kernels.available_backends()}")
    for r in rows:
        line = f"{str(r['shape']):>20s} k={r['kernel']} s={r['stride']}"
        for op in ("im2col", "col2im"):
            for name in kernels.available_backends():
                line += f"  {op}[{name}] {1e3 * r[f'{op}_{name}']:8.2f} ms"
        print(line)
    step = bench_train_step(max(1, args.repeat // 2))
    print("toy net forward+backward, batch 8 at 256x256: "
          + ", ".join(f"{k} {v:.3f} s" for k, v in step.items()))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": rows, "train_step": step}, fh, indent=1)


if __name__ == "__main__":
    main()
