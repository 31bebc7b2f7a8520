"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N] [--no-e2e]

Per-kernel timings compare both implementations in-process.  The end-to-end
timing trains one client round in a subprocess per backend, since the
backend is fixed when the package is imported.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedsim import _kernels

E2E = """
import time
from fedsim import _kernels
from fedsim.client import ClientConfig, train_round
from fedsim.datagen import default_benchmark, generate
from fedsim.model import ModelSpec, init_params
spec = ModelSpec()
ds = generate(default_benchmark(1)[0])
cfg = ClientConfig(local_epochs=2, lr=5e-3)
p = init_params(spec, 0)
train_round(p, ds, cfg, 1, spec)  # compile / warm caches
t = time.perf_counter()
for r in range(3):
    train_round(p, ds, cfg, r + 1, spec)
print(_kernels.BACKEND, (time.perf_counter() - t) / 3)
"""


def kernel_cases(rng):
    images = rng.normal(size=(4, 32, 32))
    logits = rng.normal(size=(4 * 32 * 32, 3))
    labels = rng.integers(0, 3, logits.shape[0])
    mask = np.ones(3, dtype=bool)
    p, g = rng.normal(size=467), rng.normal(size=467)
    return {
        "extract_patches": lambda impl: impl.extract_patches(images, 2),
        "softmax_head": lambda impl: impl.softmax_head(logits, labels, mask, 1e-5),
        "adam_step": lambda impl: impl.adam_step(p.copy(), g, np.zeros(467), np.zeros(467),
                                                 1e-3, 0.9, 0.999, 1e-8, 1),
    }


def bench_kernels(repeat):
    impls = [_kernels.numpy_impl]
    if _kernels.numba_impl is not None:
        impls.append(_kernels.numba_impl)
    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':<18}" + "".join(f"{i.name:>14}" for i in impls) + f"{'speedup':>10}")
    for name, fn in cases.items():
        times = []
        for impl in impls:
            fn(impl)  # trigger compilation outside the timed region
            times.append(min(timeit.repeat(lambda: fn(impl), number=20, repeat=repeat)) / 20)
        speed = f"{times[0] / times[-1]:>9.1f}x" if len(times) > 1 else ""
        print(f"{name:<18}" + "".join(f"{t * 1e6:>12.1f}us" for t in times) + speed)


def bench_end_to_end():
    print("\none local round (48 cases, 2 epochs):")
    for disabled in ("1", "0"):
        env = dict(os.environ, FEDSIM_DISABLE_NUMBA=disabled)
        out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        print(f"  {backend:<8} {float(secs):.3f}s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--no-e2e", action="store_true")
    args = ap.parse_args()
    bench_kernels(args.repeat)
    if not args.no_e2e:
        bench_end_to_end()


if __name__ == "__main__":
    main()
