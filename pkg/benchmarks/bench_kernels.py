"""Benchmark the compiled ensemble-step kernel against the numpy fallback.

Runs the fused exp/multiply/shift step on a representative ensemble and
reports milliseconds per step for each available backend, plus their maximum
relative disagreement on identical inputs.

Usage:
    python3 benchmarks/bench_kernels.py [--paths N] [--points N] [--reps N]
"""

import argparse
import time

import numpy as np

from bondlab import _kernels_py


def load_backends():
    """Returns the list of (name, module) kernel backends available."""
    backends = [("python", _kernels_py)]
    try:
        from bondlab import _kernels

        backends.insert(0, ("compiled", _kernels))
    except ImportError:
        pass
    return backends


def bench(mod, states, expo, fill, out, reps):
    """Returns milliseconds per step for one backend.

    The exponent buffer is refreshed before each call because the kernel
    overwrites it in place, mirroring how the simulator reuses buffers.
    """
    work = expo.copy()
    mod.step_exp_shift(states, work, fill, 1, 0.25, out)
    start = time.perf_counter()
    for _ in range(reps):
        work[:] = expo
        mod.step_exp_shift(states, work, fill, 1, 0.25, out)
    return (time.perf_counter() - start) / reps * 1e3


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--paths", type=int, default=4000)
    parser.add_argument("--points", type=int, default=1025)
    parser.add_argument("--reps", type=int, default=30)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    states = np.exp(rng.normal(0.0, 0.01, (args.paths, args.points)))
    expo = rng.normal(0.0, 0.002, (args.paths, args.points))
    fill = np.exp(rng.normal(0.0, 0.01, args.paths))

    backends = load_backends()
    outputs = {}
    print(f"ensemble {args.paths} paths x {args.points} points, {args.reps} reps")
    for name, mod in backends:
        out = np.empty_like(states)
        ms = bench(mod, states, expo, fill, out, args.reps)
        outputs[name] = out.copy()
        print(f"  {name:>8}: {ms:8.3f} ms/step")

    if len(outputs) == 2:
        a, b = outputs["compiled"], outputs["python"]
        rel = np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))
        print(f"  max relative backend difference: {rel:.3e}")


if __name__ == "__main__":
    main()
