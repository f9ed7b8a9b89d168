"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--train-steps 5]

The first numba call per signature compiles (or loads the on-disk cache),
so every kernel gets one untimed warm-up per backend. Outputs of the two
backends are compared before timing.
"""

import argparse
import os
import time

import numpy as np

from channelkan._backend import BACKEND_ENV, NUMBA_AVAILABLE
from channelkan.numerics import kernels


def _cases(rng):
    x64 = rng.standard_normal((1024, 64)) + 1j * rng.standard_normal((1024, 64))
    x48 = rng.standard_normal((256, 48)) + 1j * rng.standard_normal((256, 48))
    xc = rng.standard_normal((512, 32, 16))
    wc = rng.standard_normal((16, 16, 3))
    bc = rng.standard_normal(16)
    gy = rng.standard_normal((512, 32, 16))
    xh = np.tanh(rng.standard_normal((32, 16 * 64)))
    coef = rng.standard_normal((5, 16 * 64))
    gc = rng.standard_normal((32, 16 * 64))
    g = rng.standard_normal((32, 4096))
    return {
        "fft_radix2 1024x64": lambda: kernels.fft_radix2(x64, False),
        "dft_naive 256x48": lambda: kernels.dft_naive(x48, False),
        "conv1d_forward 512x32x16": lambda: kernels.conv1d_forward(xc, wc, bc),
        "conv1d_backward 512x32x16": lambda: kernels.conv1d_backward(xc, wc, gy),
        "gelu 32x4096": lambda: kernels.gelu_forward(g),
        "chebyshev_forward M=4": lambda: kernels.chebyshev_forward(xh, coef),
        "chebyshev_backward M=4": lambda: kernels.chebyshev_backward(xh, coef, gc),
    }


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _flatten(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(o) for o in out])
    return np.ravel(out)


def _train_steps(n):
    from channelkan.evaluate import desk_system
    from channelkan.channel import build_dataset
    from channelkan.model import ModelConfig, init_params
    from channelkan.train import TrainConfig, train

    system = desk_system()
    data = build_dataset(64, 60.0, None, system, 16, 4, seed=1)
    cfg = ModelConfig(K=system.K, n_pairs=system.n_pairs)
    params = init_params(cfg, 0)
    tcfg = TrainConfig(epochs=1, batch_size=16)
    train(cfg, params, data.subset(range(16)), None, tcfg)  # warm-up
    t0 = time.perf_counter()
    for _ in range(n):
        train(cfg, params, data, None, tcfg)
    return (time.perf_counter() - t0) / n


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--train-steps", type=int, default=3, help="0 skips the end-to-end epoch timing")
    args = ap.parse_args()
    if not NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    cases = _cases(rng)
    saved = os.environ.get(BACKEND_ENV)
    results = {}
    try:
        for backend in ("numba", "numpy"):
            os.environ[BACKEND_ENV] = backend
            for name, fn in cases.items():
                results[(backend, name)] = (_time(fn, args.repeat), _flatten(fn()))
            if args.train_steps:
                results[(backend, "train epoch (64 windows)")] = (_train_steps(args.train_steps), None)
    finally:
        if saved is None:
            os.environ.pop(BACKEND_ENV, None)
        else:
            os.environ[BACKEND_ENV] = saved

    names = list(cases) + (["train epoch (64 windows)"] if args.train_steps else [])
    print(f"{'kernel':<28}{'numba ms':>11}{'numpy ms':>11}{'speedup':>9}{'max |diff|':>13}")
    for name in names:
        tn, on = results[("numba", name)]
        tp, op = results[("numpy", name)]
        diff = "" if on is None else f"{np.max(np.abs(on - op)):.1e}"
        print(f"{name:<28}{tn * 1e3:>11.3f}{tp * 1e3:>11.3f}{tp / tn:>9.2f}{diff:>13}")


if __name__ == "__main__":
    main()
