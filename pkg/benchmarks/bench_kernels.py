#!/usr/bin/env python3
"""Timing comparison of the NumPy and compiled kernel backends.

Imports both implementations directly (bypassing the import-time selection)
and times each kernel on shapes representative of desk-scale training:
loss batches of 64 rows, reference-set ensembling, and optimizer updates
over a ~53k-parameter vector.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""
import argparse
import timeit

import numpy as np

from fedmarket._kernels import BACKEND, _np

try:
    from fedmarket._kernels import _ck
except ImportError:
    _ck = None


def time_call(fn, repeats):
    timer = timeit.Timer(fn)
    number = max(1, timer.autorange()[0] // 10)
    return min(timer.repeat(repeat=repeats, number=number)) / number


def cases(rng):
    batch_small = np.ascontiguousarray(rng.normal(size=(64, 4)))
    batch_wide = np.ascontiguousarray(rng.normal(size=(64, 62)))
    labels_small = rng.integers(0, 4, size=64)
    labels_wide = rng.integers(0, 62, size=64)
    teacher_small = _np.softmax_rows(np.ascontiguousarray(rng.normal(size=(64, 4))), 1.0)
    teacher_wide = _np.softmax_rows(np.ascontiguousarray(rng.normal(size=(64, 62))), 1.0)
    stack = np.ascontiguousarray(rng.normal(size=(10, 2000, 10)))
    weights = rng.dirichlet(np.ones(10))
    p = rng.normal(size=53_091)
    g = rng.normal(size=53_091)
    m = np.zeros_like(p)
    v = np.zeros_like(p)

    yield "softmax_rows 64x4", lambda impl: impl.softmax_rows(batch_small, 2.0)
    yield "softmax_rows 64x62", lambda impl: impl.softmax_rows(batch_wide, 2.0)
    yield "ce_loss_grad 64x4", lambda impl: impl.ce_loss_grad(batch_small, labels_small)
    yield "ce_loss_grad 64x62", lambda impl: impl.ce_loss_grad(batch_wide, labels_wide)
    yield "kl_loss_grad 64x4", lambda impl: impl.kl_loss_grad(batch_small, teacher_small, 2.0)
    yield "kl_loss_grad 64x62", lambda impl: impl.kl_loss_grad(batch_wide, teacher_wide, 2.0)
    yield "ensemble 10x2000x10", lambda impl: impl.ensemble_probs(stack, weights, 2.0)
    yield "adam_update P=53k", lambda impl: impl.adam_update(
        p, g, m, v, 5, 1e-3, 0.9, 0.999, 1e-8
    )
    yield "sgd_update P=53k", lambda impl: impl.sgd_update(p, g, 1e-3)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    print(f"default backend for this process: {BACKEND}")
    if _ck is None:
        print("compiled extension not built; timing the NumPy backend only")
    rng = np.random.default_rng(0)
    header = f"{'kernel':24s} {'numpy (us)':>12s} {'cython (us)':>12s} {'speedup':>9s}"
    print(header)
    print("-" * len(header))
    for name, call in cases(rng):
        t_np = time_call(lambda: call(_np), args.repeats) * 1e6
        if _ck is not None:
            t_ck = time_call(lambda: call(_ck), args.repeats) * 1e6
            print(f"{name:24s} {t_np:12.2f} {t_ck:12.2f} {t_np / t_ck:8.2f}x")
        else:
            print(f"{name:24s} {t_np:12.2f} {'-':>12s} {'-':>9s}")


if __name__ == "__main__":
    main()
