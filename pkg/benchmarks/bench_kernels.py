"""Time the numba kernels against their numpy reference versions.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both paths are imported directly, so the BITRANSFER_NUMBA flag does not
matter here.  Each kernel's outputs are compared before timing.
"""
import argparse
import timeit

import numpy as np

from bitransfer import _kernels as K


def cases(rng):
    z = rng.normal(size=(8192, 4))
    g = rng.normal(size=z.shape)
    s = K.softmax_rows_np(z)
    ls = K.log_softmax_rows_np(z)
    p = rng.normal(size=64 * 64)
    grad = rng.normal(size=p.size)
    gt = rng.integers(0, 3, size=200 * 64)
    pred = rng.integers(0, 3, size=gt.size)

    def adam(fn):
        def run():
            q, m, v = p.copy(), np.zeros_like(p), np.zeros_like(p)
            fn(q, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, 1e-5, 1)
            return q
        return run

    return {
        "log_softmax_rows": (lambda: K.log_softmax_rows_np(z), lambda: K.log_softmax_rows_nb(z)),
        "softmax_rows": (lambda: K.softmax_rows_np(z), lambda: K.softmax_rows_nb(z)),
        "softmax_grad_rows": (lambda: K.softmax_grad_rows_np(s, g), lambda: K.softmax_grad_rows_nb(s, g)),
        "log_softmax_grad_rows": (lambda: K.log_softmax_grad_rows_np(ls, g),
                                  lambda: K.log_softmax_grad_rows_nb(ls, g)),
        "adam_update": (adam(K.adam_update_np), adam(K.adam_update_nb)),
        "confusion_matrix": (lambda: K.confusion_matrix_np(gt, pred, 3),
                             lambda: K.confusion_matrix_nb(gt, pred, 3)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        print("numba is not installed; only the numpy path exists")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, (f_np, f_nb) in cases(rng).items():
        a, b = f_np(), f_nb()  # also compiles the numba version
        diff = float(np.max(np.abs(np.asarray(a, float) - np.asarray(b, float))))
        t_np = min(timeit.repeat(f_np, number=args.repeat, repeat=3)) / args.repeat * 1e6
        t_nb = min(timeit.repeat(f_nb, number=args.repeat, repeat=3)) / args.repeat * 1e6
        print(f"{name:24s} {t_np:10.1f} {t_nb:10.1f} {t_np / t_nb:8.2f} {diff:11.2e}")


if __name__ == "__main__":
    main()
