"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba versions are used when numba imports cleanly and the environment
variable ``BITRANSFER_NUMBA`` is not set to a false value ("0", "false",
"off", "no").  Both implementations are always importable under explicit
names (``*_np`` / ``*_nb``) so tests and the benchmark can compare them.

All kernels expect C-contiguous float64 arrays (int64 for label arrays).
"""
import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _flag_enabled(value):
    return value.strip().lower() not in ("0", "false", "off", "no")


USE_NUMBA = HAVE_NUMBA and _flag_enabled(os.environ.get("BITRANSFER_NUMBA", "1"))


# ---------------------------------------------------------------------------
# numpy reference implementations
# ---------------------------------------------------------------------------

def log_softmax_rows_np(z):
    # shift by the row max; that term contributes exactly 1 to the sum, so
    # log1p over the others keeps precision when one logit dominates
    top = z.argmax(axis=1)
    rows = np.arange(z.shape[0])
    shifted = z - z[rows, top][:, None]
    e = np.exp(shifted)
    e[rows, top] = 0.0
    return shifted - np.log1p(e.sum(axis=1))[:, None]


def softmax_rows_np(z):
    e = np.exp(z - z.max(axis=1)[:, None])
    return e / e.sum(axis=1)[:, None]


def softmax_grad_rows_np(s, g):
    # vector-Jacobian product of row softmax: s * (g - <g, s>)
    return s * (g - (g * s).sum(axis=1)[:, None])


def log_softmax_grad_rows_np(ls, g):
    return g - np.exp(ls) * g.sum(axis=1)[:, None]


def adam_update_np(p, g, m, v, lr, beta1, beta2, eps, weight_decay, step):
    """In-place Adam step with decoupled weight decay on flat arrays."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)


def confusion_matrix_np(gt, pred, n_classes):
    """Counts with rows indexed by ground truth and columns by prediction."""
    flat = gt.astype(np.int64) * n_classes + pred.astype(np.int64)
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def log_softmax_rows_nb(z):
        n, c = z.shape
        out = np.empty((n, c))
        for i in range(n):
            top = 0
            for j in range(1, c):
                if z[i, j] > z[i, top]:
                    top = j
            m = z[i, top]
            acc = 0.0
            for j in range(c):
                out[i, j] = z[i, j] - m
                if j != top:
                    acc += np.exp(out[i, j])
            lse = np.log1p(acc)
            for j in range(c):
                out[i, j] -= lse
        return out

    @njit(cache=True)
    def softmax_rows_nb(z):
        n, c = z.shape
        out = np.empty((n, c))
        for i in range(n):
            m = z[i, 0]
            for j in range(1, c):
                if z[i, j] > m:
                    m = z[i, j]
            acc = 0.0
            for j in range(c):
                e = np.exp(z[i, j] - m)
                out[i, j] = e
                acc += e
            for j in range(c):
                out[i, j] /= acc
        return out

    @njit(cache=True)
    def softmax_grad_rows_nb(s, g):
        n, c = s.shape
        out = np.empty((n, c))
        for i in range(n):
            dot = 0.0
            for j in range(c):
                dot += g[i, j] * s[i, j]
            for j in range(c):
                out[i, j] = s[i, j] * (g[i, j] - dot)
        return out

    @njit(cache=True)
    def log_softmax_grad_rows_nb(ls, g):
        n, c = ls.shape
        out = np.empty((n, c))
        for i in range(n):
            total = 0.0
            for j in range(c):
                total += g[i, j]
            for j in range(c):
                out[i, j] = g[i, j] - np.exp(ls[i, j]) * total
        return out

    @njit(cache=True)
    def adam_update_nb(p, g, m, v, lr, beta1, beta2, eps, weight_decay, step):
        c1 = 1.0 - beta1 ** step
        c2 = 1.0 - beta2 ** step
        for i in range(p.size):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
            mhat = m[i] / c1
            vhat = v[i] / c2
            p[i] -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p[i])

    @njit(cache=True)
    def confusion_matrix_nb(gt, pred, n_classes):
        out = np.zeros((n_classes, n_classes), dtype=np.int64)
        for i in range(gt.size):
            out[gt[i], pred[i]] += 1
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if USE_NUMBA:
    log_softmax_rows = log_softmax_rows_nb
    softmax_rows = softmax_rows_nb
    softmax_grad_rows = softmax_grad_rows_nb
    log_softmax_grad_rows = log_softmax_grad_rows_nb
    _adam_update = adam_update_nb
    _confusion = confusion_matrix_nb
else:
    log_softmax_rows = log_softmax_rows_np
    softmax_rows = softmax_rows_np
    softmax_grad_rows = softmax_grad_rows_np
    log_softmax_grad_rows = log_softmax_grad_rows_np
    _adam_update = adam_update_np
    _confusion = confusion_matrix_np


def adam_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, step):
    # flat views so 1-D and 2-D parameters share one kernel
    _adam_update(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                 float(lr), float(beta1), float(beta2), float(eps),
                 float(weight_decay), int(step))


def confusion_matrix(gt, pred, n_classes):
    gt = np.ascontiguousarray(gt, dtype=np.int64).reshape(-1)
    pred = np.ascontiguousarray(pred, dtype=np.int64).reshape(-1)
    return _confusion(gt, pred, int(n_classes))


def backend():
    return "numba" if USE_NUMBA else "numpy"
