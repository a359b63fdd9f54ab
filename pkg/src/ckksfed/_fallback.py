"""Pure-numpy twins of the compiled kernels in ``_kernels.pyx``.

Modular products use an extended-precision quotient estimate when the
platform ``long double`` carries at least 63 mantissa bits (x86-64), and
Python integers otherwise.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"

_EXTENDED = np.finfo(np.longdouble).nmant >= 63


def mulmod(a: np.ndarray, b, q: int) -> np.ndarray:
    """Elementwise ``a * b mod q`` for uint64 operands already reduced mod ``q < 2**61``."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if not _EXTENDED:
        prod = (a.astype(object) * b.astype(object)) % q
        return prod.astype(np.uint64)
    qq = np.uint64(q)
    est = np.floor(a.astype(np.longdouble) * b.astype(np.longdouble) / np.longdouble(q))
    r = (a * b - est.astype(np.uint64) * qq).view(np.int64)
    iq = np.int64(q)
    r = np.where(r < 0, r + iq, r)
    r = np.where(r >= iq, r - iq, r)
    return r.view(np.uint64)


def _addmod(a, b, qq):
    s = a + b
    return np.where(s >= qq, s - qq, s)


def _submod(a, b, qq):
    return np.where(a >= b, a - b, a + qq - b)


def _ntt_forward_row(a: np.ndarray, psi_rev: np.ndarray, q: int) -> None:
    n = a.shape[0]
    qq = np.uint64(q)
    m, t = 1, n
    while m < n:
        t //= 2
        view = a.reshape(m, 2, t)
        u = view[:, 0, :].copy()
        v = mulmod(view[:, 1, :], psi_rev[m:2 * m, None], q)
        view[:, 0, :] = _addmod(u, v, qq)
        view[:, 1, :] = _submod(u, v, qq)
        m *= 2


def _ntt_inverse_row(a: np.ndarray, psi_inv_rev: np.ndarray, n_inv: int, q: int) -> None:
    n = a.shape[0]
    qq = np.uint64(q)
    m, t = n, 1
    while m > 1:
        h = m // 2
        view = a.reshape(h, 2, t)
        u = view[:, 0, :].copy()
        v = view[:, 1, :].copy()
        view[:, 0, :] = _addmod(u, v, qq)
        view[:, 1, :] = mulmod(_submod(u, v, qq), psi_inv_rev[h:2 * h, None], q)
        t *= 2
        m = h
    a[:] = mulmod(a, np.uint64(n_inv), q)


def ntt_forward_rows(a, qs, psi_rev, psi_rev_shoup):
    for i in range(a.shape[0]):
        _ntt_forward_row(a[i], psi_rev[i], int(qs[i]))


def ntt_inverse_rows(a, qs, psi_inv_rev, psi_inv_rev_shoup, n_invs, n_invs_shoup):
    for i in range(a.shape[0]):
        _ntt_inverse_row(a[i], psi_inv_rev[i], int(n_invs[i]), int(qs[i]))


def mul_rows(a, b, out, qs, mus, ks):
    for i in range(a.shape[0]):
        out[i] = mulmod(a[i], b[i], int(qs[i]))


def mul_scalar_rows(a, cs, out, qs, mus, ks):
    for i in range(a.shape[0]):
        out[i] = mulmod(a[i], np.uint64(cs[i]), int(qs[i]))


def mlp_loss_grad(params: np.ndarray, sizes, X: np.ndarray, y: np.ndarray):
    """Summed squared-error loss ``sum(0.5 * err**2)`` and its gradient over a batch."""
    weights = []
    off = 0
    for din, dout in zip(sizes[:-1], sizes[1:]):
        w = params[off:off + din * dout].reshape(din, dout)
        off += din * dout
        b = params[off:off + dout]
        off += dout
        weights.append((w, b))
    acts = [X]
    for layer, (w, b) in enumerate(weights):
        z = acts[-1] @ w + b
        if layer < len(weights) - 1:
            z = np.maximum(z, 0.0)
        acts.append(z)
    err = acts[-1][:, 0] - y
    loss = 0.5 * float(err @ err)
    grads = []
    delta = err[:, None]
    for layer in range(len(weights) - 1, -1, -1):
        w, _ = weights[layer]
        grads.append((acts[layer].T @ delta, delta.sum(axis=0)))
        if layer > 0:
            delta = (delta @ w.T) * (acts[layer] > 0.0)
    grad = np.concatenate([g.ravel() for pair in reversed(grads) for g in pair])
    return loss, grad


def mlp_sgd_pass(params, sizes, X, y, order, batch_size, lr):
    total = 0.0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        loss, grad = mlp_loss_grad(params, sizes, X[idx], y[idx])
        total += loss
        if not np.isfinite(total):
            return float("nan")
        params -= (lr / len(idx)) * grad
    return total
