# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: RNS residue-row NTT / modular products and MLP SGD passes.

Every function mutates or fills caller-allocated C-contiguous arrays; the
pure-numpy twins in ``_fallback`` share the exact signatures.
"""

from libc.stdint cimport uint64_t
from libc.stdlib cimport malloc, free
from libc.string cimport memset
from libc.math cimport isfinite

cdef extern from "_modarith.h" nogil:
    void ntt_forward_c(uint64_t *a, size_t n, const uint64_t *psi_rev,
                       const uint64_t *psi_rev_shoup, uint64_t q)
    void ntt_inverse_c(uint64_t *a, size_t n, const uint64_t *psi_inv_rev,
                       const uint64_t *psi_inv_rev_shoup, uint64_t n_inv,
                       uint64_t n_inv_shoup, uint64_t q)
    void mul_vec_c(const uint64_t *a, const uint64_t *b, uint64_t *out, size_t n,
                   uint64_t q, uint64_t mu, int k)
    void mul_scalar_c(const uint64_t *a, uint64_t c, uint64_t *out, size_t n,
                      uint64_t q, uint64_t mu, int k)

NAME = "cython"


def ntt_forward_rows(uint64_t[:, ::1] a, uint64_t[::1] qs, uint64_t[:, ::1] psi_rev,
                     uint64_t[:, ::1] psi_rev_shoup):
    cdef Py_ssize_t i, rows = a.shape[0], n = a.shape[1]
    with nogil:
        for i in range(rows):
            ntt_forward_c(&a[i, 0], n, &psi_rev[i, 0], &psi_rev_shoup[i, 0], qs[i])


def ntt_inverse_rows(uint64_t[:, ::1] a, uint64_t[::1] qs, uint64_t[:, ::1] psi_inv_rev,
                     uint64_t[:, ::1] psi_inv_rev_shoup, uint64_t[::1] n_invs,
                     uint64_t[::1] n_invs_shoup):
    cdef Py_ssize_t i, rows = a.shape[0], n = a.shape[1]
    with nogil:
        for i in range(rows):
            ntt_inverse_c(&a[i, 0], n, &psi_inv_rev[i, 0], &psi_inv_rev_shoup[i, 0],
                          n_invs[i], n_invs_shoup[i], qs[i])


def mul_rows(uint64_t[:, ::1] a, uint64_t[:, ::1] b, uint64_t[:, ::1] out,
             uint64_t[::1] qs, uint64_t[::1] mus, long[::1] ks):
    cdef Py_ssize_t i, rows = a.shape[0], n = a.shape[1]
    with nogil:
        for i in range(rows):
            mul_vec_c(&a[i, 0], &b[i, 0], &out[i, 0], n, qs[i], mus[i], <int>ks[i])


def mul_scalar_rows(uint64_t[:, ::1] a, uint64_t[::1] cs, uint64_t[:, ::1] out,
                    uint64_t[::1] qs, uint64_t[::1] mus, long[::1] ks):
    cdef Py_ssize_t i, rows = a.shape[0], n = a.shape[1]
    with nogil:
        for i in range(rows):
            mul_scalar_c(&a[i, 0], cs[i], &out[i, 0], n, qs[i], mus[i], <int>ks[i])


cdef double _sample_step(double *params, const long *sizes, int nlayers,
                         const double *x, double target, double *acts,
                         double *deltas, double *grad) noexcept nogil:
    # acts holds every layer's post-activation vector back to back, input first
    cdef int l, i, j, din, dout
    cdef Py_ssize_t woff = 0, aoff = 0, aoff_next
    cdef double s, err
    cdef double *w
    cdef double *b
    for i in range(sizes[0]):
        acts[i] = x[i]
    for l in range(nlayers):
        din = sizes[l]
        dout = sizes[l + 1]
        w = params + woff
        b = w + din * dout
        aoff_next = aoff + din
        for j in range(dout):
            acts[aoff_next + j] = b[j]
        for i in range(din):
            s = acts[aoff + i]
            if s != 0.0:
                for j in range(dout):
                    acts[aoff_next + j] += s * w[i * dout + j]
        if l < nlayers - 1:
            for j in range(dout):
                if acts[aoff_next + j] < 0.0:
                    acts[aoff_next + j] = 0.0
        woff += din * dout + dout
        aoff = aoff_next

    err = acts[aoff] - target
    # backward: deltas for layer l output live at the same offset as acts
    deltas[aoff] = err
    for l in range(nlayers - 1, -1, -1):
        din = sizes[l]
        dout = sizes[l + 1]
        woff -= din * dout + dout
        aoff_next = aoff
        aoff -= din
        w = params + woff
        for j in range(dout):
            grad[woff + din * dout + j] += deltas[aoff_next + j]
        for i in range(din):
            s = acts[aoff + i]
            if s != 0.0:
                for j in range(dout):
                    grad[woff + i * dout + j] += s * deltas[aoff_next + j]
        if l > 0:
            for i in range(din):
                if acts[aoff + i] > 0.0:
                    s = 0.0
                    for j in range(dout):
                        s += w[i * dout + j] * deltas[aoff_next + j]
                    deltas[aoff + i] = s
                else:
                    deltas[aoff + i] = 0.0
    return 0.5 * err * err


def mlp_sgd_pass(double[::1] params, long[::1] sizes, double[:, ::1] X, double[::1] y,
                 long[::1] order, int batch_size, double lr):
    """One pass over ``order`` in mini-batches; updates ``params`` in place.

    Returns the summed pre-update squared-error loss, or NaN as soon as a
    non-finite loss appears (parameters are then left mid-pass).
    """
    cdef int nlayers = sizes.shape[0] - 1
    cdef Py_ssize_t nparams = params.shape[0], total_act = 0
    cdef Py_ssize_t count = order.shape[0], start, stop, p, r
    cdef int l
    cdef double loss = 0.0, step, sample_loss
    for l in range(nlayers + 1):
        total_act += sizes[l]
    cdef double *acts = <double *>malloc(total_act * sizeof(double))
    cdef double *deltas = <double *>malloc(total_act * sizeof(double))
    cdef double *grad = <double *>malloc(nparams * sizeof(double))
    if acts == NULL or deltas == NULL or grad == NULL:
        free(acts); free(deltas); free(grad)
        raise MemoryError()
    try:
        with nogil:
            start = 0
            while start < count:
                stop = start + batch_size
                if stop > count:
                    stop = count
                memset(grad, 0, nparams * sizeof(double))
                for r in range(start, stop):
                    sample_loss = _sample_step(&params[0], &sizes[0], nlayers, &X[order[r], 0],
                                               y[order[r]], acts, deltas, grad)
                    loss += sample_loss
                if not isfinite(loss):
                    break
                step = lr / (stop - start)
                for p in range(nparams):
                    params[p] -= step * grad[p]
                start = stop
    finally:
        free(acts)
        free(deltas)
        free(grad)
    if not isfinite(loss):
        return float("nan")
    return loss
