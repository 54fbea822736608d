"""Compiled step kernels: small dense complex exponentials and ordered products.

The propagators spend nearly all their time exponentiating thousands of tiny
Magnus generators and multiplying them in order.  numpy's per-call overhead
dominates at d <= 8, so these loops are written against raw buffers.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, ldexp, frexp, fabs

cnp.import_array()

ctypedef double complex cplx


cdef inline double _norm1(const cplx* a, Py_ssize_t d) noexcept nogil:
    # max column sum, the usual scaling norm for expm
    cdef Py_ssize_t i, j
    cdef double best = 0.0, s
    cdef cplx z
    for j in range(d):
        s = 0.0
        for i in range(d):
            z = a[i * d + j]
            s += sqrt(z.real * z.real + z.imag * z.imag)
        if s > best:
            best = s
    return best


cdef inline void _matmul(const cplx* a, const cplx* b, cplx* out, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t i, j, k
    cdef cplx acc
    for i in range(d):
        for j in range(d):
            acc = 0
            for k in range(d):
                acc = acc + a[i * d + k] * b[k * d + j]
            out[i * d + j] = acc


cdef void _expm(const cplx* a, cplx* out, cplx* work, Py_ssize_t d) noexcept nogil:
    # scaling and squaring around a Taylor sum; work holds 3*d*d entries
    cdef Py_ssize_t n = d * d, i, k
    cdef cplx* term = work
    cdef cplx* tmp = work + n
    cdef cplx* x = work + 2 * n
    cdef double nrm = _norm1(a, d), tnorm, scale
    cdef int s = 0, e
    if nrm > 0.5:
        frexp(nrm / 0.5, &e)
        s = e
    scale = ldexp(1.0, -s)
    for i in range(n):
        x[i] = a[i] * scale
        out[i] = 0
        term[i] = 0
    for i in range(d):
        out[i * d + i] = 1
        term[i * d + i] = 1
    for k in range(1, 30):
        _matmul(term, x, tmp, d)
        tnorm = 0.0
        for i in range(n):
            term[i] = tmp[i] / k
            out[i] = out[i] + term[i]
            tnorm += fabs(term[i].real) + fabs(term[i].imag)
        if tnorm < 1e-18:
            break
    for k in range(s):
        _matmul(out, out, tmp, d)
        for i in range(n):
            out[i] = tmp[i]


def expm_batch(cnp.ndarray omegas):
    """Exponentials of a stack of square matrices, shape (n, d, d)."""
    cdef cplx[:, :, ::1] om = np.ascontiguousarray(omegas, dtype=np.complex128)
    cdef Py_ssize_t n = om.shape[0], d = om.shape[1], j
    out_arr = np.empty((n, d, d), dtype=np.complex128)
    cdef cplx[:, :, ::1] out = out_arr
    if n == 0:
        return out_arr
    cdef cplx[::1] work = np.empty(3 * d * d, dtype=np.complex128)
    with nogil:
        for j in range(n):
            _expm(&om[j, 0, 0], &out[j, 0, 0], &work[0], d)
    return out_arr


def chain_product(cnp.ndarray steps, cnp.ndarray marks, cnp.ndarray start):
    """Ordered product start, S_0 start, S_1 S_0 start, ... sampled at marks.

    marks[i] is the number of steps applied before snapshot i is recorded;
    marks must be nondecreasing.
    """
    cdef cplx[:, :, ::1] st = np.ascontiguousarray(steps, dtype=np.complex128)
    cdef Py_ssize_t[::1] mk = np.ascontiguousarray(marks, dtype=np.intp)
    cdef Py_ssize_t d = start.shape[0], nsnap = mk.shape[0]
    snaps_arr = np.empty((nsnap, d, d), dtype=np.complex128)
    cdef cplx[:, :, ::1] snaps = snaps_arr
    cdef cplx[:, ::1] u = np.array(start, dtype=np.complex128, order="C")
    cdef cplx[:, ::1] tmp = np.empty((d, d), dtype=np.complex128)
    cdef Py_ssize_t done = 0, i, q
    with nogil:
        for i in range(nsnap):
            while done < mk[i]:
                _matmul(&st[done, 0, 0], &u[0, 0], &tmp[0, 0], d)
                for q in range(d * d):
                    (&u[0, 0])[q] = (&tmp[0, 0])[q]
                done += 1
            for q in range(d * d):
                (&snaps[i, 0, 0])[q] = (&u[0, 0])[q]
    return snaps_arr


def expm_chain(cnp.ndarray omegas, cnp.ndarray marks, cnp.ndarray start):
    """Fused expm_batch followed by chain_product, without the intermediate stack."""
    cdef cplx[:, :, ::1] om = np.ascontiguousarray(omegas, dtype=np.complex128)
    cdef Py_ssize_t[::1] mk = np.ascontiguousarray(marks, dtype=np.intp)
    cdef Py_ssize_t d = start.shape[0], nsnap = mk.shape[0]
    snaps_arr = np.empty((nsnap, d, d), dtype=np.complex128)
    cdef cplx[:, :, ::1] snaps = snaps_arr
    cdef cplx[:, ::1] u = np.array(start, dtype=np.complex128, order="C")
    cdef cplx[:, ::1] e = np.empty((d, d), dtype=np.complex128)
    cdef cplx[:, ::1] tmp = np.empty((d, d), dtype=np.complex128)
    cdef cplx[::1] work = np.empty(3 * d * d, dtype=np.complex128)
    cdef Py_ssize_t done = 0, i, q
    with nogil:
        for i in range(nsnap):
            while done < mk[i]:
                _expm(&om[done, 0, 0], &e[0, 0], &work[0], d)
                _matmul(&e[0, 0], &u[0, 0], &tmp[0, 0], d)
                for q in range(d * d):
                    (&u[0, 0])[q] = (&tmp[0, 0])[q]
                done += 1
            for q in range(d * d):
                (&snaps[i, 0, 0])[q] = (&u[0, 0])[q]
    return snaps_arr
