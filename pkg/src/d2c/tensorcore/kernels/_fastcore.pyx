# cython: boundscheck=False, wraparound=False, cdivision=True
"""Fused elementwise / optimizer kernels (compiled lane).

Same flat-array contract as pybackend: 1-D contiguous views, caller-owned
output buffers. Fusing the transcendental + multiply passes into one loop is
where this lane wins over numpy's multi-pass evaluation; matmul deliberately
stays on BLAS upstream.
"""
from libc.math cimport exp, tanh as ctanh, sqrt, fabs, pow

NAME = "cython"

ctypedef fused real:
    float
    double


cdef inline double _sig(double x) nogil:
    cdef double z
    if x >= 0.0:
        z = exp(-x)
        return 1.0 / (1.0 + z)
    z = exp(x)
    return z / (1.0 + z)


def silu_fwd(real[::1] x, real[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double xi
    with nogil:
        for i in range(n):
            xi = <double> x[i]
            out[i] = <real> (xi * _sig(xi))


def silu_bwd(real[::1] x, real[::1] gy, real[::1] gx):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double xi, s
    with nogil:
        for i in range(n):
            xi = <double> x[i]
            s = _sig(xi)
            gx[i] = <real> (<double> gy[i] * (s * (1.0 + xi * (1.0 - s))))


def tanh_fwd(real[::1] x, real[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    with nogil:
        for i in range(n):
            out[i] = <real> ctanh(<double> x[i])


def tanh_bwd(real[::1] y, real[::1] gy, real[::1] gx):
    cdef Py_ssize_t i, n = y.shape[0]
    cdef double yi
    with nogil:
        for i in range(n):
            yi = <double> y[i]
            gx[i] = <real> (<double> gy[i] * (1.0 - yi * yi))


def adam_update(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
                long t, double lr, double beta1, double beta2, double eps):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double bc1 = 1.0 - pow(beta1, <double> t)
    cdef double bc2 = 1.0 - pow(beta2, <double> t)
    cdef double gi, mi, vi
    with nogil:
        for i in range(n):
            gi = <double> g[i]
            mi = beta1 * (<double> m[i]) + (1.0 - beta1) * gi
            vi = beta2 * (<double> v[i]) + (1.0 - beta2) * gi * gi
            m[i] = <real> mi
            v[i] = <real> vi
            p[i] = <real> ((<double> p[i]) - lr * (mi / bc1) / (sqrt(vi / bc2) + eps))
