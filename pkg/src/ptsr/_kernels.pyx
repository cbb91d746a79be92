# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled log-gamma / digamma / trigamma kernels over flat float64 buffers.

Inputs are assumed validated (strictly positive, finite) by the caller.
"""

from libc.math cimport log, log1p

from ptsr._zeta import ONE_MINUS_EULER, SERIES_COEFFS

cdef double _HALF_LOG_2PI = 0.91893853320467274178
cdef double _ONE_MINUS_EULER = ONE_MINUS_EULER
cdef int _NCOEF = 40
cdef double _COEF[40]

for _i, _c in enumerate(SERIES_COEFFS):
    _COEF[_i] = _c


cdef inline double _lgamma_two_plus(double z) nogil:
    # lgamma(2 + z) for |z| <= 0.5
    cdef double acc = 0.0
    cdef int i
    for i in range(_NCOEF):
        acc = acc * z + _COEF[i]
    return z * (_ONE_MINUS_EULER + z * acc)


cdef inline double _lgamma_stirling(double x) nogil:
    cdef double r = 1.0 / x
    cdef double r2 = r * r
    cdef double s = r * (1.0 / 12.0 + r2 * (-1.0 / 360.0 + r2 * (1.0 / 1260.0 + r2 * (
        -1.0 / 1680.0 + r2 * (1.0 / 1188.0 + r2 * (-691.0 / 360360.0 + r2 / 156.0))))))
    return (x - 0.5) * log(x) - x + _HALF_LOG_2PI + s


cdef double c_lgamma(double x) nogil:
    cdef double prod
    if x >= 8.0:
        return _lgamma_stirling(x)
    if x >= 2.5:
        prod = 1.0
        while x >= 2.5:
            x -= 1.0
            prod *= x
        return _lgamma_two_plus(x - 2.0) + log(prod)
    if x >= 1.5:
        return _lgamma_two_plus(x - 2.0)
    if x >= 0.5:
        return _lgamma_two_plus(x - 1.0) - log1p(x - 1.0)
    return _lgamma_two_plus(x) - log1p(x) - log(x)


cdef double c_digamma(double x) nogil:
    cdef double acc = 0.0
    cdef double r, r2
    while x < 10.0:
        acc -= 1.0 / x
        x += 1.0
    r = 1.0 / x
    r2 = r * r
    return acc + log(x) - 0.5 * r - r2 * (1.0 / 12.0 + r2 * (-1.0 / 120.0 + r2 * (
        1.0 / 252.0 + r2 * (-1.0 / 240.0 + r2 * (1.0 / 132.0 + r2 * (
            -691.0 / 32760.0 + r2 / 12.0))))))


cdef double c_trigamma(double x) nogil:
    cdef double acc = 0.0
    cdef double r, r2
    while x < 10.0:
        acc += 1.0 / (x * x)
        x += 1.0
    r = 1.0 / x
    r2 = r * r
    return acc + r + 0.5 * r2 + r * r2 * (1.0 / 6.0 + r2 * (-1.0 / 30.0 + r2 * (
        1.0 / 42.0 + r2 * (-1.0 / 30.0 + r2 * (5.0 / 66.0 + r2 * (
            -691.0 / 2730.0 + r2 * 7.0 / 6.0))))))


def lgamma(const double[::1] x, double[::1] out):
    cdef Py_ssize_t i
    with nogil:
        for i in range(x.shape[0]):
            out[i] = c_lgamma(x[i])


def digamma(const double[::1] x, double[::1] out):
    cdef Py_ssize_t i
    with nogil:
        for i in range(x.shape[0]):
            out[i] = c_digamma(x[i])


def trigamma(const double[::1] x, double[::1] out):
    cdef Py_ssize_t i
    with nogil:
        for i in range(x.shape[0]):
            out[i] = c_trigamma(x[i])
