"""Pure numpy fallback for the compiled special-function kernels.

Same algorithms and thresholds as ``_kernels.pyx``; the two agree to a few
ulps. Signatures mirror the compiled module: ``fn(x, out)`` on flat
contiguous float64 buffers.
"""

import numpy as np

from ptsr._zeta import ONE_MINUS_EULER, SERIES_COEFFS

_HALF_LOG_2PI = 0.91893853320467274178


def _lgamma_two_plus(z):
    acc = np.zeros_like(z)
    for c in SERIES_COEFFS:
        acc = acc * z + c
    return z * (ONE_MINUS_EULER + z * acc)


def _lgamma_stirling(x):
    r = 1.0 / x
    r2 = r * r
    s = r * (1.0 / 12.0 + r2 * (-1.0 / 360.0 + r2 * (1.0 / 1260.0 + r2 * (
        -1.0 / 1680.0 + r2 * (1.0 / 1188.0 + r2 * (-691.0 / 360360.0 + r2 / 156.0))))))
    return (x - 0.5) * np.log(x) - x + _HALF_LOG_2PI + s


def lgamma(x, out):
    big = x >= 8.0
    out[big] = _lgamma_stirling(x[big])

    mid = (x >= 2.5) & ~big
    if mid.any():
        y = x[mid]
        prod = np.ones_like(y)
        for _ in range(6):
            m = y >= 2.5
            y = np.where(m, y - 1.0, y)
            prod = np.where(m, prod * y, prod)
        out[mid] = _lgamma_two_plus(y - 2.0) + np.log(prod)

    near_two = (x >= 1.5) & (x < 2.5)
    out[near_two] = _lgamma_two_plus(x[near_two] - 2.0)

    near_one = (x >= 0.5) & (x < 1.5)
    z = x[near_one] - 1.0
    out[near_one] = _lgamma_two_plus(z) - np.log1p(z)

    small = x < 0.5
    z = x[small]
    out[small] = _lgamma_two_plus(z) - np.log1p(z) - np.log(z)
    return out


def digamma(x, out):
    y = x.copy()
    acc = np.zeros_like(y)
    for _ in range(10):
        m = y < 10.0
        if not m.any():
            break
        acc -= np.where(m, 1.0 / y, 0.0)
        y = np.where(m, y + 1.0, y)
    r = 1.0 / y
    r2 = r * r
    out[...] = acc + np.log(y) - 0.5 * r - r2 * (1.0 / 12.0 + r2 * (-1.0 / 120.0 + r2 * (
        1.0 / 252.0 + r2 * (-1.0 / 240.0 + r2 * (1.0 / 132.0 + r2 * (
            -691.0 / 32760.0 + r2 / 12.0))))))
    return out


def trigamma(x, out):
    y = x.copy()
    acc = np.zeros_like(y)
    for _ in range(10):
        m = y < 10.0
        if not m.any():
            break
        acc += np.where(m, 1.0 / (y * y), 0.0)
        y = np.where(m, y + 1.0, y)
    r = 1.0 / y
    r2 = r * r
    out[...] = acc + r + 0.5 * r2 + r * r2 * (1.0 / 6.0 + r2 * (-1.0 / 30.0 + r2 * (
        1.0 / 42.0 + r2 * (-1.0 / 30.0 + r2 * (5.0 / 66.0 + r2 * (
            -691.0 / 2730.0 + r2 * 7.0 / 6.0))))))
    return out
