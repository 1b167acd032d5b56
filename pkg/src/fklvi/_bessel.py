"""Modified Bessel functions of the first kind for small integer orders.

Only what the von Mises family needs: exponentially scaled values
``I_n(x) * exp(-x)`` for n in {0, 1, 2} and x >= 0, from which log I0 and the
ratios I1/I0, I2/I0 follow without overflow.
"""

import numpy as np

# Power series below, large-argument asymptotic expansion above.
SERIES_SWITCH = 15.0
_SERIES_TERMS = 60
_ASYMPTOTIC_TERMS = 25


def _series(order, x):
    half = 0.5 * x
    term = half**order / float(np.prod(np.arange(1, order + 1)))
    total = np.array(term, dtype=float)
    sq = half * half
    for k in range(1, _SERIES_TERMS):
        term = term * sq / (k * (k + order))
        total = total + term
    return total


def _asymptotic_scaled(order, x):
    # e^{-x} I_n(x) ~ (2 pi x)^{-1/2} sum_k (-1)^k a_k(n) / x^k
    mu = 4.0 * order * order
    term = np.ones_like(x)
    total = np.ones_like(x)
    for k in range(1, _ASYMPTOTIC_TERMS):
        term = -term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        total = total + term
    return total / np.sqrt(2.0 * np.pi * x)


def ive(order, x):
    """Return ``I_order(x) * exp(-x)`` for ``x >= 0`` (elementwise)."""
    if order not in (0, 1, 2):
        raise ValueError(f"only orders 0, 1, 2 are supported, got {order}")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("argument must be nonnegative")
    shape = x.shape
    x = x.reshape(-1)
    out = np.empty_like(x)
    small = x <= SERIES_SWITCH
    if np.any(small):
        xs = x[small]
        out[small] = _series(order, xs) * np.exp(-xs)
    if np.any(~small):
        out[~small] = _asymptotic_scaled(order, x[~small])
    return out.reshape(shape) if shape else out[0]


def log_i0(x):
    x = np.asarray(x, dtype=float)
    return np.log(ive(0, x)) + x


def ratios(x):
    """Return ``(I1/I0, I2/I0)`` evaluated at ``x``."""
    i0 = ive(0, x)
    return ive(1, x) / i0, ive(2, x) / i0
