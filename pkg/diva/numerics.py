"""Special functions and log-domain helpers used by the inference formulas.

digamma and log_gamma shift their argument upward until it is at least 6
and then evaluate the Bernoulli-number asymptotic series. Both work on
python floats and on numpy arrays (elementwise).
"""

from __future__ import annotations

import math

import numpy as np

from diva.errors import DomainError

LOG_2PI = math.log(2.0 * math.pi)
_HALF_LOG_2PI = 0.5 * LOG_2PI
_SHIFT_TO = 6.0

# Coefficients of 1/x^(2n) in the digamma tail: -B_2n / (2n)
_DIGAMMA_SERIES = (
    -1.0 / 12.0,
    1.0 / 120.0,
    -1.0 / 252.0,
    1.0 / 240.0,
    -1.0 / 132.0,
    691.0 / 32760.0,
    -1.0 / 12.0,
)

# Coefficients of 1/x^(2n-1) in the Stirling tail: B_2n / (2n (2n-1))
_STIRLING_SERIES = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
)


def _as_positive_array(x, name):
    arr = np.asarray(x, dtype=float)
    if arr.size == 0:
        return arr
    if np.any(np.isnan(arr)) or np.any(arr <= 0.0):
        raise DomainError(f"{name} is only defined for x > 0 (got {np.min(arr)!r})")
    return arr


def _unwrap(result, original):
    if np.ndim(original) == 0:
        return float(result)
    return result


# -----------------------------
#  Special functions
# -----------------------------
def digamma(x):
    """
    Digamma function psi(x) = d/dx log Gamma(x).

    Args:
        x (float | np.ndarray): strictly positive argument(s).

    Returns:
        float | np.ndarray: psi(x), absolute error below 1e-10 for x >= 1e-6.
    """
    y = _as_positive_array(x, "digamma").copy()
    acc = np.zeros_like(y)

    # psi(x) = psi(x + 1) - 1/x
    small = y < _SHIFT_TO
    while np.any(small):
        acc[small] -= 1.0 / y[small]
        y[small] += 1.0
        small = y < _SHIFT_TO

    inv2 = 1.0 / (y * y)
    tail = np.zeros_like(y)
    for coef in reversed(_DIGAMMA_SERIES):
        tail = (tail + coef) * inv2

    result = acc + np.log(y) - 0.5 / y + tail
    return _unwrap(result, x)


def log_gamma(x):
    """
    Natural log of the Gamma function for positive arguments.

    Args:
        x (float | np.ndarray): strictly positive argument(s).

    Returns:
        float | np.ndarray: ln Gamma(x), absolute error below 1e-10 for x >= 1e-6.
    """
    y = _as_positive_array(x, "log_gamma").copy()
    prod = np.ones_like(y)

    # Gamma(x) = Gamma(x + 1) / x
    small = y < _SHIFT_TO
    while np.any(small):
        prod[small] *= y[small]
        y[small] += 1.0
        small = y < _SHIFT_TO

    inv = 1.0 / y
    inv2 = inv * inv
    tail = np.zeros_like(y)
    for coef in reversed(_STIRLING_SERIES):
        tail = tail * inv2 + coef
    tail *= inv

    result = (y - 0.5) * np.log(y) - y + _HALF_LOG_2PI + tail - np.log(prod)
    return _unwrap(result, x)


def log_beta(a, b):
    """ln B(a, b) = ln Gamma(a) + ln Gamma(b) - ln Gamma(a + b)."""
    return log_gamma(a) + log_gamma(b) - log_gamma(np.add(a, b))


# -----------------------------
#  Log-domain helpers
# -----------------------------
def log_sum_exp(v, axis=None):
    """
    Stable log(sum(exp(v))).

    Args:
        v (array-like): log-domain weights.
        axis (int | None): reduce along this axis, or over everything when None.

    Returns:
        float | np.ndarray: the reduced log-sum.
    """
    arr = np.asarray(v, dtype=float)
    if arr.size == 0 or (axis is not None and arr.shape[axis] == 0):
        raise DomainError("log_sum_exp of an empty vector is undefined")

    top = np.max(arr, axis=axis, keepdims=True)
    # All entries -inf: keep the result at -inf instead of producing NaN
    top = np.where(np.isfinite(top), top, 0.0)
    out = np.log(np.sum(np.exp(arr - top), axis=axis, keepdims=True)) + top

    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def normalize_log_weights(log_w):
    """
    Turn a matrix of unnormalised log weights into row-stochastic probabilities.

    Args:
        log_w (np.ndarray): B x K log weights.

    Returns:
        np.ndarray: B x K probabilities, each row summing to 1.
    """
    log_w = np.atleast_2d(np.asarray(log_w, dtype=float))
    norm = log_sum_exp(log_w, axis=1)
    return np.exp(log_w - norm[:, None])


# -----------------------------
#  Closed-form divergences
# -----------------------------
def kl_beta(a1, b1, a0, b0):
    """KL( Beta(a1, b1) || Beta(a0, b0) ), elementwise."""
    a1 = np.asarray(a1, dtype=float)
    b1 = np.asarray(b1, dtype=float)
    psi_sum = digamma(a1 + b1)
    return (
        log_beta(a0, b0)
        - log_beta(a1, b1)
        + (a1 - a0) * digamma(a1)
        + (b1 - b0) * digamma(b1)
        + (a0 - a1 + b0 - b1) * psi_sum
    )


def kl_gamma(a1, b1, a0, b0):
    """KL( Gamma(a1, rate=b1) || Gamma(a0, rate=b0) ), elementwise."""
    a1 = np.asarray(a1, dtype=float)
    b1 = np.asarray(b1, dtype=float)
    return (
        (a1 - a0) * digamma(a1)
        - log_gamma(a1)
        + log_gamma(a0)
        + a0 * (np.log(b1) - np.log(b0))
        + a1 * (b0 - b1) / b1
    )


# -----------------------------
#  Seeding
# -----------------------------
def kmeanspp_centers(x, k, rng):
    """k rows of x chosen by k-means++ (distance-squared weighted) sampling."""
    x = np.asarray(x, dtype=float)
    centers = [x[rng.integers(x.shape[0])]]
    dist = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = dist.sum()
        if total <= 0:
            idx = rng.integers(x.shape[0])
        else:
            idx = rng.choice(x.shape[0], p=dist / total)
        centers.append(x[idx])
        dist = np.minimum(dist, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)
