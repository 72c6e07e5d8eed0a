"""Min-max scaling for the anomaly detector; standardization followed by a
Yeo-Johnson power transform for the novelty detector."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LAMBDA_BOUNDS = (-5.0, 5.0)
_BRANCH_EPS = 1e-8
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class MinMaxParams:
    min: np.ndarray
    max: np.ndarray


@dataclass(frozen=True)
class NdNormalizerParams:
    mean: np.ndarray
    std: np.ndarray
    lambdas: np.ndarray


def _as_matrix(data) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise FitError("cannot fit on empty data")
    return x


def fit_minmax(data) -> MinMaxParams:
    x = _as_matrix(data)
    return MinMaxParams(x.min(axis=0), x.max(axis=0))


def transform_minmax(x, p: MinMaxParams) -> np.ndarray:
    """Scale to [0, 1] per feature, clipping values outside the fitted range.

    Constant features (max == min) map to 0.0. Works on a single vector or a
    batch of row vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    span = p.max - p.min
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (x - p.min) / safe, 0.0)
    return np.clip(out, 0.0, 1.0)


def yeo_johnson(x, lmbda: float):
    """Yeo-Johnson transform of ``x`` (scalar or array) for one lambda."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    xp, xn = x[pos], x[~pos]
    if abs(lmbda) < _BRANCH_EPS:
        out[pos] = np.log1p(xp)
    else:
        out[pos] = np.expm1(lmbda * np.log1p(xp)) / lmbda
    if abs(2.0 - lmbda) < _BRANCH_EPS:
        out[~pos] = -np.log1p(-xn)
    else:
        out[~pos] = -np.expm1((2.0 - lmbda) * np.log1p(-xn)) / (2.0 - lmbda)
    return out if out.ndim else float(out)


def yeo_johnson_llf(column, lmbda: float) -> float:
    """Profile Gaussian log-likelihood of the transformed column."""
    x = np.asarray(column, dtype=np.float64)
    n = x.size
    y = yeo_johnson(x, lmbda)
    var = y.var()
    if not var > 0 or not np.isfinite(var):
        return -np.inf
    jac = (lmbda - 1.0) * np.sum(np.sign(x) * np.log1p(np.abs(x)))
    return -0.5 * n * math.log(var) + jac


def fit_yeo_johnson_lambda(column, tol: float = 1e-5) -> float:
    """Maximum-likelihood lambda by golden-section search on [-5, 5]."""
    x = np.asarray(column, dtype=np.float64).ravel()
    if x.size < 2 or np.ptp(x) == 0:
        return 1.0

    def f(lm):
        return -yeo_johnson_llf(x, lm)

    a, b = LAMBDA_BOUNDS
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    lm = 0.5 * (a + b)
    return float(lm) if np.isfinite(f(lm)) else 1.0


def fit_nd_normalizer(data) -> NdNormalizerParams:
    x = _as_matrix(data)
    if x.shape[0] < 2:
        raise FitError("need at least two rows")
    mean = x.mean(axis=0)
    std = x.std(axis=0)  # population std
    z = _standardize(x, mean, std)
    lambdas = np.array([
        fit_yeo_johnson_lambda(z[:, j]) if std[j] > 0 else 1.0
        for j in range(x.shape[1])
    ])
    return NdNormalizerParams(mean, std, lambdas)


def _standardize(x, mean, std):
    safe = np.where(std > 0, std, 1.0)
    return np.where(std > 0, (x - mean) / safe, 0.0)


def transform_nd(x, params: NdNormalizerParams) -> np.ndarray:
    """Standardize then power-transform each column with its own lambda.

    No clipping: the transform is defined on all reals.
    """
    x = np.asarray(x, dtype=np.float64)
    z = _standardize(x, params.mean, params.std)
    out = np.empty_like(z)
    for j, lm in enumerate(params.lambdas):
        out[..., j] = yeo_johnson(z[..., j], float(lm))
    return out
