"""Shared test utilities: finite differences, golden-section search, flattening."""

from __future__ import annotations

import numpy as np

from fedvem.nn import MlpParams


def central_diff(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        grad[i] = (fn(xp) - fn(xm)) / (2 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """max_i |a_i - b_i| / max(1, |b_i|)."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


def flatten_params(params: MlpParams) -> np.ndarray:
    parts = []
    for w, b in [*params.base, params.head]:
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def unflatten_params(vec: np.ndarray, like: MlpParams) -> MlpParams:
    base = []
    i = 0
    for w, b in like.base:
        base.append((vec[i:i + w.size].reshape(w.shape), vec[i + w.size:i + w.size + b.size].copy()))
        i += w.size + b.size
    hw, hb = like.head
    head = (vec[i:i + hw.size].reshape(hw.shape), vec[i + hw.size:i + hw.size + hb.size].copy())
    return MlpParams(base=base, head=head)


def golden_max(fn, lo: float, hi: float, tol: float = 1e-10) -> float:
    """Golden-section maximization of a unimodal scalar function on [lo, hi]."""
    phi = (np.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc, fd = fn(c), fn(d)
    while (b - a) > tol * max(1.0, abs(a) + abs(b)):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = fn(d)
    return (a + b) / 2
