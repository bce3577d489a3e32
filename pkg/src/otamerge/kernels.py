"""Hot per-coordinate kernels with a numba path and a pure-numpy path.

Every kernel exists twice: ``<name>_np`` (vectorised numpy) and ``<name>_nb``
(explicit loops, compiled by numba when available). The public name is bound
to one of them at import time, see :mod:`otamerge._accel`. Inputs are flat,
C-contiguous float64 arrays; callers reshape.

The two paths evaluate identical expressions in identical order. Tests check
that they agree bit for bit.
"""

from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

BACKEND = "numba" if USE_NUMBA else "numpy"


# --- saliency -----------------------------------------------------------------


def ffg_saliency_np(delta, v):
    return delta * delta * v


@njit
def ffg_saliency_nb(delta, v):
    out = np.empty_like(delta)
    for i in range(delta.shape[0]):
        out[i] = delta[i] * delta[i] * v[i]
    return out


def ffg_saliency_factored_np(delta, row, col, total):
    # delta is (m, n); the rank-1 second moment is rebuilt tile by tile.
    if total <= 0.0:
        return np.zeros_like(delta)
    vhat = np.outer(row, col / total)
    return delta * delta * vhat


@njit
def ffg_saliency_factored_nb(delta, row, col, total):
    m, n = delta.shape
    out = np.zeros_like(delta)
    if total <= 0.0:
        return out
    for i in range(m):
        for j in range(n):
            d = delta[i, j]
            out[i, j] = d * d * (row[i] * (col[j] / total))
    return out


# --- rank-1 reconstruction and preconditioners --------------------------------


def reconstruct_np(row, col, total):
    if total <= 0.0:
        return np.zeros((row.shape[0], col.shape[0]))
    # scaling col first avoids underflow of row*col for tiny moments
    return np.outer(row, col / total)


@njit
def reconstruct_nb(row, col, total):
    m = row.shape[0]
    n = col.shape[0]
    out = np.zeros((m, n))
    if total <= 0.0:
        return out
    for i in range(m):
        for j in range(n):
            out[i, j] = row[i] * (col[j] / total)
    return out


def precond_np(v, eps):
    return np.sqrt(v) + eps


@njit
def precond_nb(v, eps):
    out = np.empty_like(v)
    for i in range(v.shape[0]):
        out[i] = np.sqrt(v[i]) + eps
    return out


def precond_factored_np(row, col, total, eps):
    return np.sqrt(reconstruct_np(row, col, total)) + eps


@njit
def precond_factored_nb(row, col, total, eps):
    m = row.shape[0]
    n = col.shape[0]
    out = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            vhat = row[i] * (col[j] / total) if total > 0.0 else 0.0
            out[i, j] = np.sqrt(vhat) + eps
    return out


# --- weighted averaging -------------------------------------------------------
#
# out[i] = r + sum_t w[t,i] * (x[t,i] - r) / sum_t w[t,i]
#   r       = x[0,i]                      (reference value, first expert)
#   w[t,i]  = c[t,i] / max_t c[t,i]      (uniform if every c[t,i] is zero)
#
# This equals sum_t c x / sum_t c. The offset form returns exactly x when all
# contributions agree, and the max-normalisation makes identical weights
# exactly 1.0, so Fisher averaging with equal curvature is bit-identical to the
# unweighted mean.


def weighted_average_np(values, weights):
    T = values.shape[0]
    cmax = weights[0].copy()
    for t in range(1, T):
        cmax = np.maximum(cmax, weights[t])
    pos = cmax > 0.0
    safe = np.where(pos, cmax, 1.0)
    ref = values[0]
    num = np.zeros(values.shape[1])
    den = np.zeros(values.shape[1])
    for t in range(T):
        w = np.where(pos, weights[t] / safe, 1.0)
        num = num + w * (values[t] - ref)
        den = den + w
    return ref + num / den


@njit
def weighted_average_nb(values, weights):
    T, n = values.shape
    out = np.empty(n)
    for i in range(n):
        cmax = weights[0, i]
        for t in range(1, T):
            if weights[t, i] > cmax:
                cmax = weights[t, i]
        ref = values[0, i]
        num = 0.0
        den = 0.0
        for t in range(T):
            w = weights[t, i] / cmax if cmax > 0.0 else 1.0
            num = num + w * (values[t, i] - ref)
            den = den + w
        out[i] = ref + num / den
    return out


# --- TIES sign election and disjoint mean --------------------------------------


def ties_combine_np(trimmed):
    T = trimmed.shape[0]
    total = np.zeros(trimmed.shape[1])
    for t in range(T):
        total = total + trimmed[t]
    sign = np.sign(total)
    acc = np.zeros(trimmed.shape[1])
    cnt = np.zeros(trimmed.shape[1])
    for t in range(T):
        agree = (np.sign(trimmed[t]) == sign) & (sign != 0.0)
        acc = acc + np.where(agree, trimmed[t], 0.0)
        cnt = cnt + agree
    return np.where(cnt > 0, acc / np.maximum(cnt, 1.0), 0.0)


@njit
def ties_combine_nb(trimmed):
    T, n = trimmed.shape
    out = np.zeros(n)
    for i in range(n):
        total = 0.0
        for t in range(T):
            total = total + trimmed[t, i]
        sign = np.sign(total)
        if sign == 0.0:
            continue
        acc = 0.0
        cnt = 0.0
        for t in range(T):
            d = trimmed[t, i]
            if np.sign(d) == sign:
                acc = acc + d
                cnt = cnt + 1.0
        if cnt > 0.0:
            out[i] = acc / cnt
    return out


# --- curvature analysis -------------------------------------------------------


def maxmin_ratio_np(vs, floor):
    roots = np.sqrt(vs)
    return roots.max(axis=0) / (roots.min(axis=0) + floor)


@njit
def maxmin_ratio_nb(vs, floor):
    T, n = vs.shape
    hi = np.sqrt(vs[0])
    lo = hi.copy()
    for t in range(1, T):
        for i in range(n):
            r = np.sqrt(vs[t, i])
            if r > hi[i]:
                hi[i] = r
            if r < lo[i]:
                lo[i] = r
    out = np.empty(n)
    for i in range(n):
        out[i] = hi[i] / (lo[i] + floor)
    return out


def overlap_codes_np(masks):
    codes = np.zeros(masks.shape[1], dtype=np.int64)
    for t in range(masks.shape[0]):
        codes |= (masks[t] != 0).astype(np.int64) << t
    return codes


@njit
def overlap_codes_nb(masks):
    T, n = masks.shape
    codes = np.zeros(n, dtype=np.int64)
    for t in range(T):
        bit = np.int64(1) << t
        for i in range(n):
            if masks[t, i] != 0:
                codes[i] |= bit
    return codes


if USE_NUMBA:
    ffg_saliency = ffg_saliency_nb
    ffg_saliency_factored = ffg_saliency_factored_nb
    reconstruct = reconstruct_nb
    precond = precond_nb
    precond_factored = precond_factored_nb
    weighted_average = weighted_average_nb
    ties_combine = ties_combine_nb
    maxmin_ratio = maxmin_ratio_nb
    overlap_codes = overlap_codes_nb
else:
    ffg_saliency = ffg_saliency_np
    ffg_saliency_factored = ffg_saliency_factored_np
    reconstruct = reconstruct_np
    precond = precond_np
    precond_factored = precond_factored_np
    weighted_average = weighted_average_np
    ties_combine = ties_combine_np
    maxmin_ratio = maxmin_ratio_np
    overlap_codes = overlap_codes_np


def implementations(name: str):
    """Return the ``(numpy, numba)`` pair for kernel ``name``."""
    return globals()[name + "_np"], globals()[name + "_nb"]
