"""Dense named tensors and the elementwise, reduction and selection primitives."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class TensorError(ValueError):
    """Invalid tensor input: bad shape, dtype, or a domain violation."""


@dataclass(frozen=True)
class NamedTensor:
    """A named, row-major float32/float64 array.

    The array is stored as given (no copy); treat it as immutable.
    """

    name: str
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in SUPPORTED_DTYPES:
            raise TensorError(f"{self.name}: unsupported dtype {data.dtype}")
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __len__(self) -> int:
        return self.size


def _first_index(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask.ravel())[0])


def _check_finite(name: str, arr: np.ndarray) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        raise TensorError(f"{name}: non-finite result at flat index {_first_index(bad)}")


_BINARY = {"add": np.add, "sub": np.subtract, "mul": np.multiply, "div": np.divide}
_UNARY = {"sqrt": np.sqrt, "square": np.square, "abs": np.abs, "log10": np.log10}


def elementwise(op: str, a: NamedTensor, b: NamedTensor | None = None) -> NamedTensor:
    """Apply ``op`` coordinate-wise and return a tensor named after ``a``.

    Binary ops: add, sub, mul, div. Unary ops: sqrt, square, abs, log10.
    """
    x = a.data
    if op in _BINARY:
        if b is None:
            raise TensorError(f"{op} needs two operands")
        if a.shape != b.shape:
            raise TensorError(f"{a.name} {a.shape} vs {b.name} {b.shape}: shape mismatch")
        y = b.data
        if op == "div" and (y == 0).any():
            raise TensorError(f"{b.name}: zero divisor at flat index {_first_index(y == 0)}")
        out = _BINARY[op](x, y)
    elif op in _UNARY:
        if b is not None:
            raise TensorError(f"{op} takes one operand")
        if op == "sqrt" and (x < 0).any():
            raise TensorError(f"{a.name}: negative sqrt operand at flat index {_first_index(x < 0)}")
        if op == "log10" and (x <= 0).any():
            raise TensorError(f"{a.name}: non-positive log10 operand at flat index {_first_index(x <= 0)}")
        out = _UNARY[op](x)
    else:
        raise TensorError(f"unknown elementwise op {op!r}")
    _check_finite(a.name, out)
    return NamedTensor(a.name, out)


def reduce(op: str, a: NamedTensor, axis: str | None = None):
    """Reduce ``a`` with sum, max, min or count_nonzero.

    ``axis`` is ``None``/``"all"`` (scalar result), ``"rows"`` (one value per
    row) or ``"cols"`` (one value per column). Sums accumulate in float64.
    """
    if axis in (None, "all"):
        np_axis = None
    elif axis in ("rows", "cols"):
        if a.data.ndim != 2:
            raise TensorError(f"{a.name}: axis={axis!r} needs a 2-D tensor, got shape {a.shape}")
        np_axis = 1 if axis == "rows" else 0
    else:
        raise TensorError(f"unknown axis {axis!r}")

    x = a.data
    if op == "sum":
        out = np.sum(x, axis=np_axis, dtype=np.float64)
    elif op == "max":
        out = np.max(x, axis=np_axis)
    elif op == "min":
        out = np.min(x, axis=np_axis)
    elif op == "count_nonzero":
        out = np.count_nonzero(x, axis=np_axis)
    else:
        raise TensorError(f"unknown reduction {op!r}")

    if np_axis is None:
        return out.item() if isinstance(out, np.generic) else out
    if op == "count_nonzero":
        out = out.astype(np.float64)
    return NamedTensor(f"{a.name}.{op}_{axis}", np.asarray(out))


class TopK(NamedTuple):
    threshold: float
    above: int
    k: int
    total: int


def _concat_sorted(values: Mapping[str, np.ndarray]) -> np.ndarray:
    names = sorted(values)
    if not names:
        return np.zeros(0)
    return np.concatenate([np.asarray(values[n], dtype=np.float64).ravel() for n in names])


def global_topk_threshold(values: Mapping[str, np.ndarray], k: int) -> TopK:
    """k-th largest value over all tensors and the count strictly above it.

    For ``k == 0`` the threshold is ``+inf`` and nothing is selected.
    """
    flat = _concat_sorted(values)
    total = flat.size
    if k < 0 or k > total:
        raise TensorError(f"k={k} outside [0, {total}]")
    if k == 0:
        return TopK(math.inf, 0, 0, total)
    # k-th largest == element at position total-k of the ascending partition
    thr = float(np.partition(flat, total - k)[total - k])
    above = int(np.count_nonzero(flat > thr))
    return TopK(thr, above, k, total)


def topk_select(values: Mapping[str, np.ndarray], k: int) -> dict[str, np.ndarray]:
    """Boolean masks keeping exactly ``k`` elements globally.

    All elements strictly above the threshold are kept; the remaining slots go
    to elements equal to the threshold in (tensor name, flat index) order.
    """
    info = global_topk_threshold(values, k)
    names = sorted(values)
    flat = _concat_sorted(values)
    keep = flat > info.threshold
    need = k - info.above
    if need > 0:
        ties = np.flatnonzero(flat == info.threshold)[:need]
        keep[ties] = True
    out = {}
    offset = 0
    for n in names:
        arr = np.asarray(values[n])
        out[n] = keep[offset : offset + arr.size].reshape(arr.shape)
        offset += arr.size
    return out


class SpectralEstimate(NamedTuple):
    value: float
    iterations: int
    converged: bool


def spectral_norm(a: NamedTensor | np.ndarray, tol: float = 1e-12, max_iters: int = 10_000) -> SpectralEstimate:
    """Largest singular value by power iteration on ``AᵀA``.

    The start vector is all-ones. If it lies in the null space, the iteration
    restarts from the unit vector of the largest-norm column. The iterate is
    rescaled by its max-abs entry, and the estimate is the Rayleigh quotient
    ``sqrt(|Ax|² / |x|²)``; identity-like inputs are therefore exact.
    """
    name = a.name if isinstance(a, NamedTensor) else "<array>"
    A = np.asarray(a.data if isinstance(a, NamedTensor) else a, dtype=np.float64)
    if A.ndim != 2:
        raise TensorError(f"{name}: spectral_norm needs a 2-D tensor, got shape {A.shape}")
    _check_finite(name, A)
    if A.size == 0 or not A.any():
        return SpectralEstimate(0.0, 0, True)

    x = np.ones(A.shape[1])
    if not (A @ x).any():
        x = np.zeros(A.shape[1])
        x[int(np.argmax(np.einsum("ij,ij->j", A, A)))] = 1.0

    prev = 0.0
    for it in range(1, max_iters + 1):
        y = A @ x
        sigma = math.sqrt(float(y @ y) / float(x @ x))
        if it > 1 and abs(sigma - prev) <= tol * sigma:
            return SpectralEstimate(sigma, it, True)
        prev = sigma
        z = A.T @ y
        x = z / np.max(np.abs(z))
    warnings.warn(f"{name}: power iteration did not converge in {max_iters} iterations", RuntimeWarning)
    return SpectralEstimate(prev, max_iters, False)


def frobenius_sq(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sum(a * a))
