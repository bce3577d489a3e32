"""Rank-1 (AdaFactor-style) factorisation of second moments and stable rank."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import NamedTensor, TensorError, frobenius_sq, spectral_norm


@dataclass(frozen=True)
class FactoredSecondMoment:
    """Row sums and column sums of a nonnegative ``m x n`` matrix."""

    row: np.ndarray
    col: np.ndarray

    def __post_init__(self):
        row = np.ascontiguousarray(self.row, dtype=np.float64).ravel()
        col = np.ascontiguousarray(self.col, dtype=np.float64).ravel()
        if (row < 0).any() or (col < 0).any():
            raise TensorError("factored second moment has negative entries")
        object.__setattr__(self, "row", row)
        object.__setattr__(self, "col", col)

    @property
    def source_shape(self) -> tuple[int, int]:
        return (self.row.size, self.col.size)

    @property
    def total(self) -> float:
        return float(np.sum(self.row))

    @property
    def stored_values(self) -> int:
        return self.row.size + self.col.size


def compress(v: NamedTensor | np.ndarray) -> FactoredSecondMoment:
    """Row and column sums of ``v`` (float64 accumulation)."""
    name = v.name if isinstance(v, NamedTensor) else "<array>"
    arr = np.asarray(v.data if isinstance(v, NamedTensor) else v)
    if arr.ndim != 2:
        raise TensorError(f"{name}: only 2-D second moments are factored, got shape {arr.shape}")
    if (arr < 0).any():
        idx = int(np.flatnonzero((arr < 0).ravel())[0])
        raise TensorError(f"{name}: negative second moment at flat index {idx}")
    return FactoredSecondMoment(
        row=np.sum(arr, axis=1, dtype=np.float64),
        col=np.sum(arr, axis=0, dtype=np.float64),
    )


def reconstruct(f: FactoredSecondMoment, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Rank-1 estimate ``r cᵀ / sum(r)``; zero-mass factors give zeros."""
    if shape is not None and tuple(shape) != f.source_shape:
        raise TensorError(f"factor lengths {f.source_shape} do not match shape {tuple(shape)}")
    return kernels.reconstruct(f.row, f.col, f.total)


def stable_rank(v: NamedTensor | np.ndarray, tol: float = 1e-12) -> float:
    """``‖V‖_F² / ‖V‖_2²``."""
    name = v.name if isinstance(v, NamedTensor) else "<array>"
    arr = np.asarray(v.data if isinstance(v, NamedTensor) else v, dtype=np.float64)
    if arr.ndim != 2:
        raise TensorError(f"{name}: stable rank needs a 2-D tensor")
    if not arr.any():
        raise TensorError(f"{name}: stable rank of a zero matrix is undefined")
    sigma = spectral_norm(arr, tol=tol).value
    return frobenius_sq(arr) / (sigma * sigma)


STABLE_RANK_HEADER = ("expert", "tensor", "layer", "role", "stable_rank")


def stable_rank_report(bundle, name_pattern=None):
    """Stable rank of every full 2-D second moment in ``bundle``.

    ``bundle`` is a :class:`CheckpointBundle` or a list of ``(expert_id, moments)``.
    Returns ``(rows, skipped)``; ``skipped`` lists ``(expert, tensor)`` pairs
    whose moments are factored and so cannot be analysed.
    """
    from .analysis import parse_layer_role

    rows, skipped = [], []
    for expert_id, moments in getattr(bundle, "second_moments", bundle):
        for name in sorted(moments):
            v = moments[name]
            if isinstance(v, FactoredSecondMoment):
                skipped.append((expert_id, name))
                continue
            if v.ndim != 2:
                continue
            layer, role = parse_layer_role(name, name_pattern)
            rows.append((expert_id, name, layer, role, stable_rank(v)))
    return rows, skipped


def format_stable_rank_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STABLE_RANK_HEADER)
    for expert, tensor, layer, role, sr in rows:
        w.writerow([expert, tensor, layer, role, repr(float(sr))])
    return buf.getvalue()
