"""Mask-structure and curvature-structure analytics.

Grids are written as CSV with a one-line comment header::

    # name=<tensor> shape=<m>x<n> stride=<r>,<c> transform=<id>

followed by comma-separated rows.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .grafting import SaliencyMaskSet
from .tensor import TensorError

DEFAULT_NAME_PATTERN = r"layers\.(?P<layer>\d+)\.(?:[^.]+\.)*?(?P<role>[^.]+)\.(?:weight|bias)$"
LOG_FLOOR = 1e-30


def parse_layer_role(name: str, pattern: str | None = None) -> tuple[int, str]:
    """``(layer, role)`` from a tensor name; ``(-1, "other")`` if it does not match.

    >>> parse_layer_role("model.layers.3.self_attn.q_proj.weight")
    (3, 'q_proj')
    """
    m = re.search(pattern or DEFAULT_NAME_PATTERN, name)
    if m is None:
        return -1, "other"
    return int(m.group("layer")), m.group("role")


# --- density --------------------------------------------------------------------


@dataclass(frozen=True)
class DensityRow:
    layer: int
    role: str
    tensor: str
    kept: int
    total: int

    @property
    def density(self) -> float:
        return self.kept / self.total if self.total else 0.0


def density_report(maskset: SaliencyMaskSet, pattern: str | None = None) -> list[DensityRow]:
    rows = []
    for name in sorted(maskset.masks):
        m = maskset.masks[name]
        layer, role = parse_layer_role(name, pattern)
        rows.append(DensityRow(layer, role, name, int(np.count_nonzero(m)), int(m.size)))
    return rows


def global_density(rows: Sequence[DensityRow]) -> float:
    total = sum(r.total for r in rows)
    return sum(r.kept for r in rows) / total if total else 0.0


def format_density_csv(rows: Sequence[DensityRow]) -> str:
    lines = ["layer,role,tensor,kept,total,density"]
    lines += [f"{r.layer},{r.role},{r.tensor},{r.kept},{r.total},{r.density!r}" for r in rows]
    return "\n".join(lines) + "\n"


def head_density(mask: np.ndarray, head_size: int) -> np.ndarray:
    """Density of each group of ``head_size`` consecutive columns."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise TensorError("head_density needs a 2-D mask")
    if head_size < 1 or mask.shape[1] % head_size:
        raise TensorError(f"{mask.shape[1]} columns do not split into heads of {head_size}")
    groups = mask.reshape(mask.shape[0], -1, head_size)
    return np.count_nonzero(groups, axis=(0, 2)) / (mask.shape[0] * head_size)


# --- row / column sparsity ------------------------------------------------------


@dataclass
class RowColSparsity:
    row_sparsity: np.ndarray
    col_sparsity: np.ndarray
    row_hist: np.ndarray
    col_hist: np.ndarray
    bin_edges: np.ndarray
    zero_row_fraction: float
    zero_col_fraction: float


def rowcol_sparsity_histogram(mask: np.ndarray, bins: int = 20) -> RowColSparsity:
    """Fraction of zeros in every row and column, histogrammed over [0, 1]."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise TensorError(f"row/column sparsity needs a 2-D mask, got shape {m.shape}")
    nz = m != 0
    rows = 1.0 - nz.sum(axis=1) / m.shape[1]
    cols = 1.0 - nz.sum(axis=0) / m.shape[0]
    edges = np.linspace(0.0, 1.0, bins + 1)
    return RowColSparsity(
        row_sparsity=rows,
        col_sparsity=cols,
        row_hist=np.histogram(rows, bins=edges)[0],
        col_hist=np.histogram(cols, bins=edges)[0],
        bin_edges=edges,
        zero_row_fraction=float(np.mean(rows == 1.0)),
        zero_col_fraction=float(np.mean(cols == 1.0)),
    )


# --- overlap ------------------------------------------------------------------


@dataclass
class OverlapGrid:
    """Per-coordinate subset codes (bit ``t`` set when expert ``t`` keeps it)."""

    expert_ids: list[str]
    codes: dict[str, np.ndarray]
    fractions: dict[str, dict[str, float]]

    def subset_key(self, code: int) -> str:
        return format(code, f"0{len(self.expert_ids)}b")


def mask_overlap(masksets: Sequence[SaliencyMaskSet]) -> OverlapGrid:
    """Classify each coordinate by the exact subset of experts keeping it.

    Fractions are reported per tensor and over the whole model under the key
    ``"__all__"``; subset keys are binary strings with expert 0 as the
    rightmost bit.
    """
    T = len(masksets)
    if not 2 <= T <= 8:
        raise TensorError(f"overlap needs between 2 and 8 experts, got {T}")
    names = sorted(masksets[0].masks)
    for ms in masksets[1:]:
        if sorted(ms.masks) != names:
            raise TensorError(f"expert {ms.expert_id!r} masks a different tensor set")
    n_subsets = 1 << T
    keys = [format(c, f"0{T}b") for c in range(n_subsets)]
    codes, fractions = {}, {}
    totals = np.zeros(n_subsets, dtype=np.int64)
    for name in names:
        shape = masksets[0].masks[name].shape
        for ms in masksets:
            if ms.masks[name].shape != shape:
                raise TensorError(f"{name}: mask shapes differ across experts")
        stack = np.ascontiguousarray(np.stack([np.asarray(ms.masks[name], dtype=np.uint8).ravel() for ms in masksets]))
        c = kernels.overlap_codes(stack)
        counts = np.bincount(c, minlength=n_subsets)
        totals += counts
        codes[name] = c.reshape(shape)
        fractions[name] = {k: float(v) / c.size if c.size else 0.0 for k, v in zip(keys, counts)}
    grand = int(totals.sum())
    fractions["__all__"] = {k: float(v) / grand if grand else 0.0 for k, v in zip(keys, totals)}
    return OverlapGrid([ms.expert_id for ms in masksets], codes, fractions)


# --- grids -------------------------------------------------------------------


def grid_strides(shape: tuple[int, int], target: int) -> tuple[int, int]:
    if target < 1:
        raise ValueError("target extent must be >= 1")
    m, n = shape
    return max(1, math.ceil(m / target)), max(1, math.ceil(n / target))


def downsample_grid(matrix: np.ndarray, target: int) -> np.ndarray:
    """Corner-anchored subsampling: ``out[i, j] = A[i*sr, j*sc]``."""
    a = np.asarray(matrix)
    if a.ndim != 2:
        raise TensorError(f"downsampling needs a 2-D matrix, got shape {a.shape}")
    sr, sc = grid_strides(a.shape, target)
    return a[::sr, ::sc]


def curvature_grid(v: np.ndarray, target: int, floor: float = LOG_FLOOR) -> np.ndarray:
    """``log10(sqrt(v) + floor)`` on the downsampled second moment."""
    g = np.asarray(downsample_grid(v, target), dtype=np.float64)
    if (g < 0).any():
        raise TensorError("second moment has negative entries")
    return np.log10(np.sqrt(g) + floor)


def maxmin_ratio_grid(vs: Sequence[np.ndarray], target: int, floor: float = LOG_FLOOR) -> np.ndarray:
    """Elementwise ``max_τ √v_τ / (min_τ √v_τ + floor)`` on downsampled moments."""
    if len(vs) < 2:
        raise TensorError("max-min ratio needs at least two experts")
    shape = np.shape(vs[0])
    if any(np.shape(v) != shape for v in vs):
        raise TensorError("second-moment shapes differ across experts")
    grids = [np.asarray(downsample_grid(v, target), dtype=np.float64) for v in vs]
    if any((g < 0).any() for g in grids):
        raise TensorError("second moment has negative entries")
    gshape = grids[0].shape
    stack = np.ascontiguousarray(np.stack([g.ravel() for g in grids]))
    return kernels.maxmin_ratio(stack, float(floor)).reshape(gshape)


def format_grid_csv(grid: np.ndarray, name: str, shape, stride, transform: str) -> str:
    grid = np.asarray(grid)
    head = f"# name={name} shape={shape[0]}x{shape[1]} stride={stride[0]},{stride[1]} transform={transform}"
    if grid.dtype.kind in "iub":
        body = [",".join(str(int(x)) for x in row) for row in grid]
    else:
        body = [",".join(repr(float(x)) for x in row) for row in grid]
    return "\n".join([head, *body]) + "\n"


def parse_grid_csv(text: str) -> tuple[dict[str, str], np.ndarray]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError("grid CSV must start with a '# ' header line")
    meta = dict(field.split("=", 1) for field in lines[0][2:].split())
    rows = [[float(x) for x in ln.split(",")] for ln in lines[1:] if ln]
    return meta, np.array(rows)


def grid_artifact(matrix: np.ndarray, target: int, name: str, transform: str = "identity") -> str:
    """Downsample ``matrix`` and render it as a CSV grid."""
    a = np.asarray(matrix)
    return format_grid_csv(downsample_grid(a, target), name, a.shape, grid_strides(a.shape, target), transform)


def overlap_fraction_docs(grid: OverlapGrid) -> list[dict]:
    return [{"tensor": name, "fractions": fr} for name, fr in grid.fractions.items()]

