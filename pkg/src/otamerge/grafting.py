"""Task vectors, FFG / magnitude saliency, global top-k masks and grafting."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import kernels
from .checkpoint import atomic_write_bytes, read_container, write_container
from .compression import FactoredSecondMoment
from .tensor import TensorError, topk_select

MASK_SUFFIX = ".mask"


def task_vector(expert: Mapping[str, np.ndarray], base: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """``expert - base`` per tensor, in float64."""
    if set(expert) != set(base):
        diff = sorted(set(expert) ^ set(base))
        raise TensorError(f"tensor {diff[0]!r} is present in only one of expert/base")
    out = {}
    for name in sorted(base):
        e, b = np.asarray(expert[name]), np.asarray(base[name])
        if e.shape != b.shape:
            raise TensorError(f"{name}: expert shape {e.shape} != base shape {b.shape}")
        out[name] = e.astype(np.float64) - b.astype(np.float64)
    return out


def _moment_saliency(name: str, d: np.ndarray, v) -> np.ndarray:
    if isinstance(v, FactoredSecondMoment):
        if d.shape != v.source_shape:
            raise TensorError(f"{name}: factored moment {v.source_shape} vs delta {d.shape}")
        return kernels.ffg_saliency_factored(np.ascontiguousarray(d), v.row, v.col, v.total)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != d.shape:
        raise TensorError(f"{name}: moment shape {v.shape} != delta shape {d.shape}")
    if (v < 0).any():
        idx = int(np.flatnonzero((v < 0).ravel())[0])
        raise TensorError(f"{name}: negative second moment at flat index {idx}")
    flat = kernels.ffg_saliency(np.ascontiguousarray(d).ravel(), np.ascontiguousarray(v).ravel())
    return flat.reshape(d.shape)


def ffg_saliency(delta: Mapping[str, np.ndarray], second_moment: Mapping) -> dict[str, np.ndarray]:
    """Curvature-weighted edit saliency ``Δ² · v``.

    Factored moments are expanded one tensor at a time.
    """
    missing = sorted(set(delta) - set(second_moment))
    if missing:
        raise TensorError(f"no second moment for tensor {missing[0]!r}")
    return {n: _moment_saliency(n, np.asarray(delta[n], dtype=np.float64), second_moment[n]) for n in sorted(delta)}


def magnitude_saliency(delta: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {n: np.abs(np.asarray(delta[n], dtype=np.float64)) for n in sorted(delta)}


def kept_count(density: float, total: int) -> int:
    """``round(density * total)`` with halves rounded up."""
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must lie in [0, 1], got {density}")
    return min(total, int(math.floor(density * total + 0.5)))


@dataclass
class SaliencyMaskSet:
    expert_id: str
    masks: dict[str, np.ndarray]
    requested_density: float
    realized_kept_count: int
    method: str
    # tensors excluded from ranking keep their whole update
    excluded: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(m.size for n, m in self.masks.items() if n not in self.excluded)

    @property
    def kept_including_excluded(self) -> int:
        return self.realized_kept_count + sum(self.masks[n].size for n in self.excluded)

    def sidecar(self) -> dict:
        return {
            "expert_id": self.expert_id,
            "method": self.method,
            "requested_density": self.requested_density,
            "realized_kept_count": self.realized_kept_count,
        }


def build_mask(
    saliency: Mapping[str, np.ndarray],
    density: float,
    expert_id: str = "",
    method: str = "ffg",
    exclude: Iterable[str] = (),
) -> SaliencyMaskSet:
    """Keep the globally top-``round(density·total)`` coordinates.

    ``exclude`` holds regular expressions; matching tensors are left out of the
    ranking and keep every coordinate.
    """
    patterns = [re.compile(p) for p in exclude]
    excluded = sorted(n for n in saliency if any(p.search(n) for p in patterns))
    ranked = {n: saliency[n] for n in saliency if n not in excluded}
    total = sum(np.asarray(s).size for s in ranked.values())
    k = kept_count(density, total)
    masks = topk_select(ranked, k)
    for n in excluded:
        masks[n] = np.ones(np.shape(saliency[n]), dtype=bool)
    masks = {n: masks[n] for n in sorted(masks)}
    return SaliencyMaskSet(expert_id, masks, float(density), k, method, excluded)


def apply_graft(base: Mapping[str, np.ndarray], expert: Mapping[str, np.ndarray], masks: Mapping[str, np.ndarray]):
    """Keep the expert value where the mask is set and revert to base elsewhere."""
    out = {}
    for name in sorted(base):
        m = np.asarray(masks[name])
        if m.dtype != bool:
            if not np.isin(m, (0, 1)).all():
                raise TensorError(f"{name}: mask is not binary")
            m = m.astype(bool)
        b, e = np.asarray(base[name]), np.asarray(expert[name])
        if not (m.shape == b.shape == e.shape):
            raise TensorError(f"{name}: inconsistent shapes mask {m.shape}, base {b.shape}, expert {e.shape}")
        out[name] = np.where(m, e, b)
    return out


def full_masks(weights: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {n: np.ones(np.shape(w), dtype=bool) for n, w in weights.items()}


def mask_expert(
    base: Mapping[str, np.ndarray],
    expert: Mapping[str, np.ndarray],
    density: float,
    method: str = "ffg",
    second_moment: Mapping | None = None,
    expert_id: str = "",
    exclude: Iterable[str] = (),
) -> SaliencyMaskSet:
    """Task vector, saliency and mask in one call."""
    delta = task_vector(expert, base)
    if method == "ffg":
        if second_moment is None:
            raise ValueError(f"expert {expert_id!r}: FFG needs second moments")
        sal = ffg_saliency(delta, second_moment)
    elif method == "magnitude":
        sal = magnitude_saliency(delta)
    else:
        raise ValueError(f"unknown saliency method {method!r}")
    return build_mask(sal, density, expert_id=expert_id, method=method, exclude=exclude)


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_masks(maskset: SaliencyMaskSet, path) -> None:
    """Masks as F32 0/1 tensors ``<weight>.mask`` plus a JSON sidecar."""
    tensors = {n + MASK_SUFFIX: m.astype(np.float32) for n, m in maskset.masks.items()}
    write_container(tensors, {"expert_id": maskset.expert_id, "method": maskset.method}, path)
    doc = json.dumps(maskset.sidecar(), indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(sidecar_path(path), doc.encode("utf-8"))


def read_masks(path) -> SaliencyMaskSet:
    tensors, meta = read_container(path)
    side = sidecar_path(path)
    info = json.loads(side.read_text()) if side.exists() else {}
    masks = {}
    for key, arr in tensors.items():
        if not key.endswith(MASK_SUFFIX):
            raise TensorError(f"{path}: unexpected entry {key!r} in mask container")
        if not np.isin(arr, (0, 1)).all():
            raise TensorError(f"{key}: mask is not binary")
        masks[key[: -len(MASK_SUFFIX)]] = arr.astype(bool)
    kept = sum(int(m.sum()) for m in masks.values())
    return SaliencyMaskSet(
        expert_id=info.get("expert_id", meta.get("expert_id", Path(path).stem)),
        masks={n: masks[n] for n in sorted(masks)},
        requested_density=float(info.get("requested_density", kept / max(1, sum(m.size for m in masks.values())))),
        realized_kept_count=int(info.get("realized_kept_count", kept)),
        method=info.get("method", meta.get("method", "unknown")),
    )
