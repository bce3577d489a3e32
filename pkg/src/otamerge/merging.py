"""Merge rules: OTA, linear averaging, task arithmetic, Fisher averaging, TIES.

Every method accepts optional per-expert binary masks. A masked expert is the
*grafted* expert (its update reverted to base outside the mask), so masks and
aggregation rules combine freely. Experts are always summed in sorted-id
order, which makes outputs independent of the order experts were listed in.
All arithmetic is float64; outputs are cast to the base tensor's dtype.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import kernels
from ._accel import thread_cap
from .checkpoint import CheckpointBundle, load_bundle
from .compression import FactoredSecondMoment, compress
from .grafting import SaliencyMaskSet, kept_count, mask_expert
from .tensor import TensorError, topk_select

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-8
METHODS = ("ota", "linear", "task_arithmetic", "fisher", "ties")
SALIENCIES = ("ffg", "magnitude", "none")

Masks = Mapping[str, Mapping[str, np.ndarray]]


class RecipeError(ValueError):
    """A merge recipe that fails validation."""


# --- helpers --------------------------------------------------------------------


def build_preconditioner(v, eps: float = DEFAULT_EPSILON) -> np.ndarray:
    """``sqrt(v) + eps``; factored moments are reconstructed first."""
    if eps < 0:
        raise ValueError(f"epsilon must be nonnegative, got {eps}")
    if isinstance(v, FactoredSecondMoment):
        return kernels.precond_factored(v.row, v.col, v.total, float(eps))
    v = np.asarray(v, dtype=np.float64)
    if (v < 0).any():
        idx = int(np.flatnonzero((v < 0).ravel())[0])
        raise TensorError(f"negative second moment at flat index {idx}")
    return kernels.precond(np.ascontiguousarray(v).ravel(), float(eps)).reshape(v.shape)


def dense_moment(v) -> np.ndarray:
    if isinstance(v, FactoredSecondMoment):
        return kernels.reconstruct(v.row, v.col, v.total)
    return np.asarray(v, dtype=np.float64)


def _order(bundle: CheckpointBundle) -> list[str]:
    if not bundle.experts:
        raise ValueError("at least one expert is required")
    return sorted(bundle.expert_ids)


def _grafted(bundle: CheckpointBundle, eid: str, name: str, masks: Masks | None) -> np.ndarray:
    w = np.asarray(bundle.expert(eid)[name], dtype=np.float64)
    if masks is None or eid not in masks:
        return w
    m = np.asarray(masks[eid][name])
    if m.shape != w.shape:
        raise TensorError(f"{name}: mask shape {m.shape} != weight shape {w.shape}")
    return np.where(m.astype(bool), w, np.asarray(bundle.base[name], dtype=np.float64))


def _require_moments(bundle: CheckpointBundle, order: list[str]) -> dict[str, dict]:
    moments = dict(bundle.second_moments)
    missing = [eid for eid in order if eid not in moments]
    if missing:
        raise ValueError(f"second moments missing for expert {missing[0]!r}")
    return moments


def _per_tensor(bundle: CheckpointBundle, fn: Callable[[str], np.ndarray]) -> dict[str, np.ndarray]:
    names = sorted(bundle.base)
    workers = min(thread_cap(), len(names)) or 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, names))
    else:
        results = [fn(n) for n in names]
    return {n: r.astype(np.asarray(bundle.base[n]).dtype, copy=False) for n, r in zip(names, results)}


def _weighted(stack: list[np.ndarray], weights: list[np.ndarray]) -> np.ndarray:
    shape = stack[0].shape
    x = np.ascontiguousarray(np.stack([s.ravel() for s in stack]))
    c = np.ascontiguousarray(np.stack([np.broadcast_to(w, shape).ravel() for w in weights]), dtype=np.float64)
    return kernels.weighted_average(x, c).reshape(shape)


# --- merge rules ----------------------------------------------------------------


def ota_merge(
    bundle: CheckpointBundle,
    masks: Masks | None = None,
    eps: float = DEFAULT_EPSILON,
    masked_denominator: bool = False,
) -> dict[str, np.ndarray]:
    """Curvature-preconditioned average of the masked task vectors.

    ``merged = w0 + (Σ P_τ)⁻¹ Σ P_τ (m_τ ∘ Δ_τ)`` with ``P_τ = Diag(√v_τ + ε)``.
    The denominator sums every expert's preconditioner, masked or not. With
    ``masked_denominator=True`` only experts keeping coordinate ``i`` vote on it.
    """
    order = _order(bundle)
    moments = _require_moments(bundle, order)

    def merge(name: str) -> np.ndarray:
        values, weights = [], []
        for eid in order:
            p = build_preconditioner(moments[eid][name], eps)
            if masked_denominator and masks is not None and eid in masks:
                p = p * np.asarray(masks[eid][name], dtype=bool)
            values.append(_grafted(bundle, eid, name, masks))
            weights.append(p)
        return _weighted(values, weights)

    return _per_tensor(bundle, merge)


def linear_merge(
    bundle: CheckpointBundle,
    weights: Mapping[str, float] | None = None,
    masks: Masks | None = None,
) -> dict[str, np.ndarray]:
    """``Σ λ_τ w_τ / Σ λ_τ``, uniform by default."""
    order = _order(bundle)
    lam = {eid: 1.0 for eid in order} if weights is None else {eid: float(weights[eid]) for eid in order}
    if any(v < 0 for v in lam.values()):
        raise ValueError("linear weights must be nonnegative")
    if sum(lam.values()) <= 0:
        raise ValueError("linear weights must not all be zero")

    def merge(name: str) -> np.ndarray:
        values = [_grafted(bundle, eid, name, masks) for eid in order]
        return _weighted(values, [np.float64(lam[eid]) for eid in order])

    return _per_tensor(bundle, merge)


def task_arithmetic_merge(
    bundle: CheckpointBundle, masks: Masks | None = None, lam: float = 1.0
) -> dict[str, np.ndarray]:
    """``w0 + (λ/T) Σ_τ m_τ ∘ Δ_τ``."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    order = _order(bundle)
    scale = lam / len(order)

    def merge(name: str) -> np.ndarray:
        base = np.asarray(bundle.base[name], dtype=np.float64)
        acc = np.zeros_like(base)
        for eid in order:
            acc = acc + (_grafted(bundle, eid, name, masks) - base)
        return base + scale * acc

    return _per_tensor(bundle, merge)


def fisher_merge(
    bundle: CheckpointBundle, eps: float = DEFAULT_EPSILON, masks: Masks | None = None
) -> dict[str, np.ndarray]:
    """Diagonal-Fisher weighted average ``Σ (v_τ+ε) w_τ / Σ (v_τ+ε)``."""
    order = _order(bundle)
    moments = _require_moments(bundle, order)
    if eps < 0:
        raise ValueError(f"epsilon must be nonnegative, got {eps}")

    def merge(name: str) -> np.ndarray:
        values = [_grafted(bundle, eid, name, masks) for eid in order]
        weights = [dense_moment(moments[eid][name]) + eps for eid in order]
        return _weighted(values, weights)

    return _per_tensor(bundle, merge)


def ties_merge(
    bundle: CheckpointBundle, ties_density: float, lam: float = 1.0, masks: Masks | None = None
) -> dict[str, np.ndarray]:
    """Trim each task vector to its top-|Δ| fraction, elect signs by summed
    mass, then average only the agreeing entries."""
    if not 0.0 < ties_density <= 1.0:
        raise ValueError(f"ties_density must lie in (0, 1], got {ties_density}")
    order = _order(bundle)
    trimmed: dict[str, dict[str, np.ndarray]] = {}
    for eid in order:
        delta = {n: _grafted(bundle, eid, n, masks) - np.asarray(bundle.base[n], dtype=np.float64) for n in bundle.base}
        mags = {n: np.abs(d) for n, d in delta.items()}
        keep = topk_select(mags, kept_count(ties_density, sum(d.size for d in delta.values())))
        trimmed[eid] = {n: np.where(keep[n], delta[n], 0.0) for n in delta}

    def merge(name: str) -> np.ndarray:
        base = np.asarray(bundle.base[name], dtype=np.float64)
        stack = np.ascontiguousarray(np.stack([trimmed[eid][name].ravel() for eid in order]))
        return base + lam * kernels.ties_combine(stack).reshape(base.shape)

    return _per_tensor(bundle, merge)


def ota_objective(merged, base, deltas, masks, precond) -> float:
    """``Σ_τ ‖(merged − w0) − m_τ∘Δ_τ‖²_{P_τ}`` for flat arrays (lists over τ)."""
    d = np.asarray(merged, dtype=np.float64) - np.asarray(base, dtype=np.float64)
    return float(sum(np.sum(p * (d - m * dt) ** 2) for dt, m, p in zip(deltas, masks, precond)))


# --- recipes --------------------------------------------------------------------


@dataclass
class ExpertSpec:
    id: str
    weights_path: str
    moments_path: str | None = None
    density: float | None = None
    saliency: str = "none"
    weight: float = 1.0


@dataclass
class MergeRecipe:
    method: str
    base: str
    experts: list[ExpertSpec]
    output: str
    epsilon: float = DEFAULT_EPSILON
    ties_density: float | None = None
    lam: float = 1.0
    use_factored_moments: bool = False
    masked_denominator: bool = False
    exclude: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise RecipeError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.experts:
            raise RecipeError("recipe lists no experts")
        ids = [e.id for e in self.experts]
        if len(set(ids)) != len(ids):
            raise RecipeError(f"duplicate expert ids: {ids}")
        if self.method in ("ota", "fisher") and not self.epsilon > 0:
            raise RecipeError(f"epsilon must be > 0, got {self.epsilon}")
        if self.method == "ties" and not (self.ties_density is not None and 0 < self.ties_density <= 1):
            raise RecipeError("ties needs ties_density in (0, 1]")
        if self.method in ("task_arithmetic", "ties") and not self.lam > 0:
            raise RecipeError(f"lambda must be > 0, got {self.lam}")
        for e in self.experts:
            if e.saliency not in SALIENCIES:
                raise RecipeError(f"expert {e.id!r}: unknown saliency {e.saliency!r}")
            if e.density is not None and not 0.0 <= e.density <= 1.0:
                raise RecipeError(f"expert {e.id!r}: density {e.density} outside [0, 1]")
            if e.saliency != "none" and e.density is None:
                raise RecipeError(f"expert {e.id!r}: saliency {e.saliency!r} needs a density")
            needs_moments = self.method in ("ota", "fisher") or e.saliency == "ffg"
            if needs_moments and not e.moments_path:
                raise RecipeError(f"expert {e.id!r}: method {self.method!r}/saliency {e.saliency!r} needs moments_path")
            if e.weight < 0:
                raise RecipeError(f"expert {e.id!r}: negative weight")

    @classmethod
    def from_dict(cls, doc: dict, root: Path | None = None) -> "MergeRecipe":
        known = {"method", "epsilon", "experts", "base", "output", "ties_density", "lambda",
                 "use_factored_moments", "masked_denominator", "exclude"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise RecipeError(f"unknown recipe key {unknown[0]!r}")
        for key in ("method", "base", "experts", "output"):
            if key not in doc:
                raise RecipeError(f"recipe is missing {key!r}")

        def resolve(p):
            if p is None:
                return None
            p = Path(p)
            return str(p if p.is_absolute() or root is None else root / p)

        experts = []
        for i, e in enumerate(doc["experts"]):
            if not isinstance(e, dict) or "id" not in e or "weights_path" not in e:
                raise RecipeError(f"expert #{i} needs 'id' and 'weights_path'")
            extra = sorted(set(e) - {"id", "weights_path", "moments_path", "density", "saliency", "weight"})
            if extra:
                raise RecipeError(f"expert {e['id']!r}: unknown key {extra[0]!r}")
            density = e.get("density")
            saliency = e.get("saliency", "ffg" if density is not None else "none")
            experts.append(ExpertSpec(
                id=str(e["id"]),
                weights_path=resolve(e["weights_path"]),
                moments_path=resolve(e.get("moments_path")),
                density=None if density is None else float(density),
                saliency=saliency,
                weight=float(e.get("weight", 1.0)),
            ))
        recipe = cls(
            method=doc["method"],
            base=resolve(doc["base"]),
            experts=experts,
            output=resolve(doc["output"]),
            epsilon=float(doc.get("epsilon", DEFAULT_EPSILON)),
            ties_density=None if doc.get("ties_density") is None else float(doc["ties_density"]),
            lam=float(doc.get("lambda", 1.0)),
            use_factored_moments=bool(doc.get("use_factored_moments", False)),
            masked_denominator=bool(doc.get("masked_denominator", False)),
            exclude=list(doc.get("exclude", [])),
        )
        recipe.validate()
        return recipe

    @classmethod
    def from_json(cls, path) -> "MergeRecipe":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise RecipeError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise RecipeError(f"{path}: recipe must be a JSON object")
        return cls.from_dict(doc, root=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass
class MergeResult:
    merged: dict[str, np.ndarray]
    masksets: dict[str, SaliencyMaskSet]
    report: dict


def factor_moments(moments: Mapping) -> dict:
    """Compress every full 2-D moment; 1-D moments stay full."""
    out = {}
    for name, v in moments.items():
        if not isinstance(v, FactoredSecondMoment) and np.ndim(v) == 2:
            out[name] = compress(v)
        else:
            out[name] = v
    return out


def tensor_stats(base: Mapping[str, np.ndarray], merged: Mapping[str, np.ndarray]) -> list[dict]:
    rows = []
    for name in sorted(merged):
        d = np.asarray(merged[name], dtype=np.float64) - np.asarray(base[name], dtype=np.float64)
        rows.append({
            "tensor": name,
            "numel": int(d.size),
            "rms_change": float(np.sqrt(np.mean(d * d))) if d.size else 0.0,
            "max_abs_change": float(np.max(np.abs(d))) if d.size else 0.0,
        })
    return rows


def execute_recipe(recipe: MergeRecipe) -> MergeResult:
    """Load inputs, mask each expert per its saliency/density, then merge."""
    recipe.validate()
    bundle = load_bundle(
        recipe.base,
        [e.weights_path for e in recipe.experts],
        [e.moments_path for e in recipe.experts],
        expert_ids=[e.id for e in recipe.experts],
    )
    if recipe.use_factored_moments:
        bundle.second_moments = [(eid, factor_moments(m)) for eid, m in bundle.second_moments]

    masksets: dict[str, SaliencyMaskSet] = {}
    for entry in recipe.experts:
        if entry.saliency == "none":
            continue
        masksets[entry.id] = mask_expert(
            bundle.base, bundle.expert(entry.id), entry.density, method=entry.saliency,
            second_moment=bundle.moments(entry.id), expert_id=entry.id, exclude=recipe.exclude,
        )
        log.info("expert %s: kept %d coordinates (%s, density %.4g)",
                 entry.id, masksets[entry.id].realized_kept_count, entry.saliency, entry.density)
    masks = {eid: ms.masks for eid, ms in masksets.items()} or None

    if recipe.method == "ota":
        merged = ota_merge(bundle, masks, recipe.epsilon, recipe.masked_denominator)
    elif recipe.method == "linear":
        merged = linear_merge(bundle, {e.id: e.weight for e in recipe.experts}, masks)
    elif recipe.method == "task_arithmetic":
        merged = task_arithmetic_merge(bundle, masks, recipe.lam)
    elif recipe.method == "fisher":
        merged = fisher_merge(bundle, recipe.epsilon, masks)
    else:
        merged = ties_merge(bundle, recipe.ties_density, recipe.lam, masks)

    total = sum(np.asarray(w).size for w in bundle.base.values())
    report = {
        "method": recipe.method,
        "experts": [
            {
                "id": e.id,
                "saliency": e.saliency,
                "requested_density": e.density,
                "realized_kept_count": masksets[e.id].realized_kept_count if e.id in masksets else total,
                "realized_density": (masksets[e.id].kept_including_excluded if e.id in masksets else total) / total,
            }
            for e in sorted(recipe.experts, key=lambda e: e.id)
        ],
        "total_parameters": total,
        "tensors": tensor_stats(bundle.base, merged),
    }
    return MergeResult(merged, masksets, report)

