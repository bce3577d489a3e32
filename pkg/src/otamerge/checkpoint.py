"""safetensors-layout containers and checkpoint bundles.

Container layout: an unsigned 64-bit little-endian header length ``N``, then
``N`` bytes of UTF-8 JSON mapping each tensor name to
``{"dtype", "shape", "data_offsets"}`` (plus an optional ``__metadata__``
string map), then the raw little-endian data section.

Canonical writes sort header keys, lay tensors out in sorted-name order with
contiguous offsets from zero and use compact JSON without padding, so equal
inputs always produce equal bytes.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .compression import FactoredSecondMoment
from .tensor import NamedTensor

DTYPES = {"F32": np.dtype("<f4"), "F64": np.dtype("<f8")}
_CODES = {np.dtype(np.float32): "F32", np.dtype(np.float64): "F64"}

MOMENT_SUFFIX = ".exp_avg_sq"
ROW_SUFFIX = MOMENT_SUFFIX + ".row"
COL_SUFFIX = MOMENT_SUFFIX + ".col"


class ContainerError(ValueError):
    """Malformed or unsupported container file."""


class BundleError(ValueError):
    """Inputs that cannot form a consistent checkpoint bundle."""


def _as_array(name, value) -> np.ndarray:
    arr = value.data if isinstance(value, NamedTensor) else np.asarray(value)
    if arr.dtype not in _CODES:
        raise ContainerError(f"{name}: unsupported dtype {arr.dtype}")
    return arr


def serialize(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None = None) -> bytes:
    header: dict = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        if not isinstance(name, str) or not name:
            raise ContainerError(f"invalid tensor name {name!r}")
        if name == "__metadata__":
            raise ContainerError("'__metadata__' is reserved")
        arr = _as_array(name, tensors[name])
        code = _CODES[arr.dtype]
        raw = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        header[name] = {"dtype": code, "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        chunks.append(raw)
        offset += len(raw)
    if metadata:
        meta = {}
        for k, v in metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ContainerError("metadata must map strings to strings")
            meta[k] = v
        header["__metadata__"] = meta
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def deserialize(buf: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if len(buf) < 8:
        raise ContainerError(f"{source}: truncated (no header length)")
    (n,) = struct.unpack("<Q", buf[:8])
    if n > len(buf) - 8:
        raise ContainerError(f"{source}: truncated header ({n} bytes declared, {len(buf) - 8} present)")
    try:
        header = json.loads(buf[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{source}: header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise ContainerError(f"{source}: header must be a JSON object")

    data = memoryview(buf)[8 + n :]
    metadata = header.pop("__metadata__", None) or {}
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise ContainerError(f"{source}: __metadata__ must be a string map")

    spans = []
    tensors = {}
    for name, info in header.items():
        if not isinstance(info, dict) or not {"dtype", "shape", "data_offsets"} <= info.keys():
            raise ContainerError(f"{source}: malformed entry for tensor {name!r}")
        code = info["dtype"]
        if code not in DTYPES:
            raise ContainerError(f"{source}: tensor {name!r} has unsupported dtype {code!r}")
        shape = info["shape"]
        if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
            raise ContainerError(f"{source}: tensor {name!r} has invalid shape {shape!r}")
        begin, end = info["data_offsets"]
        dtype = DTYPES[code]
        if not (0 <= begin <= end <= len(data)):
            raise ContainerError(f"{source}: tensor {name!r} offsets [{begin},{end}] out of bounds")
        if end - begin != math.prod(shape) * dtype.itemsize:
            raise ContainerError(f"{source}: tensor {name!r} byte length does not match shape {shape}")
        spans.append((begin, end, name))
        tensors[name] = np.frombuffer(data[begin:end], dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))

    spans.sort()
    for (b0, e0, n0), (b1, _, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise ContainerError(f"{source}: tensors {n0!r} and {n1!r} overlap")
    return tensors, dict(metadata)


def write_container(tensors: Mapping[str, np.ndarray], metadata: Mapping[str, str] | None, path) -> None:
    """Write atomically (temp file + rename) in canonical form."""
    blob = serialize(tensors, metadata)
    atomic_write_bytes(path, blob)


def read_container(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path)
    return deserialize(path.read_bytes(), source=str(path))


def atomic_write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- moments naming -----------------------------------------------------------


def moments_to_tensors(moments: Mapping[str, "np.ndarray | FactoredSecondMoment"], dtype=None) -> dict[str, np.ndarray]:
    """Flatten second moments into container entries using the suffix convention."""
    out = {}
    for name, v in moments.items():
        if isinstance(v, FactoredSecondMoment):
            dt = dtype or np.float64
            out[name + ROW_SUFFIX] = v.row.astype(dt)
            out[name + COL_SUFFIX] = v.col.astype(dt)
        else:
            out[name + MOMENT_SUFFIX] = np.asarray(v) if dtype is None else np.asarray(v, dtype=dtype)
    return out


def tensors_to_moments(tensors: Mapping[str, np.ndarray], source: str = "<moments>") -> dict:
    """Inverse of :func:`moments_to_tensors`; detects factored entries."""
    full, rows, cols = {}, {}, {}
    for key, arr in tensors.items():
        if key.endswith(ROW_SUFFIX):
            rows[key[: -len(ROW_SUFFIX)]] = arr
        elif key.endswith(COL_SUFFIX):
            cols[key[: -len(COL_SUFFIX)]] = arr
        elif key.endswith(MOMENT_SUFFIX):
            full[key[: -len(MOMENT_SUFFIX)]] = arr
        else:
            raise BundleError(f"{source}: {key!r} does not follow the '.exp_avg_sq' naming convention")
    out: dict = {}
    for name, arr in full.items():
        if name in rows or name in cols:
            raise BundleError(f"{source}: {name!r} has both full and factored second moments")
        out[name] = arr
    for name in sorted(set(rows) | set(cols)):
        if name not in rows or name not in cols:
            raise BundleError(f"{source}: {name!r} factored moment is missing its row or column part")
        try:
            out[name] = FactoredSecondMoment(rows[name], cols[name])
        except ValueError as exc:
            raise BundleError(f"{source}: {name!r}: {exc}") from None
    return out


# --- bundle -------------------------------------------------------------------


@dataclass
class CheckpointBundle:
    """Base weights, expert weights and (optionally) per-expert second moments.

    ``experts`` and ``second_moments`` are ordered lists of ``(expert_id, map)``.
    """

    base: dict[str, np.ndarray]
    experts: list[tuple[str, dict[str, np.ndarray]]]
    second_moments: list[tuple[str, dict]] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    @property
    def expert_ids(self) -> list[str]:
        return [eid for eid, _ in self.experts]

    def expert(self, expert_id: str) -> dict[str, np.ndarray]:
        return dict(self.experts)[expert_id]

    def moments(self, expert_id: str) -> dict | None:
        return dict(self.second_moments).get(expert_id)

    @property
    def has_moments(self) -> bool:
        ids = {eid for eid, _ in self.second_moments}
        return all(eid in ids for eid in self.expert_ids)

    def validate(self) -> None:
        names = set(self.base)
        ids = self.expert_ids
        if len(set(ids)) != len(ids):
            raise BundleError(f"duplicate expert ids in {ids}")
        for eid, weights in self.experts:
            missing = sorted(names - set(weights))
            extra = sorted(set(weights) - names)
            if missing:
                raise BundleError(f"expert {eid!r} is missing tensor {missing[0]!r}")
            if extra:
                raise BundleError(f"expert {eid!r} has tensor {extra[0]!r} not in the base")
            for n in names:
                if weights[n].shape != self.base[n].shape:
                    raise BundleError(f"expert {eid!r} tensor {n!r}: shape {weights[n].shape} != base {self.base[n].shape}")
        for eid, moments in self.second_moments:
            if eid not in ids:
                raise BundleError(f"second moments for unknown expert {eid!r}")
            missing = sorted(names - set(moments))
            extra = sorted(set(moments) - names)
            if missing:
                raise BundleError(f"expert {eid!r} second moments missing tensor {missing[0]!r}")
            if extra:
                raise BundleError(f"expert {eid!r} second moments have unknown tensor {extra[0]!r}")
            for n, v in moments.items():
                shape = self.base[n].shape
                if isinstance(v, FactoredSecondMoment):
                    if len(shape) != 2 or v.source_shape != tuple(shape):
                        raise BundleError(f"expert {eid!r} tensor {n!r}: factored shape {v.source_shape} != {shape}")
                    continue
                if v.shape != shape:
                    raise BundleError(f"expert {eid!r} tensor {n!r}: moment shape {v.shape} != {shape}")
                if (v < 0).any():
                    raise BundleError(f"expert {eid!r} tensor {n!r}: negative second moment")


def load_bundle(base_path, expert_paths, moment_paths=None, expert_ids=None) -> CheckpointBundle:
    """Read and validate a bundle.

    Expert ids come from ``expert_ids``, else the container metadata key
    ``expert_id``, else the file stem. ``moment_paths`` entries may be ``None``.
    """
    expert_paths = list(expert_paths)
    moment_paths = list(moment_paths) if moment_paths is not None else [None] * len(expert_paths)
    if len(moment_paths) != len(expert_paths):
        raise BundleError(f"{len(expert_paths)} experts but {len(moment_paths)} moment files")
    if expert_ids is not None and len(expert_ids) != len(expert_paths):
        raise BundleError("expert_ids length does not match expert_paths")

    base, _ = read_container(base_path)
    experts, moments = [], []
    for i, (wp, mp) in enumerate(zip(expert_paths, moment_paths)):
        weights, meta = read_container(wp)
        eid = expert_ids[i] if expert_ids is not None else meta.get("expert_id", Path(wp).stem)
        experts.append((eid, weights))
        if mp is not None:
            tensors, _ = read_container(mp)
            moments.append((eid, tensors_to_moments(tensors, source=str(mp))))
    return CheckpointBundle(base=base, experts=experts, second_moments=moments)
