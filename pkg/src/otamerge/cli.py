"""``ota-merge`` command-line entry point.

Exit codes: 0 when every invariant of the invoked pipeline held, 1 when an
invariant check failed, 2 for invalid input (bad recipe, malformed container,
inconsistent bundle, bad arguments).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, analysis, compression, grafting, merging, toy
from .checkpoint import (
    CheckpointBundle,
    load_bundle,
    moments_to_tensors,
    read_container,
    serialize,
    tensors_to_moments,
    write_container,
    atomic_write_bytes,
)
from .compression import FactoredSecondMoment

log = logging.getLogger("otamerge")


class InvariantFailure(RuntimeError):
    """A post-condition of the pipeline did not hold."""


# --- helpers ------------------------------------------------------------------


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, doc) -> None:
    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n").encode("utf-8"))


def write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


class Manifest:
    """Collects digests and paths; written only after the pipeline succeeds."""

    def __init__(self, subcommand: str, args: dict):
        self.subcommand = subcommand
        self.args = args
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.t0 = time.perf_counter()

    def to_dict(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "recipe": self.args,
            "inputs": {str(p): sha256(p) for p in self.inputs},
            "outputs": {str(p): sha256(p) for p in self.outputs},
            "wall_clock_seconds": time.perf_counter() - self.t0,
            "version": __version__,
        }

    def write(self, path) -> None:
        write_json(path, self.to_dict())
        log.info("manifest written to %s", path)


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise InvariantFailure(message)


def _moments_from(path) -> dict:
    tensors, _ = read_container(path)
    return tensors_to_moments(tensors, source=str(path))


def _dense(v) -> np.ndarray:
    return compression.reconstruct(v) if isinstance(v, FactoredSecondMoment) else np.asarray(v, dtype=np.float64)


# --- merge --------------------------------------------------------------------


def cmd_merge(args) -> int:
    recipe = merging.MergeRecipe.from_json(args.recipe)
    manifest = Manifest("merge", recipe.to_dict())
    manifest.inputs = [Path(args.recipe), Path(recipe.base)]
    for e in recipe.experts:
        manifest.inputs.append(Path(e.weights_path))
        if e.moments_path:
            manifest.inputs.append(Path(e.moments_path))

    result = merging.execute_recipe(recipe)
    for e in result.report["experts"]:
        ms = result.masksets.get(e["id"])
        if ms is not None:
            _check(ms.realized_kept_count == grafting.kept_count(ms.requested_density, ms.total),
                   f"expert {e['id']}: realized kept count does not match the requested density")
    for name, w in result.merged.items():
        _check(bool(np.isfinite(w).all()), f"merged tensor {name!r} is not finite")

    out = Path(recipe.output)
    meta = {"method": recipe.method, "experts": ",".join(sorted(e.id for e in recipe.experts))}
    write_container(result.merged, meta, out)
    report_path = out.with_name(out.name + ".report.json")
    write_json(report_path, result.report)
    manifest.outputs = [out, report_path]
    if result.masksets:
        rows = []
        for eid in sorted(result.masksets):
            rows += [(eid, r) for r in analysis.density_report(result.masksets[eid])]
        density_path = out.with_name(out.name + ".density.csv")
        lines = ["expert,layer,role,tensor,kept,total,density"]
        lines += [f"{eid},{r.layer},{r.role},{r.tensor},{r.kept},{r.total},{r.density!r}" for eid, r in rows]
        write_text(density_path, "\n".join(lines) + "\n")
        manifest.outputs.append(density_path)
    manifest.write(Path(args.manifest) if args.manifest else out.with_name(out.name + ".manifest.json"))
    log.info("merged %d experts with %s into %s", len(recipe.experts), recipe.method, out)
    return 0


# --- graft --------------------------------------------------------------------


def cmd_graft(args) -> int:
    if args.method == "ffg" and not args.moments:
        raise ValueError("--method ffg needs --moments")
    moment_paths = [args.moments] if args.moments else None
    bundle = load_bundle(args.base, [args.expert], moment_paths)
    eid = bundle.expert_ids[0]
    ms = grafting.mask_expert(bundle.base, bundle.expert(eid), args.density, method=args.method,
                              second_moment=bundle.moments(eid), expert_id=eid, exclude=args.exclude)
    _check(ms.realized_kept_count == grafting.kept_count(args.density, ms.total),
           "realized kept count does not match round(density * total)")
    grafted = grafting.apply_graft(bundle.base, bundle.expert(eid), ms.masks)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"expert_id": eid, "method": args.method, "density": repr(float(args.density))}
    write_container(grafted, meta, out / "grafted.safetensors")
    grafting.write_masks(ms, out / "mask.safetensors")
    write_text(out / "density.csv", analysis.format_density_csv(analysis.density_report(ms)))

    manifest = Manifest("graft", {k: v for k, v in vars(args).items() if k not in ("func",)})
    manifest.inputs = [Path(p) for p in (args.base, args.expert, args.moments) if p]
    manifest.outputs = [out / "grafted.safetensors", out / "mask.safetensors", out / "mask.json", out / "density.csv"]
    manifest.write(Path(args.manifest) if args.manifest else out / "manifest.json")
    log.info("%s: kept %d of %d coordinates", eid, ms.realized_kept_count, ms.total)
    return 0


# --- compress -----------------------------------------------------------------


def cmd_compress(args) -> int:
    src = Path(args.moments)
    tensors, meta = read_container(src)
    moments = tensors_to_moments(tensors, source=str(src))
    factored = merging.factor_moments(moments)
    rows = []
    for name in sorted(factored):
        v = factored[name]
        if not isinstance(v, FactoredSecondMoment):
            rows.append({"tensor": name, "factored": False, "full_values": int(np.size(v)), "stored_values": int(np.size(v))})
            continue
        orig = _dense(moments[name])
        rec = compression.reconstruct(v)
        scale = float(np.max(orig)) if orig.size else 0.0
        err = float(np.max(np.abs(rec - orig)) / scale) if scale > 0 else 0.0
        row_err = _marginal_error(rec.sum(axis=1), orig.sum(axis=1))
        col_err = _marginal_error(rec.sum(axis=0), orig.sum(axis=0))
        _check(bool((rec >= 0).all()), f"{name}: reconstruction has negative entries")
        _check(row_err <= 1e-9 and col_err <= 1e-9, f"{name}: row/column sums not preserved")
        rows.append({
            "tensor": name,
            "factored": True,
            "shape": list(v.source_shape),
            "full_values": int(orig.size),
            "stored_values": v.stored_values,
            "max_relative_reconstruction_error": err,
            "row_sum_relative_error": row_err,
            "col_sum_relative_error": col_err,
        })

    out = Path(args.out)
    write_container(moments_to_tensors(factored), meta, out)
    report = {
        "source": str(src),
        "output": str(out),
        "source_bytes": src.stat().st_size,
        "output_bytes": out.stat().st_size,
        "full_values": sum(r["full_values"] for r in rows),
        "stored_values": sum(r["stored_values"] for r in rows),
        "tensors": rows,
    }
    report_path = Path(args.report) if args.report else out.with_name(out.name + ".report.json")
    write_json(report_path, report)
    if args.manifest:
        m = Manifest("compress", {"moments": str(src), "out": str(out)})
        m.inputs, m.outputs = [src], [out, report_path]
        m.write(args.manifest)
    log.info("compressed %d -> %d values", report["full_values"], report["stored_values"])
    return 0


def _marginal_error(got: np.ndarray, want: np.ndarray) -> float:
    scale = float(np.max(np.abs(want))) if want.size else 0.0
    return float(np.max(np.abs(got - want)) / scale) if scale > 0 else 0.0


# --- analyze ------------------------------------------------------------------


def _selected(names, tensor: str | None, ndim2: dict | None = None) -> list[str]:
    if tensor:
        if tensor not in names:
            raise ValueError(f"no tensor named {tensor!r}")
        return [tensor]
    return [n for n in sorted(names) if ndim2 is None or np.ndim(ndim2[n]) == 2 or isinstance(ndim2[n], FactoredSecondMoment)]


def _grid_files(out: Path, tensor: str | None, names: list[str]) -> dict[str, Path]:
    if tensor:
        return {tensor: out}
    out.mkdir(parents=True, exist_ok=True)
    return {n: out / f"{n}.csv" for n in names}


def analyze_density(args) -> int:
    masksets = [grafting.read_masks(p) for p in args.masks]
    lines = ["expert,layer,role,tensor,kept,total,density"]
    for ms in masksets:
        rows = analysis.density_report(ms, args.pattern)
        _check(sum(r.kept for r in rows) == ms.kept_including_excluded,
               f"{ms.expert_id}: density report does not match the realized mask count")
        lines += [f"{ms.expert_id},{r.layer},{r.role},{r.tensor},{r.kept},{r.total},{r.density!r}" for r in rows]
    write_text(args.out, "\n".join(lines) + "\n")
    if args.head_size:
        heads = []
        for ms in masksets:
            for name in sorted(ms.masks):
                layer, role = analysis.parse_layer_role(name, args.pattern)
                m = ms.masks[name]
                if m.ndim != 2 or (args.head_role and role != args.head_role):
                    continue
                d = analysis.head_density(m, args.head_size)
                heads.append({"expert": ms.expert_id, "tensor": name, "layer": layer, "role": role,
                              "head_density": [float(x) for x in d]})
        write_json(Path(args.out).with_suffix(".heads.json"), heads)
    return 0


def analyze_histogram(args) -> int:
    ms = grafting.read_masks(args.masks)
    docs = []
    for name in _selected(ms.masks, args.tensor, ms.masks):
        h = analysis.rowcol_sparsity_histogram(ms.masks[name], bins=args.bins)
        docs.append({
            "tensor": name,
            "bin_edges": h.bin_edges.tolist(),
            "row_hist": h.row_hist.tolist(),
            "col_hist": h.col_hist.tolist(),
            "zero_row_fraction": h.zero_row_fraction,
            "zero_col_fraction": h.zero_col_fraction,
        })
    write_json(args.out, {"expert_id": ms.expert_id, "tensors": docs})
    return 0


def analyze_overlap(args) -> int:
    masksets = [grafting.read_masks(p) for p in args.masks]
    grid = analysis.mask_overlap(masksets)
    for name, fr in grid.fractions.items():
        _check(abs(sum(fr.values()) - 1.0) <= 1e-12, f"{name}: overlap fractions do not sum to 1")
    write_json(args.out, {"expert_ids": grid.expert_ids, "overlap": analysis.overlap_fraction_docs(grid)})
    if args.grid_dir:
        names = [n for n in _selected(grid.codes, args.tensor) if grid.codes[n].ndim == 2]
        for name, path in _grid_files(Path(args.grid_dir), None, names).items():
            write_text(path, analysis.grid_artifact(grid.codes[name], args.target, name, "subset-code"))
    return 0


def analyze_curvature(args) -> int:
    moments = _moments_from(args.moments)
    names = _selected(moments, args.tensor, moments)
    for name, path in _grid_files(Path(args.out), args.tensor, names).items():
        v = _dense(moments[name])
        g = analysis.curvature_grid(v, args.target)
        write_text(path, analysis.format_grid_csv(g, name, v.shape, analysis.grid_strides(v.shape, args.target), "log10_sqrt"))
    return 0


def analyze_maxmin(args) -> int:
    all_moments = [_moments_from(p) for p in args.moments]
    names = _selected(all_moments[0], args.tensor, all_moments[0])
    for name, path in _grid_files(Path(args.out), args.tensor, names).items():
        vs = [_dense(m[name]) for m in all_moments]
        g = analysis.maxmin_ratio_grid(vs, args.target)
        _check(bool((g >= 1.0 - 1e-12).all()), f"{name}: max-min ratio below 1")
        shape = vs[0].shape
        write_text(path, analysis.format_grid_csv(g, name, shape, analysis.grid_strides(shape, args.target), "maxmin_sqrt"))
    return 0


def analyze_stable_rank(args) -> int:
    loaded = [read_container(p) for p in args.moments]
    ids = args.ids or [meta.get("expert_id", Path(p).name.split(".")[0]) for p, (_, meta) in zip(args.moments, loaded)]
    if len(ids) != len(args.moments) or len(set(ids)) != len(ids):
        raise ValueError("--ids must give one distinct id per moments file")
    moments = [(eid, tensors_to_moments(t, source=str(p))) for eid, p, (t, _) in zip(ids, args.moments, loaded)]
    rows, skipped = compression.stable_rank_report(moments, args.pattern)
    for eid, name, _, _, sr in rows:
        n = min(_dense(dict(moments)[eid][name]).shape)
        _check(1.0 - 1e-9 <= sr <= n * (1 + 1e-9), f"{eid}/{name}: stable rank {sr} outside [1, {n}]")
    write_text(args.out, compression.format_stable_rank_csv(rows))
    for eid, name in skipped:
        log.warning("%s/%s: factored moment skipped", eid, name)
    return 0


ANALYSES = {
    "density": analyze_density,
    "histogram": analyze_histogram,
    "overlap": analyze_overlap,
    "curvature": analyze_curvature,
    "maxmin": analyze_maxmin,
    "stable-rank": analyze_stable_rank,
}


def cmd_analyze(args) -> int:
    return ANALYSES[args.kind](args)


# --- fixture ------------------------------------------------------------------


def cmd_fixture(args) -> int:
    config = toy.ToyConfig.from_json(Path(args.config).read_text()) if args.config else toy.ToyConfig()
    run = toy.train_fixture(args.seed, args.tasks, args.steps, config)
    toy.write_fixture(run, args.out, args.steps)
    if args.manifest:
        m = Manifest("fixture", {"seed": args.seed, "tasks": args.tasks, "steps": args.steps, "config": json.loads(config.to_json())})
        m.outputs = sorted(p for p in Path(args.out).iterdir() if p.is_file())
        m.write(args.manifest)
    log.info("fixture written to %s", args.out)
    return 0


# --- verify -------------------------------------------------------------------


def _fixture_files(root: Path) -> tuple[Path, list[tuple[str, Path, Path]]]:
    base = root / "base.safetensors"
    if not base.exists():
        raise ValueError(f"{root}: no base.safetensors")
    experts = []
    for p in sorted(root.glob("expert_*.safetensors")):
        if p.name.endswith(".moments.safetensors"):
            continue
        eid = p.name[len("expert_") : -len(".safetensors")]
        experts.append((eid, p, root / f"expert_{eid}.moments.safetensors"))
    if not experts:
        raise ValueError(f"{root}: no expert_<id>.safetensors files")
    return base, experts


def verify_fixture(root, n_batches: int = 2000, maxiter: int = 2000, seed: int = 0) -> dict:
    """Run the invariant suite over a fixture directory; returns the report."""
    root = Path(root)
    base_path, files = _fixture_files(root)
    checks: list[dict] = []

    def record(name, passed, **detail):
        checks.append({"check": name, "passed": bool(passed), **detail})
        (log.info if passed else log.error)("%s: %s", name, "ok" if passed else f"FAILED {detail}")

    # canonical container bytes
    for p in [base_path] + [f for _, w, m in files for f in (w, m)]:
        tensors, meta = read_container(p)
        record(f"canonical:{p.name}", serialize(tensors, meta) == p.read_bytes())

    bundle = load_bundle(base_path, [w for _, w, _ in files], [m for _, _, m in files], [e for e, _, _ in files])
    _, base_meta = read_container(base_path)
    config = toy.ToyConfig.from_json(base_meta["config"])
    seed_f, T, steps = int(base_meta["seed"]), int(base_meta["tasks"]), int(base_meta["steps"])
    tasks = {t.name: t for t in toy.make_tasks(seed_f, T, config)}
    record("bundle:expert-count", len(bundle.experts) == T, experts=len(bundle.experts), tasks=T)

    rng = np.random.default_rng(seed)
    model = toy.ToyModel(config, bundle.base)
    fisher = {}
    for eid, weights in bundle.experts:
        _, meta = read_container(root / f"expert_{eid}.safetensors")
        record(f"adam-step:{eid}", int(meta.get("adam_step", -1)) == steps)
        task = tasks.get(eid)
        if task is None:
            record(f"task:{eid}", False, reason="no task with this id")
            continue
        base_loss = model.loss(task.x_eval, task.y_eval, bundle.base)
        exp_loss = model.loss(task.x_eval, task.y_eval, weights)
        record(f"fine-tune-improves:{eid}", exp_loss < base_loss, base=base_loss, expert=exp_loss)

        polished = toy.converge(model, task.x_train, task.y_train, weights, maxiter=maxiter)
        one = toy.verify_fisher_proxy(model, task.x_train, task.y_train, 1, params=polished)
        eight = toy.verify_fisher_proxy(model, task.x_train, task.y_train, 8, n_batches=n_batches, rng=rng, params=polished)
        record(f"fisher-proxy-b1:{eid}", one.n_coordinates > 0 and bool(np.all(one.ratios == 1.0)),
               max_deviation=float(np.max(np.abs(one.ratios - 1.0))) if one.ratios.size else None)
        record(f"fisher-proxy-b8:{eid}", 0.5 <= eight.median <= 2.0, median=eight.median)
        fisher[eid] = {"batch_1": one.summary(), "batch_8": eight.summary()}

    # compression and stable rank on every 2-D moment
    for eid, moments in bundle.second_moments:
        for name in sorted(moments):
            v = _dense(moments[name])
            if v.ndim != 2:
                continue
            f = compression.compress(v)
            rec = compression.reconstruct(f)
            ok = (rec >= 0).all() and _marginal_error(rec.sum(1), v.sum(1)) <= 1e-9 and _marginal_error(rec.sum(0), v.sum(0)) <= 1e-9
            record(f"compress-marginals:{eid}/{name}", ok)
            sr = compression.stable_rank(v)
            record(f"stable-rank-range:{eid}/{name}", 1 - 1e-9 <= sr <= min(v.shape) * (1 + 1e-9), stable_rank=sr)

    # merge identities and mask counts
    for eid, weights in bundle.experts:
        single = CheckpointBundle(bundle.base, [(eid, weights)], [(eid, bundle.moments(eid))])
        out = merging.ota_merge(single, {eid: grafting.full_masks(weights)})
        record(f"ota-single-full-mask:{eid}", all(np.array_equal(out[n], weights[n]) for n in weights))
        for rho in (0.0, 0.2, 0.4, 1.0):
            ms = grafting.mask_expert(bundle.base, weights, rho, "ffg", bundle.moments(eid), eid)
            record(f"mask-count:{eid}@{rho}", ms.realized_kept_count == grafting.kept_count(rho, ms.total)
                   and sum(int(m.sum()) for m in ms.masks.values()) == ms.realized_kept_count)
    zero = {eid: {n: np.zeros(w.shape, dtype=bool) for n, w in ws.items()} for eid, ws in bundle.experts}
    out = merging.ota_merge(bundle, zero)
    record("ota-zero-masks-return-base", all(np.array_equal(out[n], bundle.base[n]) for n in bundle.base))

    return {
        "fixture": str(root),
        "seed": seed_f,
        "tasks": T,
        "steps": steps,
        "fisher_proxy": fisher,
        "checks": checks,
        "passed": all(c["passed"] for c in checks),
    }


def cmd_verify(args) -> int:
    report = verify_fixture(args.fixture, n_batches=args.batches, maxiter=args.maxiter, seed=args.seed)
    out = Path(args.out) if args.out else Path(args.fixture) / "verify_report.json"
    write_json(out, report)
    failed = [c["check"] for c in report["checks"] if not c["passed"]]
    print(f"{len(report['checks']) - len(failed)}/{len(report['checks'])} checks passed; report at {out}")
    if failed:
        raise InvariantFailure("failed checks: " + ", ".join(failed))
    return 0


# --- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ota-merge", description="Curvature-aware model merging toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("merge", help="merge experts as described by a recipe JSON")
    m.add_argument("--recipe", required=True)
    m.add_argument("--manifest", help="manifest path (default <output>.manifest.json)")
    m.set_defaults(func=cmd_merge)

    g = sub.add_parser("graft", help="mask one expert's task vector and graft it onto the base")
    g.add_argument("--base", required=True)
    g.add_argument("--expert", required=True)
    g.add_argument("--moments")
    g.add_argument("--density", type=float, required=True)
    g.add_argument("--method", choices=("ffg", "magnitude"), default="ffg")
    g.add_argument("--exclude", action="append", default=[], metavar="REGEX",
                   help="tensors to leave out of the ranking (they keep the full update)")
    g.add_argument("--out", required=True)
    g.add_argument("--manifest", help="manifest path (default <out>/manifest.json)")
    g.set_defaults(func=cmd_graft)

    c = sub.add_parser("compress", help="rank-1 factor every 2-D second moment")
    c.add_argument("--moments", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--report", help="size report path (default <out>.report.json)")
    c.add_argument("--manifest")
    c.set_defaults(func=cmd_compress)

    a = sub.add_parser("analyze", help="mask and curvature analyses")
    asub = a.add_subparsers(dest="kind", required=True)
    d = asub.add_parser("density", help="per-tensor density CSV")
    d.add_argument("--masks", nargs="+", required=True)
    d.add_argument("--pattern", help="regex with 'layer' and 'role' groups")
    d.add_argument("--head-size", type=int, help="also report density per group of this many columns")
    d.add_argument("--head-role", help="restrict per-head density to tensors with this role")
    d.add_argument("--out", required=True)
    h = asub.add_parser("histogram", help="row/column sparsity histograms (JSON)")
    h.add_argument("--masks", required=True)
    h.add_argument("--tensor")
    h.add_argument("--bins", type=int, default=20)
    h.add_argument("--out", required=True)
    o = asub.add_parser("overlap", help="mask overlap fractions over expert subsets (JSON)")
    o.add_argument("--masks", nargs="+", required=True)
    o.add_argument("--grid-dir", help="also write downsampled subset-code grids (one CSV per tensor) here")
    o.add_argument("--tensor", help="with --grid-dir, only grid this tensor")
    o.add_argument("--target", type=int, default=256)
    o.add_argument("--out", required=True)
    for kind, helptext in (("curvature", "log10 sqrt(v) grid"), ("maxmin", "max/min sqrt(v) ratio grid across experts")):
        q = asub.add_parser(kind, help=helptext)
        q.add_argument("--moments", nargs="+" if kind == "maxmin" else None, required=True)
        q.add_argument("--tensor", help="one tensor (then --out is a file); default all 2-D tensors into --out dir")
        q.add_argument("--target", type=int, default=256, help="target grid extent (default 256)")
        q.add_argument("--out", required=True)
    s = asub.add_parser("stable-rank", help="stable rank of every 2-D second moment (CSV)")
    s.add_argument("--moments", nargs="+", required=True)
    s.add_argument("--ids", nargs="+")
    s.add_argument("--pattern")
    s.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    f = sub.add_parser("fixture", help="train a toy base model and experts")
    f.add_argument("--seed", type=int, required=True, dest="fixture_seed")
    f.add_argument("--tasks", type=int, default=3)
    f.add_argument("--steps", type=int, default=1000)
    f.add_argument("--config", help="ToyConfig JSON overriding the defaults")
    f.add_argument("--out", required=True)
    f.add_argument("--manifest")
    f.set_defaults(func=cmd_fixture)

    v = sub.add_parser("verify", help="Fisher-proxy and invariant suite on a fixture")
    v.add_argument("--fixture", required=True)
    v.add_argument("--batches", type=int, default=2000)
    v.add_argument("--maxiter", type=int, default=2000, help="L-BFGS polish iterations per expert")
    v.add_argument("--out", help="report path (default <fixture>/verify_report.json)")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "fixture_seed"):
        args.seed = args.fixture_seed
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvariantFailure as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
