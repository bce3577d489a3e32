import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_bundle
from otamerge.checkpoint import CheckpointBundle, moments_to_tensors, write_container
from otamerge.grafting import build_mask, ffg_saliency, full_masks, task_vector
from otamerge.merging import (
    MergeRecipe,
    RecipeError,
    execute_recipe,
    fisher_merge,
    linear_merge,
    ota_merge,
    task_arithmetic_merge,
    ties_merge,
)


def scalar_ota(base, experts, moments, masks, eps):
    """Coordinate-by-coordinate reference written without numpy vector ops."""
    out = {}
    for name, b in base.items():
        flat_b = [float(x) for x in np.ravel(b)]
        res = []
        for i, w0 in enumerate(flat_b):
            num = den = 0.0
            for eid in sorted(experts):
                p = float(np.ravel(moments[eid][name])[i]) ** 0.5 + eps
                m = float(np.ravel(masks[eid][name])[i])
                num += p * m * (float(np.ravel(experts[eid][name])[i]) - w0)
                den += p
            res.append(w0 + num / den)
        out[name] = np.array(res).reshape(np.shape(b))
    return out


def random_masks(rng, bundle, p=0.5):
    return {eid: {n: rng.uniform(size=w.shape) < p for n, w in ws.items()} for eid, ws in bundle.experts}


def test_ota_matches_scalar_reference(rng):
    b = random_bundle(rng, T=3, shapes={"w": (4, 4), "b": (4,)})
    masks = random_masks(rng, b)
    got = ota_merge(b, masks, eps=1e-8)
    want = scalar_ota(b.base, dict(b.experts), dict(b.second_moments), masks, 1e-8)
    for n in got:
        np.testing.assert_allclose(got[n], want[n], rtol=1e-12, atol=1e-12)


def test_ota_single_expert_full_mask_is_exact(rng):
    b = random_bundle(rng, T=1)
    eid, w = b.experts[0]
    out = ota_merge(b, {eid: full_masks(w)})
    assert all(np.array_equal(out[n], w[n]) for n in w)


def test_ota_zero_masks_return_base(rng):
    b = random_bundle(rng, T=4)
    masks = {eid: {n: np.zeros(x.shape, bool) for n, x in ws.items()} for eid, ws in b.experts}
    out = ota_merge(b, masks)
    assert all(np.array_equal(out[n], b.base[n]) for n in b.base)


def test_ota_equal_preconditioners_average_masked_deltas(rng):
    b = random_bundle(rng, T=3)
    v = b.second_moments[0][1]
    b = CheckpointBundle(b.base, b.experts, [(eid, v) for eid, _ in b.experts])
    masks = random_masks(rng, b)
    out = ota_merge(b, masks)
    for n in b.base:
        mean = np.mean([masks[e][n] * (w[n] - b.base[n]) for e, w in b.experts], axis=0)
        np.testing.assert_allclose(out[n], b.base[n] + mean, rtol=1e-12)


def test_ota_is_order_and_thread_independent(rng, monkeypatch):
    b = random_bundle(rng, T=3, dtype=np.float32)
    masks = random_masks(rng, b)
    ref = ota_merge(b, masks)
    flipped = CheckpointBundle(b.base, b.experts[::-1], b.second_moments[::-1])
    monkeypatch.setenv("OTA_THREADS", "1")
    again = ota_merge(flipped, masks)
    for n in ref:
        assert ref[n].dtype == np.float32
        assert ref[n].tobytes() == again[n].tobytes()


def test_masked_denominator_flag(rng):
    b = random_bundle(rng, T=2, shapes={"w": (3,)})
    masks = {"e0": {"w": np.array([True, False, True])}, "e1": {"w": np.array([False, False, True])}}
    out = ota_merge(b, masks, masked_denominator=True)["w"]
    e0 = dict(b.experts)["e0"]["w"]
    assert out[0] == pytest.approx(e0[0], rel=1e-14)
    assert out[1] == b.base["w"][1]


def test_fisher_with_equal_moments_equals_linear(rng):
    b = random_bundle(rng, T=3)
    v = b.second_moments[0][1]
    b = CheckpointBundle(b.base, b.experts, [(eid, v) for eid, _ in b.experts])
    f, lin = fisher_merge(b), linear_merge(b)
    assert all(np.array_equal(f[n], lin[n]) for n in f)


def test_linear_identical_experts_returns_expert(rng):
    b = random_bundle(rng, T=1)
    w = b.experts[0][1]
    b = CheckpointBundle(b.base, [("a", w), ("b", w), ("c", w)])
    out = linear_merge(b)
    assert all(np.array_equal(out[n], w[n]) for n in w)


def test_task_arithmetic_formula(rng):
    b = random_bundle(rng, T=2)
    out = task_arithmetic_merge(b, lam=0.6)
    for n in b.base:
        want = b.base[n] + 0.3 * sum(w[n] - b.base[n] for _, w in b.experts)
        np.testing.assert_allclose(out[n], want, rtol=1e-12, atol=1e-15)


def test_ties_sign_election_and_disjoint_mean():
    base = {"w": np.zeros(4)}
    experts = [("a", {"w": np.array([1.0, -2.0, 3.0, 0.5])}), ("b", {"w": np.array([3.0, 1.0, -1.0, 0.0])})]
    out = ties_merge(CheckpointBundle(base, experts), ties_density=1.0)["w"]
    # coord 0 agree -> mean 2; coord 1 mass -1 -> keeps -2; coord 2 mass +2 -> keeps 3; coord 3 only a
    assert out.tolist() == [2.0, -2.0, 3.0, 0.5]


def test_ties_trim_keeps_top_fraction():
    base = {"w": np.zeros(4)}
    experts = [("a", {"w": np.array([4.0, 3.0, 2.0, 1.0])})]
    out = ties_merge(CheckpointBundle(base, experts), ties_density=0.5)["w"]
    assert out.tolist() == [4.0, 3.0, 0.0, 0.0]


def test_ota_scale_invariance_at_zero_eps(rng):
    b = random_bundle(rng, T=3)
    masks = random_masks(rng, b)
    ref = ota_merge(b, masks, eps=0.0)
    for c in (1e-6, 1e6):
        scaled = CheckpointBundle(b.base, b.experts, [(e, {n: c * v for n, v in m.items()}) for e, m in b.second_moments])
        out = ota_merge(scaled, masks, eps=0.0)
        for n in ref:
            np.testing.assert_allclose(out[n], ref[n], rtol=1e-12)


def _write_fixture(tmp_path, b):
    write_container(b.base, None, tmp_path / "base.safetensors")
    experts = []
    for (eid, w), (_, v) in zip(b.experts, b.second_moments):
        write_container(w, None, tmp_path / f"{eid}.safetensors")
        write_container(moments_to_tensors(v), None, tmp_path / f"{eid}.m.safetensors")
        experts.append({"id": eid, "weights_path": f"{eid}.safetensors", "moments_path": f"{eid}.m.safetensors"})
    return experts


def test_recipe_runs_ffg_mask_then_ota(tmp_path, rng):
    b = random_bundle(rng, T=2)
    experts = _write_fixture(tmp_path, b)
    for e in experts:
        e["density"] = 0.3
    doc = {"method": "ota", "base": "base.safetensors", "experts": experts, "output": "out.safetensors"}
    (tmp_path / "r.json").write_text(json.dumps(doc))
    res = execute_recipe(MergeRecipe.from_json(tmp_path / "r.json"))
    masks = {}
    for eid, w in b.experts:
        masks[eid] = build_mask(ffg_saliency(task_vector(w, b.base), b.moments(eid)), 0.3).masks
    want = ota_merge(b, masks)
    for n in want:
        assert np.array_equal(res.merged[n], want[n])
    assert [e["realized_kept_count"] for e in res.report["experts"]] == [8, 8]


@pytest.mark.parametrize(
    "doc, match",
    [
        ({"method": "avg", "base": "b", "experts": [{"id": "a", "weights_path": "a"}], "output": "o"}, "unknown method"),
        ({"method": "ota", "base": "b", "experts": [{"id": "a", "weights_path": "a"}], "output": "o"}, "needs moments_path"),
        ({"method": "linear", "base": "b", "experts": [], "output": "o"}, "no experts"),
        ({"method": "linear", "base": "b", "experts": [{"id": "a", "weights_path": "a", "density": 2}], "output": "o"}, "outside"),
        ({"method": "ties", "base": "b", "experts": [{"id": "a", "weights_path": "a"}], "output": "o"}, "ties_density"),
        ({"method": "linear", "base": "b", "experts": [{"id": "a", "weights_path": "a"}], "output": "o", "x": 1}, "unknown recipe key"),
        ({"method": "ota", "base": "b", "experts": [{"id": "a", "weights_path": "a", "moments_path": "m"}],
          "output": "o", "epsilon": 0}, "epsilon"),
    ],
)
def test_recipe_validation(doc, match):
    with pytest.raises(RecipeError, match=match):
        MergeRecipe.from_dict(doc)


def test_merge_requires_moments(rng):
    b = random_bundle(rng, T=2, moments=False)
    with pytest.raises(ValueError, match="second moments"):
        ota_merge(b)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_ota_stays_within_grafted_range(T, n, seed):
    rng = np.random.default_rng(seed)
    b = random_bundle(rng, T=T, shapes={"w": (n,)})
    masks = random_masks(rng, b)
    out = ota_merge(b, masks)["w"]
    grafted = np.stack([np.where(masks[e]["w"], w["w"], b.base["w"]) for e, w in b.experts])
    tol = 1e-12 * np.max(np.abs(grafted))
    assert (out >= grafted.min(axis=0) - tol).all() and (out <= grafted.max(axis=0) + tol).all()


def test_ties_hand_traces():
    base = {"w": np.array([0.5])}
    two = [("a", {"w": np.array([2.5])}), ("b", {"w": np.array([-0.5])})]
    assert ties_merge(CheckpointBundle(base, two), 1.0)["w"].tolist() == [2.5]
    zero = [("a", {"w": base["w"].copy()}), ("b", {"w": base["w"].copy()})]
    assert ties_merge(CheckpointBundle(base, zero), 1.0)["w"].tolist() == [0.5]
    one = [("a", {"w": np.array([3.0])})]
    assert ties_merge(CheckpointBundle(base, one), 1.0)["w"].tolist() == [3.0]


@pytest.mark.parametrize("method", ["ota", "linear", "task_arithmetic", "fisher", "ties"])
def test_permutation_equivariance(method, rng):
    b = random_bundle(rng, T=4)
    masks = random_masks(rng, b)
    fn = {"ota": ota_merge, "linear": linear_merge, "task_arithmetic": task_arithmetic_merge,
          "fisher": fisher_merge, "ties": lambda bb, masks: ties_merge(bb, 0.5, masks=masks)}[method]
    perm = rng.permutation(4)
    shuffled = CheckpointBundle(b.base, [b.experts[i] for i in perm], [b.second_moments[i] for i in perm])
    ref, out = fn(b, masks=masks), fn(shuffled, masks=masks)
    assert all(ref[n].tobytes() == out[n].tobytes() for n in ref)
