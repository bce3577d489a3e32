import numpy as np
import pytest

from otamerge.analysis import parse_layer_role
from otamerge.checkpoint import read_container
from otamerge.toy import (
    AdamState,
    ToyConfig,
    ToyModel,
    adam_step,
    make_tasks,
    verify_fisher_proxy,
)

SMALL = ToyConfig(d_in=3, hidden=5, n_hidden_layers=1, d_out=2, n_train=16, n_eval=8, n_pretrain=16)


def test_gradient_matches_finite_differences(rng):
    model = ToyModel(SMALL, rng=rng)
    x, y = rng.normal(size=(7, 3)), rng.normal(size=(7, 2))
    _, g = model.grad(x, y)
    flat = model.flatten()
    want = np.concatenate([g[k].ravel() for k in model.names])
    h = 1e-6
    num = np.empty_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        num[i] = (model.loss(x, y, model.unflatten(flat + e)) - model.loss(x, y, model.unflatten(flat - e))) / (2 * h)
    np.testing.assert_allclose(want, num, rtol=1e-6, atol=1e-9)


def test_per_sample_grads_average_to_batch_gradient(rng):
    model = ToyModel(SMALL, rng=rng)
    x, y = rng.normal(size=(9, 3)), rng.normal(size=(9, 2))
    _, g = model.grad(x, y)
    G = model.per_sample_grads(x, y)
    np.testing.assert_allclose(G.mean(axis=0), np.concatenate([g[k].ravel() for k in model.names]), rtol=1e-12, atol=1e-15)


def test_adam_raw_second_moment_and_update():
    p = {"w": np.array([1.0, -1.0])}
    st = AdamState.zeros_like(p, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    g = {"w": np.array([0.5, -2.0])}
    out = adam_step(p, g, st)
    np.testing.assert_array_equal(st.exp_avg_sq["w"], (1 - 0.999) * (g["w"] * g["w"]))
    # first step with bias correction moves every coordinate by ~lr against the gradient sign
    np.testing.assert_allclose(out["w"], [0.9, -0.9], rtol=1e-7)
    g2 = {"w": np.array([1.0, 0.0])}
    adam_step(out, g2, st)
    np.testing.assert_allclose(st.exp_avg_sq["w"], 0.999 * 0.001 * g["w"] ** 2 + 0.001 * g2["w"] ** 2, rtol=1e-15)
    assert st.step == 2


def test_adam_rejects_non_finite():
    p = {"w": np.zeros(2)}
    with pytest.raises(FloatingPointError, match="non-finite gradient"):
        adam_step(p, {"w": np.array([np.nan, 0.0])}, AdamState.zeros_like(p))


def test_tasks_are_deterministic_and_distinct():
    a, b = make_tasks(5, 3, SMALL), make_tasks(5, 3, SMALL)
    for ta, tb in zip(a, b):
        assert np.array_equal(ta.y_train, tb.y_train)
    assert not np.array_equal(a[0].y_train, a[1].y_train)


def test_fisher_proxy_batch_one_is_exact(rng):
    model = ToyModel(SMALL, rng=rng)
    x, y = rng.normal(size=(20, 3)), rng.normal(size=(20, 2))
    rep = verify_fisher_proxy(model, x, y, 1)
    assert rep.n_coordinates > 0 and np.all(rep.ratios == 1.0)
    with pytest.raises(ValueError, match="too few"):
        verify_fisher_proxy(model, x, y, 4, n_batches=10)


def test_fixture_layout_and_names(small_fixture):
    out, run = small_fixture
    names = sorted(p.name for p in out.iterdir())
    for eid in ("task0", "task1", "task2"):
        assert f"expert_{eid}.safetensors" in names
        assert f"expert_{eid}.moments.safetensors" in names
        assert f"train_log_{eid}.csv" in names
    assert (out / "train_log_task0.csv").read_text().splitlines()[0] == "step,loss,grad_norm"
    base, meta = read_container(out / "base.safetensors")
    assert meta["seed"] == "3" and meta["tasks"] == "3"
    assert all(parse_layer_role(n)[0] >= 0 for n in base)
    moments, _ = read_container(out / "expert_task0.moments.safetensors")
    assert all(n.endswith(".exp_avg_sq") for n in moments)
    assert all((v >= 0).all() for v in moments.values())


def test_experts_improve_on_their_task(small_fixture):
    _, run = small_fixture
    model = ToyModel(run.config, run.base)
    for eid, w in run.experts:
        t = run.task(eid)
        assert model.loss(t.x_eval, t.y_eval, w) < model.loss(t.x_eval, t.y_eval, run.base)


def test_adam_matches_scalar_reference_on_quadratic():
    # minimise 0.5 * a * (w - c)^2 per coordinate with a scalar re-implementation as oracle
    a, c = np.array([0.5, 2.0, 8.0]), np.array([1.0, -3.0, 0.25])
    p = {"w": np.zeros(3)}
    st = AdamState.zeros_like(p, lr=0.05)
    ref_w, ref_m, ref_v = [0.0] * 3, [0.0] * 3, [0.0] * 3
    for t in range(1, 51):
        p = adam_step(p, {"w": a * (p["w"] - c)}, st)
        for i in range(3):
            g = float(a[i]) * (ref_w[i] - float(c[i]))
            ref_m[i] = 0.9 * ref_m[i] + (1 - 0.9) * g
            ref_v[i] = 0.999 * ref_v[i] + (1 - 0.999) * (g * g)
            mhat, vhat = ref_m[i] / (1 - 0.9**t), ref_v[i] / (1 - 0.999**t)
            ref_w[i] = ref_w[i] - 0.05 * mhat / (vhat**0.5 + 1e-8)
    np.testing.assert_allclose(p["w"], ref_w, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(st.exp_avg_sq["w"], ref_v, rtol=1e-12)


@pytest.mark.parametrize("beta2", [0.0, 1.0])
def test_adam_beta2_boundaries(beta2, rng):
    p = {"w": np.zeros(4)}
    st = AdamState.zeros_like(p, beta2=beta2)
    st.exp_avg_sq["w"][:] = 0.7
    for _ in range(3):
        g = {"w": rng.normal(size=4)}
        p = adam_step(p, g, st)
    want = np.full(4, 0.7) if beta2 == 1.0 else g["w"] ** 2
    np.testing.assert_array_equal(st.exp_avg_sq["w"], want)


def test_fisher_proxy_full_batch_limit(rng):
    model = ToyModel(SMALL, rng=rng)
    x, y = rng.normal(size=(12, 3)), rng.normal(size=(12, 2))
    rep = verify_fisher_proxy(model, x, y, 12)
    G = model.per_sample_grads(x, y)
    fisher = np.mean(G * G, axis=0)
    keep = fisher > 1e-12 * fisher.max()
    np.testing.assert_allclose(rep.ratios, 12 * G.mean(axis=0)[keep] ** 2 / fisher[keep], rtol=1e-12)
    assert rep.n_batches == 1


def test_single_task_and_distinct_targets():
    (t,) = make_tasks(0, 1, SMALL)
    assert t.x_train.shape[0] == SMALL.n_train > 0
    tasks = make_tasks(0, 3, ToyConfig(noise=0.0, n_train=32, n_eval=8, n_pretrain=8))
    assert all(not np.allclose(tasks[i].y_train, tasks[j].y_train) for i in range(3) for j in range(i + 1, 3))


def test_every_expert_moves(small_fixture):
    _, run = small_fixture
    for _, w in run.experts:
        assert sum(float(np.sum((w[n] - run.base[n]) ** 2)) for n in w) > 0
