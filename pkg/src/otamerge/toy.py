"""Desk-scale fixtures: a small tanh MLP trained with Adam on synthetic tasks.

Tasks share one input distribution. Each target is a shared teacher network
plus a task-specific teacher that only reads a task-specific subset of the
inputs, plus Gaussian noise. A base model is pretrained (longer, at a higher
learning rate) on a separate large pool drawn from the task mixture, and one
expert is fine-tuned from it per task on a smaller task dataset. The raw Adam ``exp_avg_sq`` of
every expert is kept, so the merging code runs on genuine optimizer state.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointBundle, atomic_write_bytes, moments_to_tensors, write_container

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToyConfig:
    d_in: int = 8
    hidden: int = 32
    n_hidden_layers: int = 2
    d_out: int = 4
    teacher_hidden: int = 16
    task_inputs: int = 3
    task_hidden: int = 16
    task_scale: float = 0.5
    n_pretrain: int = 4096
    n_train: int = 1024
    n_eval: int = 1024
    noise: float = 0.2
    batch_size: int = 32
    lr: float = 1e-3
    pretrain_lr: float = 3e-3
    pretrain_factor: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    @property
    def layer_sizes(self) -> list[int]:
        return [self.d_in] + [self.hidden] * self.n_hidden_layers + [self.d_out]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ToyConfig":
        return cls(**json.loads(text))


# --- model ------------------------------------------------------------------


def layer_names(config: ToyConfig) -> list[tuple[str, str]]:
    """``(weight, bias)`` names per layer, Llama-style ``model.layers.<k>.mlp.<role>``."""
    n = len(config.layer_sizes) - 1
    roles = ["in_proj"] + ["hidden_proj"] * (n - 2) + ["out_proj"]
    return [(f"model.layers.{k}.mlp.{r}.weight", f"model.layers.{k}.mlp.{r}.bias") for k, r in enumerate(roles)]


class ToyModel:
    """A tanh MLP with a linear output layer and squared-error loss.

    Per-sample loss is ``0.5 * |f(x) - y|²``; the dataset loss is its mean.
    """

    def __init__(self, config: ToyConfig, params: dict[str, np.ndarray] | None = None, rng=None):
        self.config = config
        self.layers = layer_names(config)
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            params = {}
            sizes = config.layer_sizes
            for (wn, bn), fan_in, fan_out in zip(self.layers, sizes[:-1], sizes[1:]):
                params[wn] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_out, fan_in))
                params[bn] = np.zeros(fan_out)
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    @property
    def names(self) -> list[str]:
        return sorted(self.params)

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def _forward(self, x, params):
        acts = [x]
        h = x
        last = len(self.layers) - 1
        for i, (wn, bn) in enumerate(self.layers):
            z = h @ params[wn].T + params[bn]
            h = np.tanh(z) if i < last else z
            acts.append(h)
        return acts

    def forward(self, x, params=None):
        return self._forward(x, self.params if params is None else params)[-1]

    def loss(self, x, y, params=None) -> float:
        r = self.forward(x, params) - y
        return float(0.5 * np.mean(np.sum(r * r, axis=1)))

    def _backward(self, acts, y, params, per_sample: bool):
        n = y.shape[0]
        delta = acts[-1] - y
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            wn, bn = self.layers[i]
            a_prev = acts[i]
            if per_sample:
                grads[wn] = np.einsum("no,ni->noi", delta, a_prev)
                grads[bn] = delta.copy()
            else:
                grads[wn] = delta.T @ a_prev / n
                grads[bn] = delta.mean(axis=0)
            if i > 0:
                delta = (delta @ params[wn]) * (1.0 - acts[i] ** 2)
        return grads

    def grad(self, x, y, params=None) -> tuple[float, dict[str, np.ndarray]]:
        """Mean loss and its gradient."""
        params = self.params if params is None else params
        acts = self._forward(x, params)
        r = acts[-1] - y
        return float(0.5 * np.mean(np.sum(r * r, axis=1))), self._backward(acts, y, params, per_sample=False)

    def per_sample_grads(self, x, y, params=None) -> np.ndarray:
        """``(N, P)`` per-sample gradients, flattened in sorted-name order."""
        params = self.params if params is None else params
        g = self._backward(self._forward(x, params), y, params, per_sample=True)
        n = x.shape[0]
        return np.concatenate([g[k].reshape(n, -1) for k in self.names], axis=1)

    def flatten(self, params=None) -> np.ndarray:
        params = self.params if params is None else params
        return np.concatenate([params[k].ravel() for k in self.names])

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, off = {}, 0
        for k in self.names:
            shape = self.params[k].shape
            size = int(np.prod(shape))
            out[k] = flat[off : off + size].reshape(shape).copy()
            off += size
        return out


# --- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    exp_avg: dict[str, np.ndarray]
    exp_avg_sq: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **hyper) -> "AdamState":
        return cls(
            exp_avg={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            exp_avg_sq={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
            **hyper,
        )


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update.

    Returns new parameters and advances ``state`` in place. ``state.exp_avg_sq``
    holds the raw (uncorrected) EMA of squared gradients.
    """
    if not state.lr > 0:
        raise ValueError(f"learning rate must be positive, got {state.lr}")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"{k}: gradient shape {g.shape} != parameter shape {params[k].shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"{k}: non-finite gradient at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step if b1 < 1.0 else 1.0
    c2 = 1.0 - b2**state.step if b2 < 1.0 else 1.0
    out = {}
    for k, w in params.items():
        g = grads[k]
        m = b1 * state.exp_avg[k] + (1.0 - b1) * g
        v = b2 * state.exp_avg_sq[k] + (1.0 - b2) * (g * g)
        state.exp_avg[k] = m
        state.exp_avg_sq[k] = v
        out[k] = w - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


# --- tasks -------------------------------------------------------------------


@dataclass
class Task:
    name: str
    inputs: np.ndarray  # indices of inputs the task-specific teacher reads
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    x_pretrain: np.ndarray
    y_pretrain: np.ndarray


def _teacher(rng, d_in, hidden, d_out, scale=1.0):
    w1 = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(hidden, d_in))
    b1 = rng.normal(0.0, 0.5, size=hidden)
    w2 = rng.normal(0.0, scale / math.sqrt(hidden), size=(d_out, hidden))
    return lambda x: np.tanh(x @ w1.T + b1) @ w2.T


def make_tasks(seed: int, T: int, config: ToyConfig = ToyConfig()) -> list[Task]:
    """``T`` regression tasks with distinct teachers; deterministic per seed."""
    if T < 1:
        raise ValueError("need at least one task")
    ss = np.random.SeedSequence([seed, 0xDA7A])
    rng = np.random.default_rng(ss)
    shared = _teacher(rng, config.d_in, config.teacher_hidden, config.d_out)
    tasks = []
    for t, child in enumerate(ss.spawn(T)):
        trng = np.random.default_rng(child)
        k = min(config.task_inputs, config.d_in)
        cols = np.sort(trng.choice(config.d_in, size=k, replace=False))
        specific = _teacher(trng, k, config.task_hidden, config.d_out, scale=config.task_scale)

        def target(x, cols=cols, specific=specific):
            return shared(x) + specific(x[:, cols])

        a, b = config.n_train, config.n_train + config.n_eval
        xs = trng.normal(size=(b + config.n_pretrain, config.d_in))
        ys = target(xs) + config.noise * trng.normal(size=(xs.shape[0], config.d_out))
        tasks.append(Task(
            name=f"task{t}",
            inputs=cols,
            x_train=xs[:a],
            y_train=ys[:a],
            x_eval=xs[a:b],
            y_eval=ys[a:b],
            x_pretrain=xs[b:],
            y_pretrain=ys[b:],
        ))
    return tasks


# --- training ----------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "grad_norm"])
        for step, loss, gn in self.rows:
            w.writerow([step, repr(loss), repr(gn)])
        return buf.getvalue()


def train(model: ToyModel, x, y, steps: int, rng, config: ToyConfig, lr: float | None = None):
    """Minibatch Adam from a fresh optimizer state. Returns ``(params, state, log)``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    params = {k: v.copy() for k, v in model.params.items()}
    state = AdamState.zeros_like(params, lr=config.lr if lr is None else lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps_adam)
    tlog = TrainLog()
    n = x.shape[0]
    for step in range(1, steps + 1):
        idx = rng.integers(0, n, size=min(config.batch_size, n))
        loss, grads = model.grad(x[idx], y[idx], params)
        if not math.isfinite(loss):
            raise FloatingPointError(f"loss diverged at step {step}")
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        params = adam_step(params, grads, state)
        tlog.rows.append((step, loss, gnorm))
    return params, state, tlog


@dataclass
class ToyRun:
    config: ToyConfig
    seed: int
    tasks: list[Task]
    base: dict[str, np.ndarray]
    experts: list[tuple[str, dict[str, np.ndarray]]]
    states: dict[str, AdamState]
    logs: dict[str, TrainLog]

    def bundle(self) -> CheckpointBundle:
        return CheckpointBundle(
            base=self.base,
            experts=self.experts,
            second_moments=[(eid, self.states[eid].exp_avg_sq) for eid, _ in self.experts],
        )

    def task(self, expert_id: str) -> Task:
        return next(t for t in self.tasks if t.name == expert_id)


def train_fixture(seed: int, T: int, steps: int, config: ToyConfig = ToyConfig()) -> ToyRun:
    """Pretrain on the task mixture, then fine-tune one expert per task."""
    tasks = make_tasks(seed, T, config)
    ss = np.random.SeedSequence([seed, 0x7EA1])
    init_ss, pre_ss, *ft_ss = ss.spawn(T + 2)
    model = ToyModel(config, rng=np.random.default_rng(init_ss))

    x_mix = np.concatenate([t.x_pretrain for t in tasks])
    y_mix = np.concatenate([t.y_pretrain for t in tasks])
    base, _, base_log = train(model, x_mix, y_mix, steps * config.pretrain_factor,
                              np.random.default_rng(pre_ss), config, lr=config.pretrain_lr)
    logs = {"base": base_log}

    experts, states = [], {}
    for task, fss in zip(tasks, ft_ss):
        params, state, tlog = train(ToyModel(config, base), task.x_train, task.y_train, steps, np.random.default_rng(fss), config)
        experts.append((task.name, params))
        states[task.name] = state
        logs[task.name] = tlog
        log.info("%s: eval loss base %.4g -> expert %.4g", task.name,
                 model.loss(task.x_eval, task.y_eval, base), model.loss(task.x_eval, task.y_eval, params))
    return ToyRun(config, seed, tasks, base, experts, states, logs)


def fixture_metadata(run: ToyRun, steps: int, **extra) -> dict[str, str]:
    meta = {
        "format": "otamerge-toy-fixture/1",
        "seed": str(run.seed),
        "tasks": str(len(run.tasks)),
        "steps": str(steps),
        "config": run.config.to_json(),
    }
    meta.update({k: str(v) for k, v in extra.items()})
    return meta


def write_fixture(run: ToyRun, out, steps: int) -> None:
    """Layout: ``base.safetensors``, ``expert_<id>.safetensors``,
    ``expert_<id>.moments.safetensors``, ``train_log_<id>.csv``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_container(run.base, fixture_metadata(run, steps, role="base"), out / "base.safetensors")
    for eid, params in run.experts:
        st = run.states[eid]
        meta = fixture_metadata(run, steps, role="expert", expert_id=eid, adam_step=st.step,
                                lr=repr(st.lr), beta1=repr(st.beta1), beta2=repr(st.beta2), eps=repr(st.eps))
        write_container(params, meta, out / f"expert_{eid}.safetensors")
        write_container(moments_to_tensors(st.exp_avg_sq), meta, out / f"expert_{eid}.moments.safetensors")
    for name, tlog in run.logs.items():
        atomic_write_bytes(out / f"train_log_{name}.csv", tlog.to_csv().encode("utf-8"))


def pretrain_and_finetune(seed: int, T: int, steps: int, out, config: ToyConfig = ToyConfig()) -> CheckpointBundle:
    run = train_fixture(seed, T, steps, config)
    write_fixture(run, out, steps)
    return run.bundle()


# --- Fisher proxy --------------------------------------------------------------


def converge(model: ToyModel, x, y, params=None, gtol: float = 1e-10, maxiter: int = 20_000) -> dict[str, np.ndarray]:
    """Polish ``params`` to a stationary point of the full-batch loss (L-BFGS)."""
    from scipy.optimize import minimize

    params = model.params if params is None else params
    flat0 = model.flatten(params)

    def fun(flat):
        p = model.unflatten(flat)
        loss, g = model.grad(x, y, p)
        return loss, np.concatenate([g[k].ravel() for k in model.names])

    res = minimize(fun, flat0, jac=True, method="L-BFGS-B",
                   options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-300, "maxcor": 30})
    return model.unflatten(res.x)


@dataclass
class FisherProxyReport:
    batch_size: int
    n_batches: int
    n_coordinates: int
    ratios: np.ndarray
    mean_grad_ratio: float

    @property
    def median(self) -> float:
        return float(np.median(self.ratios))

    def summary(self) -> dict:
        q = np.quantile(self.ratios, [0.1, 0.25, 0.5, 0.75, 0.9]) if self.ratios.size else [math.nan] * 5
        return {
            "batch_size": self.batch_size,
            "n_batches": self.n_batches,
            "n_coordinates": self.n_coordinates,
            "median_ratio": self.median,
            "quantiles": dict(zip(["q10", "q25", "q50", "q75", "q90"], map(float, q))),
            "mean_grad_ratio": self.mean_grad_ratio,
        }


def verify_fisher_proxy(model: ToyModel, x, y, batch_size: int, n_batches: int = 2000, rng=None,
                        floor: float = 1e-12, params=None) -> FisherProxyReport:
    """Compare ``E[(batch gradient)²] * |B|`` with the diagonal empirical Fisher.

    Batches are drawn with replacement. A batch of one is a single sample, so
    ``batch_size == 1`` enumerates every sample once and the ratio is exactly
    1; ``batch_size >= N`` uses the one full batch.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    G = model.per_sample_grads(x, y, params)
    n = G.shape[0]
    fisher = np.mean(G * G, axis=0)
    gbar = np.mean(G, axis=0)
    mean_grad_ratio = float(np.linalg.norm(gbar) / np.mean(np.linalg.norm(G, axis=1)))

    if batch_size == 1:
        d = np.mean(G * G, axis=0)
        batches = n
    elif batch_size >= n:
        d = gbar * gbar
        batch_size, batches = n, 1
    else:
        if n_batches < 100:
            raise ValueError(f"{n_batches} batches are too few for a stable estimate (need >= 100)")
        rng = np.random.default_rng(0) if rng is None else rng
        acc = np.zeros(G.shape[1])
        for start in range(0, n_batches, 256):
            idx = rng.integers(0, n, size=(min(256, n_batches - start), batch_size))
            bg = G[idx].mean(axis=1)
            acc += np.sum(bg * bg, axis=0)
        d = acc / n_batches
        batches = n_batches
    keep = fisher > floor * fisher.max()
    ratios = d[keep] * batch_size / fisher[keep]
    return FisherProxyReport(batch_size, batches, int(keep.sum()), ratios, mean_grad_ratio)
