import numpy as np
import pytest

from otamerge.checkpoint import CheckpointBundle


def random_bundle(rng, T=3, shapes=None, dtype=np.float64, moments=True):
    shapes = shapes or {"model.layers.0.mlp.in_proj.weight": (4, 5), "model.layers.0.mlp.in_proj.bias": (5,)}
    base = {n: rng.normal(size=s).astype(dtype) for n, s in shapes.items()}
    experts, vs = [], []
    for t in range(T):
        eid = f"e{t}"
        experts.append((eid, {n: (b + rng.normal(scale=0.1, size=b.shape)).astype(dtype) for n, b in base.items()}))
        if moments:
            vs.append((eid, {n: rng.uniform(0.0, 2.0, size=b.shape) for n, b in base.items()}))
    return CheckpointBundle(base=base, experts=experts, second_moments=vs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_fixture(tmp_path_factory):
    """A short toy run written to disk, shared across test modules."""
    from otamerge import toy

    out = tmp_path_factory.mktemp("fixture")
    run = toy.train_fixture(3, 3, 150)
    toy.write_fixture(run, out, 150)
    return out, run


# (criterion number, title, passed, detail) recorded by test_acceptance.py
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {num:2d}. {title}: {detail}")
