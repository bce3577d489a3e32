import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from otamerge.checkpoint import moments_to_tensors, serialize
from otamerge.compression import (
    FactoredSecondMoment,
    compress,
    format_stable_rank_csv,
    reconstruct,
    stable_rank,
    stable_rank_report,
)
from otamerge.tensor import TensorError


def test_hand_case():
    np.testing.assert_allclose(reconstruct(compress(np.array([[1.0, 2.0], [3.0, 4.0]]))),
                               [[1.2, 1.8], [2.8, 4.2]], rtol=1e-15)


def test_zero_matrix_reconstructs_to_zero():
    assert not reconstruct(compress(np.zeros((3, 2)))).any()


def test_compress_rejects_negative_and_non_2d():
    with pytest.raises(TensorError):
        compress(-np.ones((2, 2)))
    with pytest.raises(TensorError):
        compress(np.ones(3))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=16), elements=st.floats(0, 1e3)))
def test_marginals_preserved_and_nonnegative(v):
    rec = reconstruct(compress(v))
    assert (rec >= 0).all()
    if v.sum() > 0:
        np.testing.assert_allclose(rec.sum(axis=1), v.sum(axis=1), rtol=1e-9, atol=1e-9 * v.sum())
        np.testing.assert_allclose(rec.sum(axis=0), v.sum(axis=0), rtol=1e-9, atol=1e-9 * v.sum())


def _data_bytes(buf: bytes) -> int:
    return len(buf) - 8 - struct.unpack("<Q", buf[:8])[0]


def test_storage_is_m_plus_n():
    v = np.ones((64, 32))
    f = compress(v)
    assert f.stored_values == 96
    assert _data_bytes(serialize(moments_to_tensors({"w": v}))) == 64 * 32 * 8
    assert _data_bytes(serialize(moments_to_tensors({"w": f}))) == 96 * 8


def test_stable_rank_cases():
    assert stable_rank(np.eye(9)) == 9.0
    assert stable_rank(np.diag([2.0, 1.0])) == pytest.approx(1.25, abs=1e-9)
    assert stable_rank(np.outer([1.0, 2.0, 3.0], [4.0, 5.0])) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(TensorError, match="zero matrix"):
        stable_rank(np.zeros((2, 2)))


def test_stable_rank_report_skips_factored():
    moments = [("e", {"layers.0.mlp.in_proj.weight": np.eye(3), "layers.0.mlp.in_proj.bias": np.ones(3),
                      "layers.1.mlp.out_proj.weight": FactoredSecondMoment(np.ones(2), np.ones(2))})]
    rows, skipped = stable_rank_report(moments)
    assert rows == [("e", "layers.0.mlp.in_proj.weight", 0, "in_proj", 3.0)]
    assert skipped == [("e", "layers.1.mlp.out_proj.weight")]
    assert format_stable_rank_csv(rows).splitlines() == ["expert,tensor,layer,role,stable_rank",
                                                        "e,layers.0.mlp.in_proj.weight,0,in_proj,3.0"]
