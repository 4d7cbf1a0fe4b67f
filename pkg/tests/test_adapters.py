"""Low-rank adapter algebra: init distribution, zero cold start, dense vs
factored application, and adapter-set bookkeeping."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atmoe.adapters import (
    ADAPTER_INIT_STD,
    PREMERGED_ID,
    AdapterSet,
    LoraAdapter,
    apply,
    delta_weight,
    init_adapter,
)
from atmoe.numerics import seeded_rng


def test_init_shapes_and_b_zero():
    a = init_adapter(d=6, k=8, r=3, seed=11, adapter_id="x", task_id="t")
    assert a.B.shape == (6, 3) and a.A.shape == (3, 8)
    np.testing.assert_array_equal(a.B, np.zeros((6, 3)))
    assert a.scaling == 1.0
    assert a.rank == 3 and a.shape == (6, 8)


def test_init_a_matches_declared_std():
    # Many draws: the sample std of A must sit near the documented constant.
    entries = np.concatenate(
        [init_adapter(32, 32, 8, seed=s).A.ravel() for s in range(40)])
    assert abs(entries.std() - ADAPTER_INIT_STD) < 0.1 * ADAPTER_INIT_STD
    assert abs(entries.mean()) < 3 * ADAPTER_INIT_STD / np.sqrt(entries.size) * 5


def test_init_deterministic_per_seed():
    a1 = init_adapter(4, 5, 2, seed=9)
    a2 = init_adapter(4, 5, 2, seed=9)
    a3 = init_adapter(4, 5, 2, seed=10)
    np.testing.assert_array_equal(a1.A, a2.A)
    assert not np.array_equal(a1.A, a3.A)


def test_fresh_adapter_is_exact_zero_update():
    a = init_adapter(5, 7, 2, seed=3)
    np.testing.assert_array_equal(delta_weight(a), np.zeros((5, 7)))
    np.testing.assert_array_equal(apply(a, np.ones(7)), np.zeros(5))


def test_apply_matches_dense_delta():
    rng = seeded_rng(21)
    a = LoraAdapter("id", "task", B=rng.normal(size=(4, 2)),
                    A=rng.normal(size=(2, 6)), scaling=1.5)
    x = rng.normal(size=6)
    np.testing.assert_allclose(apply(a, x), delta_weight(a) @ x, atol=1e-12)


def test_apply_rejects_wrong_length():
    a = init_adapter(4, 6, 2, seed=1)
    with pytest.raises(ValueError, match="length 6"):
        apply(a, np.ones(5))


@settings(max_examples=30, deadline=None)
@given(d=st.integers(2, 8), k=st.integers(2, 8), data=st.data())
def test_delta_rank_bounded_by_r(d, k, data):
    r = data.draw(st.integers(1, min(d, k)))
    rng = seeded_rng(d * 100 + k * 10 + r)
    a = LoraAdapter("id", "task", B=rng.normal(size=(d, r)),
                    A=rng.normal(size=(r, k)))
    assert np.linalg.matrix_rank(delta_weight(a)) <= r


def test_rank_and_scaling_validation():
    with pytest.raises(ValueError, match="rank mismatch"):
        LoraAdapter("i", "t", B=np.zeros((4, 2)), A=np.zeros((3, 5)))
    with pytest.raises(ValueError, match="out of range"):
        LoraAdapter("i", "t", B=np.zeros((4, 5)), A=np.zeros((5, 4)))
    with pytest.raises(ValueError, match="scaling"):
        LoraAdapter("i", "t", B=np.zeros((4, 2)), A=np.zeros((2, 5)),
                    scaling=0.0)


def _make_set():
    ads = {
        "e_a": init_adapter(4, 4, 2, seed=1, adapter_id="e_a", task_id="a"),
        "e_b": init_adapter(4, 4, 2, seed=2, adapter_id="e_b", task_id="b"),
        "pm": init_adapter(4, 4, 2, seed=3, adapter_id="pm",
                           task_id=PREMERGED_ID),
    }
    return AdapterSet(ads)


def test_adapter_set_premerged_and_task_ids():
    s = _make_set()
    assert s.premerged().adapter_id == "pm"
    assert s.task_ids() == ["e_a", "e_b"]
    assert "e_a" in s and "nope" not in s
    with pytest.raises(KeyError, match="unknown adapter id"):
        s["nope"]


def test_adapter_set_requires_exactly_one_premerged():
    ads = {"e_a": init_adapter(4, 4, 2, seed=1, adapter_id="e_a", task_id="a")}
    with pytest.raises(ValueError, match="pre-merged"):
        AdapterSet(ads)
    ads = {
        "p1": init_adapter(4, 4, 2, seed=1, adapter_id="p1",
                           task_id=PREMERGED_ID),
        "p2": init_adapter(4, 4, 2, seed=2, adapter_id="p2",
                           task_id=PREMERGED_ID),
    }
    with pytest.raises(ValueError, match="pre-merged"):
        AdapterSet(ads)
