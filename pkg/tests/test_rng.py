import numpy as np
import pytest
from hypothesis import given, strategies as st

from attention_qft.rng import RngStream, derive_seed, derive_stream_id


def test_same_stream_reproduces():
    a = RngStream(5, 9).generator().standard_normal(100)
    b = RngStream(5, 9).generator().standard_normal(100)
    assert np.array_equal(a, b)


def test_distinct_ids_differ():
    a = RngStream(5, 9).generator().standard_normal(100)
    b = RngStream(5, 10).generator().standard_normal(100)
    assert not np.array_equal(a, b)


def test_child_streams_are_label_addressed():
    s = RngStream(3)
    assert s.child("batch", 4) == RngStream(3).child("batch", 4)
    assert s.child("batch", 4) != s.child("batch", 5)
    assert s.child("WQ") != s.child("WK")


def test_child_streams_uncorrelated():
    s = RngStream(0)
    a = s.child("a").generator().standard_normal(100_000)
    b = s.child("b").generator().standard_normal(100_000)
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) < 5 / np.sqrt(a.size)


@given(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
def test_any_uint64_pair_is_valid(seed, sid):
    RngStream(seed, sid).generator().random()


@pytest.mark.parametrize("bad", [-1, 2**64, 1.5])
def test_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        RngStream(bad)


def test_derived_ids_are_stable():
    assert derive_stream_id("x", 1) == derive_stream_id("x", 1)
    assert derive_seed(1, "cell", 4) != derive_seed(1, "cell", 5)
    assert 0 <= derive_stream_id("anything") < 2**64
