import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cov3d.metrics import confusion_matrix, macro_f1
from oracles import macro_f1_counting


def test_perfect_prediction():
    assert macro_f1([0, 1, 1, 0], [0, 1, 1, 0]).macro_f1 == 1.0


def test_hand_example():
    rep = macro_f1([1, 0, 0, 0], [1, 1, 0, 0])
    assert rep.f1[1] == pytest.approx(2 / 3, abs=1e-12)
    assert rep.f1[0] == pytest.approx(0.8, abs=1e-12)
    assert rep.macro_f1 == pytest.approx(0.733333, abs=1e-6)
    np.testing.assert_array_equal(rep.confusion, [[2, 0], [1, 1]])


def test_zero_division_rule():
    rep = macro_f1([0, 0, 0], [0, 0, 0])
    assert list(rep.f1) == [1.0, 0.0]
    assert rep.macro_f1 == 0.5


def test_empty_and_range_errors():
    with pytest.raises(ValueError, match="empty"):
        macro_f1([], [])
    with pytest.raises(ValueError, match="label"):
        macro_f1([0, 1], [0, 2])
    with pytest.raises(ValueError, match="predictions"):
        macro_f1([0, 1, 1], [0, 1])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 4).flatmap(lambda c: st.tuples(
    st.just(c), st.lists(st.tuples(st.integers(0, c - 1), st.integers(0, c - 1)), min_size=1, max_size=40))))
def test_matches_counting_oracle(case):
    c, pairs = case
    preds, labels = zip(*pairs)
    rep = macro_f1(preds, labels, c)
    ref, per_class = macro_f1_counting(preds, labels, c)
    assert abs(rep.macro_f1 - ref) <= 1e-12
    np.testing.assert_allclose(rep.f1, per_class, atol=1e-12)
    assert rep.num_samples == len(pairs)
    assert rep.macro_f1 == pytest.approx(float(np.mean(rep.f1)), abs=1e-15)


def test_permutation_and_relabel_invariance():
    rng = np.random.default_rng(0)
    p, t = rng.integers(0, 2, 50), rng.integers(0, 2, 50)
    base = macro_f1(p, t).macro_f1
    perm = rng.permutation(50)
    assert macro_f1(p[perm], t[perm]).macro_f1 == pytest.approx(base, abs=1e-15)
    assert macro_f1(1 - p, 1 - t).macro_f1 == pytest.approx(base, abs=1e-15)


def test_confusion_layout_and_format():
    cm = confusion_matrix([1, 1, 0], [0, 1, 1])
    np.testing.assert_array_equal(cm, [[0, 1], [1, 1]])  # rows true, cols predicted
    text = macro_f1([1, 0, 0, 0], [1, 1, 0, 0]).format(["neg", "pos"])
    assert "macro F1: 0.7333" in text and "0.6667" in text
