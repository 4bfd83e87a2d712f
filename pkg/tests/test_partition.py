import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from bitransfer.errors import ContractError, DataError, DimensionError
from bitransfer.partition import (CaseStats, PartitionMask, classify_cases, confidence_masks, gt_probs,
                                  loss_masks, multi_loss_masks, multi_masks, orient)


def logits_for(p_gt, c=3):
    """Two-class-style logits whose softmax gives ``p_gt`` on class 0."""
    rest = (1 - p_gt) / (c - 1)
    return np.log(np.array([[p_gt] + [rest] * (c - 1)]))


def test_partition_mask_invariants():
    with pytest.raises(DimensionError):
        PartitionMask(np.ones((3, 1), dtype=bool), "confidence")
    with pytest.raises(ContractError):
        PartitionMask(np.array([[True, True]]), "confidence")
    with pytest.raises(ContractError):
        PartitionMask(np.array([[False, False]]), "confidence")


def test_confidence_strict_and_tie():
    z1, z2 = logits_for(0.7), logits_for(0.4)
    assert confidence_masks(z1, z2, [0]).assignments.tolist() == [[True, False]]
    assert confidence_masks(z2, z1, [0]).assignments.tolist() == [[False, True]]
    assert confidence_masks(z1, z1.copy(), [0]).assignments.tolist() == [[False, True]]


def test_confidence_label_errors():
    z = np.zeros((2, 3))
    with pytest.raises(DataError):
        confidence_masks(z, z, [0, 3])
    with pytest.raises(DimensionError):
        confidence_masks(z, np.zeros((2, 4)), [0, 1])


def test_confidence_rows_sum_to_one_over_10000():
    rng = np.random.default_rng(0)
    z1, z2 = rng.normal(size=(10000, 5)), rng.normal(size=(10000, 5))
    m = confidence_masks(z1, z2, rng.integers(0, 5, 10000))
    assert np.all(m.assignments.sum(axis=1) == 1)


def test_loss_masks_examples():
    assert loss_masks([[0.2, 0.9]]).assignments.tolist() == [[True, False]]
    assert loss_masks([[0.5, 0.5]]).assignments.tolist() == [[False, True]]
    with pytest.raises(DataError):
        loss_masks([[np.nan, 0.1]])
    with pytest.raises(DimensionError):
        loss_masks([[0.1, 0.2, 0.3]])


def test_loss_masks_match_argmin_oracle():
    rng = np.random.default_rng(1)
    L = rng.integers(0, 4, size=(10000, 2)).astype(float)  # many ties
    got = loss_masks(L).teacher
    oracle = np.array([0 if a < b else 1 for a, b in L])
    assert np.array_equal(got, oracle)


def test_multi_masks_examples():
    assert multi_masks([[0.2, 0.9, 0.5]]).teacher.tolist() == [1]
    assert multi_masks([[0.5, 0.5, 0.1]]).teacher.tolist() == [0]
    empty = multi_masks(np.zeros((0, 3)))
    assert empty.n == 0 and empty.k == 3
    rng = np.random.default_rng(2)
    for _ in range(5):
        m = multi_masks(rng.uniform(size=(10000, 5)))
        assert np.all(m.assignments.sum(axis=1) == 1)


def test_multi_loss_masks_pick_lowest_loss():
    assert multi_loss_masks([[0.3, 0.1, 0.1]]).teacher.tolist() == [1]


def test_multi_masks_agree_with_confidence_except_ties():
    rng = np.random.default_rng(3)
    z1 = rng.integers(-2, 3, size=(5000, 3)).astype(float)
    z2 = rng.integers(-2, 3, size=(5000, 3)).astype(float)
    y = rng.integers(0, 3, 5000)
    p = np.stack([gt_probs(z1, y), gt_probs(z2, y)], axis=1)
    a = confidence_masks(z1, z2, y).teacher
    b = multi_masks(p).teacher
    tie = p[:, 0] == p[:, 1]
    assert tie.any()
    assert np.array_equal(a[~tie], b[~tie])
    assert np.all(a[tie] == 1) and np.all(b[tie] == 0)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (20, 2), elements=st.floats(0.01, 0.99)))
def test_confidence_invariant_to_monotone_transform(p):
    # construct logits with the given gt-probabilities on class 0 of 2 classes
    z1 = np.log(np.stack([p[:, 0], 1 - p[:, 0]], axis=1))
    z2 = np.log(np.stack([p[:, 1], 1 - p[:, 1]], axis=1))
    y = np.zeros(20, dtype=int)
    base = confidence_masks(z1, z2, y).teacher
    direct = np.where(gt_probs(z1, y) > gt_probs(z2, y), 0, 1)
    assert np.array_equal(base, direct)
    f = lambda q: np.exp(3 * q) + q ** 3  # strictly increasing
    via = np.where(f(gt_probs(z1, y)) > f(gt_probs(z2, y)), 0, 1)
    assert np.array_equal(base, via)


def test_case_labels_examples():
    y = np.array([0, 0, 0, 0])
    t = np.array([[3.0, 0.0], [3.0, 0.0], [-0.1, 0.0], [-0.1, 0.0]])
    s = np.array([[2.0, 0.0], [-1.0, 0.0], [-0.5, 0.0], [-0.2, 0.0]])
    stats = classify_cases(t, s, y)
    assert stats.counts == {"case1": 1, "case2": 1, "case3": 2, "inverted": 0}
    assert abs(sum(stats.fractions().values()) - 1) < 1e-15


def test_inverted_case_exists_with_three_classes():
    # teacher more confident on the truth yet wrong; student right with less confidence
    y = np.array([0])
    t = np.log(np.array([[0.45, 0.50, 0.05]]))
    s = np.log(np.array([[0.40, 0.30, 0.30]]))
    assert classify_cases(t, s, y).counts["inverted"] == 1


def test_case_orientation_contract():
    y = np.array([0])
    with pytest.raises(ContractError):
        classify_cases(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]), y)


def test_orient_then_classify_sums_to_one():
    rng = np.random.default_rng(4)
    z1, z2 = rng.normal(size=(3000, 4)), rng.normal(size=(3000, 4))
    y = rng.integers(0, 4, 3000)
    stats = classify_cases(*orient(z1, z2, y), y)
    assert stats.total == 3000 and abs(sum(stats.fractions().values()) - 1) < 1e-12
    assert CaseStats().fractions()["case1"] == 0.0
