import numpy as np
import pytest

from openworld.metrics import (
    confusion_table,
    macro_f,
    nmi,
    pairwise_accuracy,
    rejection_prf,
)
from openworld.rejection import REJECTED

from oracles import scalar_macro_f, scalar_nmi, scalar_prf


def random_confusion(rng, classes=4):
    return rng.integers(0, 20, size=(classes, classes))


# -------------------------------------------------------- confusion


def test_confusion_table_counts():
    truth = [0, 1, REJECTED, REJECTED, 1]
    verdicts = [0, REJECTED, REJECTED, 0, 1]
    table = confusion_table(truth, verdicts, m=2)
    assert table[0, 0] == 1
    assert table[1, 2] == 1  # true class 1 rejected
    assert table[2, 2] == 1  # true unseen rejected
    assert table[2, 0] == 1  # true unseen classified as 0
    assert table[1, 1] == 1
    assert table.sum() == 5
    # row sums equal true-class counts
    np.testing.assert_array_equal(table.sum(axis=1), [1, 2, 2])


# ----------------------------------------------------------- macro-F


def test_macro_f_perfect_diagonal():
    assert macro_f(np.diag([5, 3, 2])) == pytest.approx(1.0)


def test_macro_f_hand_case():
    assert macro_f(np.array([[1, 1], [1, 1]])) == pytest.approx(0.5)


def test_macro_f_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        table = random_confusion(rng)
        assert macro_f(table) == pytest.approx(scalar_macro_f(table), abs=1e-12)


def test_macro_f_empty_errors():
    with pytest.raises(ValueError):
        macro_f(np.zeros((0, 0)))


# ------------------------------------------------------ rejection PRF


def test_rejection_prf_perfect():
    table = confusion_table([REJECTED, REJECTED, 0], [REJECTED, REJECTED, 0], m=1)
    assert rejection_prf(table) == (1.0, 1.0, 1.0)


def test_rejection_prf_nothing_rejected():
    table = confusion_table([REJECTED, 0], [0, 0], m=1)
    p, r, f = rejection_prf(table)
    assert r == 0.0 and f == 0.0


def test_rejection_prf_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        table = random_confusion(rng, classes=5)
        assert rejection_prf(table) == pytest.approx(scalar_prf(table, 4), abs=1e-12)


# ------------------------------------------------- pairwise accuracy


def test_pairwise_accuracy_all_correct():
    assert pairwise_accuracy([0.9, 0.1], [1, 0]) == 1.0


def test_pairwise_accuracy_alternating():
    assert pairwise_accuracy([0.9, 0.9], [1, 0]) == 0.5


def test_pairwise_accuracy_threshold_is_half():
    assert pairwise_accuracy([0.5], [1]) == 1.0
    assert pairwise_accuracy([0.4999], [1]) == 0.0


def test_pairwise_accuracy_empty_errors():
    with pytest.raises(ValueError):
        pairwise_accuracy([], [])


# ----------------------------------------------------------------- NMI


def test_nmi_identical_partitions():
    labels = [0, 0, 1, 1, 2]
    assert nmi(labels, labels) == pytest.approx(1.0)


def test_nmi_independent_partitions():
    # C = {a,b} {c,d}, Y = {a,c} {b,d}: every intersection is 1, MI = 0
    assert nmi([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(0.0, abs=1e-12)


def test_nmi_single_cluster_returns_zero():
    assert nmi([0, 0, 0], [0, 1, 2]) == 0.0


def test_nmi_symmetric_and_relabel_invariant():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = rng.integers(0, 4, size=30)
        b = rng.integers(0, 3, size=30)
        assert nmi(a, b) == pytest.approx(nmi(b, a), abs=1e-12)
        perm = rng.permutation(4)
        assert nmi(perm[a], b) == pytest.approx(nmi(a, b), abs=1e-12)


def test_nmi_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.integers(0, 5, size=40)
        b = rng.integers(0, 4, size=40)
        assert nmi(a, b) == pytest.approx(scalar_nmi(a, b), abs=1e-12)


def test_nmi_rejects_mismatched_sizes():
    with pytest.raises(ValueError):
        nmi([0, 1], [0, 1, 2])
