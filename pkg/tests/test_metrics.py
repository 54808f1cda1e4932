import numpy as np
import pytest

from ttaswitch.metrics import compute_error_rate, compute_miou


def test_miou_identity_and_disjoint():
    assert compute_miou([0, 1, 2, 1], [0, 1, 2, 1]) == 1.0
    assert compute_miou([1, 1, 1], [0, 0, 0]) == 0.0


def test_miou_hand_oracle():
    # class 0: inter {i0}, union {i0,i1,i3} -> 1/3; class 1: inter {i2},
    # union {i1,i2,i3} -> 1/3; mean = 1/3
    gt = np.array([0, 0, 1, 1])
    pred = np.array([0, 1, 1, 0])
    assert compute_miou(gt, pred) == pytest.approx(1 / 3, abs=1e-12)


def test_miou_ignores_absent_classes():
    # class 7 occurs nowhere, so it cannot dilute the mean
    gt = np.array([0, 0, 2, 2])
    pred = np.array([0, 0, 2, 2])
    assert compute_miou(gt, pred) == 1.0
    # a class present only in the prediction still counts (IoU 0)
    assert compute_miou(np.array([0, 0]), np.array([0, 3])) == pytest.approx(0.25)
    # gt {0}: pred-class-3 adds a zero-IoU class: (1/2 + 0)/2


def test_miou_validation():
    with pytest.raises(ValueError, match="empty"):
        compute_miou([], [])
    with pytest.raises(ValueError, match="shape"):
        compute_miou([0, 1], [0, 1, 2])
    with pytest.raises(ValueError, match="integer"):
        compute_miou([0.5, 1.0], [0.5, 1.0])
    with pytest.raises(ValueError, match="nonnegative"):
        compute_miou([-1, 0], [0, 0])


def test_error_rate():
    assert compute_error_rate([1, 2, 3], [1, 2, 3]) == 0.0
    assert compute_error_rate([1, 1], [2, 2]) == 1.0
    gt = np.arange(10)
    pred = gt.copy()
    pred[[2, 5, 7]] += 1
    assert compute_error_rate(gt, pred) == pytest.approx(0.3)
    with pytest.raises(ValueError, match="empty"):
        compute_error_rate([], [])
