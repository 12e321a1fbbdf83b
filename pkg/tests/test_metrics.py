import numpy as np
import pytest

from nlunet.errors import ShapeError, UndefinedMetricError
from nlunet.metrics import (
    SegmentationReport,
    binarize,
    dice_ratio,
    evaluate,
    mhd_3d,
    mhd_directional,
    modified_hausdorff,
)
from oracles import brute_mhd


def random_pair(seed, shape=(4, 4, 4)):
    rng = np.random.default_rng(seed)
    p = rng.random(shape) < rng.uniform(0.2, 0.6)
    l = rng.random(shape) < rng.uniform(0.2, 0.6)
    p.flat[0] = l.flat[-1] = True
    return p, l


# --- binarize / dice --------------------------------------------------------------


def test_binarize_partition():
    labels = np.random.default_rng(0).integers(0, 4, (3, 3, 3))
    assert sum(binarize(labels, c).sum() for c in range(4)) == labels.size
    assert binarize(np.full((2, 2, 2), 2), 2).all()
    for idx in np.ndindex(labels.shape):
        assert binarize(labels, 1)[idx] == (labels[idx] == 1)


def test_dice_analytic_cases():
    p = np.zeros((2, 2, 2), bool)
    p[0, 0, :] = True
    assert dice_ratio(p, p) == 1.0
    assert dice_ratio(p, ~p) == 0.0
    l = p.copy()
    l[1, 0, :] = True
    assert dice_ratio(p, l) == pytest.approx(2 / 3)
    assert dice_ratio(l, p) == dice_ratio(p, l)


def test_dice_both_empty_is_undefined():
    with pytest.raises(UndefinedMetricError):
        dice_ratio(np.zeros(4, bool), np.zeros(4, bool))


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_ratio(np.zeros(4, bool), np.zeros(5, bool))


# --- MHD ----------------------------------------------------------------------------


def test_mhd_hand_example():
    assert modified_hausdorff(np.array([0.0]), np.array([3.0, 4.0])) == pytest.approx(3.5)


def test_mhd_identical_maps_is_zero():
    p, _ = random_pair(0)
    assert mhd_directional(p, p, "D") == 0.0
    assert mhd_3d(p, p) == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_mhd_matches_brute_force(seed):
    p, l = random_pair(seed)
    per_axis = [brute_mhd(p, l, ax) for ax in range(3)]
    for name, want in zip("DHW", per_axis):
        assert abs(mhd_directional(p, l, name) - want) < 1e-9
    assert abs(mhd_3d(p, l) - sum(per_axis) / 3) < 1e-9


def test_mhd_non_cubic_against_brute_force():
    p, l = random_pair(99, (3, 5, 4))
    for ax in range(3):
        assert abs(mhd_directional(p, l, ax) - brute_mhd(p, l, ax)) < 1e-9


@pytest.mark.parametrize("perm", [(1, 0, 2), (2, 0, 1), (2, 1, 0), (1, 2, 0)])
def test_mhd_3d_invariant_under_axis_permutation(perm):
    p, l = random_pair(7)
    assert mhd_3d(p, l) == pytest.approx(mhd_3d(p.transpose(perm), l.transpose(perm)), abs=1e-12)


def test_mhd_symmetric():
    p, l = random_pair(8)
    assert mhd_3d(p, l) == pytest.approx(mhd_3d(l, p), abs=1e-12)


def test_mhd_empty_foreground_is_undefined():
    p, _ = random_pair(0)
    with pytest.raises(UndefinedMetricError):
        mhd_directional(p, np.zeros_like(p), "H")


# --- evaluate / report -------------------------------------------------------------------


def test_evaluate_perfect_prediction():
    truth = np.random.default_rng(0).integers(0, 4, (6, 6, 6))
    report = evaluate(truth, truth)
    assert [c.name for c in report.classes] == ["CSF", "GM", "WM"]
    assert report.avg_dice == 1.0 and report.avg_mhd3d == 0.0


def test_evaluate_lists_requested_classes_in_order():
    truth = np.random.default_rng(1).integers(0, 4, (4, 4, 4))
    report = evaluate(truth, truth, class_ids=(3, 0))
    assert [c.class_id for c in report.classes] == [3, 0]


def test_evaluate_absent_class_is_flagged_and_excluded():
    truth = np.ones((4, 4, 4), dtype=np.uint8)
    pred = truth.copy()
    report = evaluate(pred, truth, class_ids=(1, 2))
    assert report.classes[1].undefined and report.classes[1].dice is None
    assert report.avg_dice == 1.0


def test_evaluate_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(4, 4, 4\).*\(4, 4, 5\)"):
        evaluate(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))


def test_report_text_round_trip_and_determinism():
    rng = np.random.default_rng(2)
    truth = rng.integers(0, 4, (5, 5, 5))
    pred = np.where(rng.random(truth.shape) < 0.8, truth, rng.integers(0, 4, truth.shape))
    text = evaluate(pred, truth).to_text()
    assert text == evaluate(pred.copy(), truth.copy()).to_text()
    back = SegmentationReport.from_text(text)
    assert back.to_text() == text
