import numpy as np
import pytest

from app.models.errors import InvalidArgumentError
from app.models.geometry import PointCloud
from app.services.metrics import chamfer, evaluate, f1, mmd, ucd
from app.services.verification import brute_chamfer, brute_f1, brute_ucd


def cloud(points, sid=None):
    return PointCloud(points=points, source_id=sid)


def test_chamfer_hand_example():
    assert chamfer(np.array([[0.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]])) == 2.0


def test_chamfer_is_symmetric_and_zero_on_identity(rng):
    a, b = rng.normal(size=(20, 3)), rng.normal(size=(13, 3))
    assert chamfer(a, b) == pytest.approx(chamfer(b, a), rel=1e-12)
    assert chamfer(a, a) == 0.0


def test_ucd_is_one_sided():
    partial = np.array([[0.0, 0.0, 0.0]])
    completed = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]])
    assert ucd(partial, completed) == 0.0
    assert ucd(completed, partial) == 1.0


def test_f1_hand_example():
    pred = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
    gt = np.array([[0.0, 0.0, 0.0]])
    score, accuracy, completeness = f1(pred, gt, 0.03)
    assert (accuracy, completeness) == (0.5, 1.0)
    assert score == pytest.approx(2.0 / 3.0)


def test_f1_threshold_is_strict():
    score, _, _ = f1(np.array([[0.0, 0.0, 0.0]]), np.array([[0.5, 0.0, 0.0]]), epsilon=0.5)
    assert score == 0.0
    with pytest.raises(InvalidArgumentError):
        f1(np.zeros((1, 3)), np.zeros((1, 3)), epsilon=0.0)


def test_mmd_takes_minimum_over_ground_truths(rng):
    a, b = rng.normal(size=(10, 3)), rng.normal(size=(10, 3)) + 3.0
    assert mmd([a], [b, a]) == 0.0
    assert mmd([a, b], [a]) == pytest.approx(chamfer(b, a) / 2.0)
    with pytest.raises(InvalidArgumentError):
        mmd([], [a])


def test_evaluate_reports_scaled_values_and_per_item(rng):
    preds = {"x": cloud(rng.normal(size=(8, 3)), "x"), "y": cloud(rng.normal(size=(8, 3)), "y")}
    gts = {"x": cloud(rng.normal(size=(9, 3)), "x"), "y": cloud(rng.normal(size=(9, 3)), "y")}
    reports = {r.name: r for r in evaluate(preds, gts, ["cd", "f1", "mmd", "ucd"], partials=gts)}
    expected_cd = (chamfer(preds["x"], gts["x"]) + chamfer(preds["y"], gts["y"])) / 2.0
    assert reports["cd"].value == pytest.approx(expected_cd, rel=1e-12)
    assert reports["cd"].scaled == pytest.approx(expected_cd * 1e4)
    assert reports["f1"].scale_factor == 1e2
    assert [item for item, _ in reports["ucd"].per_item] == ["x", "y"]
    assert reports["mmd"].per_item is None


def test_evaluate_rejects_bad_requests(rng):
    preds = {"x": cloud(rng.normal(size=(4, 3)))}
    with pytest.raises(InvalidArgumentError):
        evaluate(preds, preds, ["emd"])
    with pytest.raises(InvalidArgumentError):
        evaluate(preds, preds, ["ucd"])
    with pytest.raises(InvalidArgumentError):
        evaluate(preds, {"z": preds["x"]}, ["cd"])


def test_ucd_hand_example_and_reverse():
    partial = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    completed = np.array([[0.0, 0.0, 0.0]])
    assert ucd(partial, completed) == 2.0
    assert ucd(completed, partial) == 0.0
    assert ucd(partial, completed) <= chamfer(partial, completed)


def test_metrics_match_double_loop_up_to_128_points():
    rng = np.random.default_rng(77)
    for n, m in ((128, 128), (128, 1), (97, 113)):
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
        assert chamfer(a, b) == pytest.approx(brute_chamfer(a, b), rel=1e-12)
        assert ucd(a, b) == pytest.approx(brute_ucd(a, b), rel=1e-12)
        assert f1(a, b, 0.5)[0] == brute_f1(a, b, 0.5)
