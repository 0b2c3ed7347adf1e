import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from transind.metrics import EvalReport, dice, evaluate, match_objects, object_f1, summarize


def square(canvas, r, c, side, value=1):
    canvas[r:r + side, c:c + side] = value
    return canvas


def test_dice_fixtures():
    a = square(np.zeros((20, 20), np.uint8), 2, 2, 5)
    assert dice(a, a) == 1.0
    assert dice(a, square(np.zeros((20, 20), np.uint8), 12, 12, 5)) == 0.0
    # |P| = |G| = 100, overlap 50
    p = square(np.zeros((30, 30), np.uint8), 0, 0, 10)
    g = np.zeros((30, 30), np.uint8)
    g[5:15, 0:10] = 1
    assert dice(p, g) == 0.5
    assert dice(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_object_f1_fixtures():
    gt = np.zeros((40, 40), np.uint8)
    for r, c in [(2, 2), (2, 20), (25, 10)]:
        square(gt, r, c, 6)
    pred = np.zeros_like(gt)
    square(pred, 2, 2, 6)
    square(pred, 3, 20, 6)  # IoU 30/42 with the second object
    assert match_objects(pred, gt) == (2, 0, 1)
    assert object_f1(pred, gt) == pytest.approx(0.8)

    one = square(np.zeros((20, 20), np.uint8), 5, 5, 6)
    assert object_f1(one, one) == 1.0
    shifted = square(np.zeros((20, 20), np.uint8), 5, 9, 6)  # IoU 12/60 = 0.2
    assert object_f1(shifted, one) == 0.0
    assert match_objects(np.zeros((5, 5)), one[:5, :5]) == (0, 0, 0)


def test_eight_connectivity():
    gt = np.eye(6, dtype=np.uint8)  # a diagonal line is one object
    assert match_objects(gt, gt) == (1, 0, 0)


def test_greedy_is_one_to_one():
    gt = square(np.zeros((20, 20), np.uint8), 0, 0, 10)
    pred = np.zeros_like(gt)
    pred[0:10, 0:6] = 1
    pred[0:10, 7:10] = 1  # two fragments of one object, only the larger matches
    tp, fp, fn = match_objects(pred, gt, 0.5)
    assert (tp, fp, fn) == (1, 1, 0)


def test_evaluate_aggregates():
    a = square(np.zeros((8, 8), np.uint8), 1, 1, 3)
    rep = evaluate({"x": a}, {"x": a})
    assert rep.aggregate == {"dice": 1.0, "f1": 1.0, "dice_f1_mean": 1.0}
    rep = evaluate({"x": a, "y": np.zeros_like(a)}, {"x": a, "y": a})
    assert rep.aggregate["dice"] == 0.5
    rep = evaluate({"z": np.zeros((3, 3))}, {"z": np.zeros((3, 3))})
    assert rep.per_image[0]["empty"] is True


def test_evaluate_key_mismatch():
    with pytest.raises(KeyError, match="missing \\['b'\\].*extra \\['c'\\]"):
        evaluate({"a": np.zeros((2, 2)), "c": np.zeros((2, 2))},
                 {"a": np.zeros((2, 2)), "b": np.zeros((2, 2))})


def test_pixel_mode():
    a = square(np.zeros((8, 8), np.uint8), 1, 1, 3)
    b = square(np.zeros((8, 8), np.uint8), 1, 2, 3)
    rep = evaluate({"x": b}, {"x": a}, f1_mode="pixel")
    assert rep.aggregate["f1"] == rep.aggregate["dice"]


def test_report_roundtrip(tmp_path):
    a = square(np.zeros((8, 8), np.uint8), 1, 1, 3)
    rep = evaluate({"x": a}, {"x": a})
    rep.save(tmp_path / "r.json")
    assert EvalReport.load(tmp_path / "r.json") == rep


def test_published_mean_column():
    assert round(summarize(85.12, 75.86)["dice_f1_mean"], 2) == 80.49


masks = arrays(np.uint8, (12, 12), elements=st.integers(0, 1))


@settings(max_examples=60, deadline=None)
@given(a=masks, b=masks)
def test_dice_symmetric_bounded(a, b):
    d = dice(a, b)
    assert d == dice(b, a) and 0.0 <= d <= 1.0
    if a.any():
        assert dice(a, a) == 1.0


@settings(max_examples=60, deadline=None)
@given(a=masks, b=masks, t1=st.floats(0.05, 0.95), t2=st.floats(0.05, 0.95))
def test_object_f1_monotone_in_threshold(a, b, t1, t2):
    lo, hi = sorted((t1, t2))
    assert object_f1(a, b, hi) <= object_f1(a, b, lo) + 1e-12


@settings(max_examples=40, deadline=None)
@given(a=masks, b=masks, k=st.integers(1, 3))
def test_object_f1_invariant_to_component_order(a, b, k):
    # rotating both masks renumbers the components without changing any overlap
    assert object_f1(np.rot90(a, k), np.rot90(b, k)) == object_f1(a, b)
    assert match_objects(a[::-1], b[::-1]) == match_objects(a, b)


@settings(max_examples=40, deadline=None)
@given(r=st.integers(0, 6), c=st.integers(0, 6), dr=st.integers(-4, 4), dc=st.integers(-4, 4),
       t=st.floats(0.05, 0.95))
def test_single_component_f1_is_binary(r, c, dr, dc, t):
    g = square(np.zeros((20, 20), np.uint8), r + 4, c + 4, 5)
    p = square(np.zeros((20, 20), np.uint8), r + 4 + dr, c + 4 + dc, 5)
    inter = np.logical_and(p, g).sum()
    iou = inter / np.logical_or(p, g).sum()
    assert object_f1(p, g, t) == (1.0 if iou >= t else 0.0)
