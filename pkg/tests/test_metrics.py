import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stbava.metrics import binarize, evaluate, frame_ious, frame_prf, fscore, miou


def brute_force(pred, gt, beta2=0.3):
    """Pixel-by-pixel counts with the empty-frame conventions written out."""
    tp = fp = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        tp += p and g
        fp += p and not g
        fn += g and not p
    if tp + fp + fn == 0:
        return 1.0, 1.0
    iou = tp / (tp + fp + fn)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f = (1 + beta2) * prec * rec / (beta2 * prec + rec) if beta2 * prec + rec else 0.0
    return iou, f


def test_worked_fscore_value():
    gt = np.zeros((8, 8), np.uint8)
    gt[:4] = 1
    pred = np.zeros_like(gt)
    pred[:2] = 1  # precision 1, recall 0.5
    p, r, f = frame_prf(pred, gt)
    assert p[0] == 1.0 and r[0] == 0.5
    assert abs(f[0] - 0.8125) <= 1e-12
    assert abs(fscore(pred, gt) - 0.8125) <= 1e-12


def test_random_pairs_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        density = rng.random(2)
        pred = (rng.random((8, 8)) < density[0]).astype(np.uint8)
        gt = (rng.random((8, 8)) < density[1]).astype(np.uint8)
        iou, f = brute_force(pred, gt)
        assert abs(miou(pred, gt) - iou) <= 1e-9
        assert abs(fscore(pred, gt) - f) <= 1e-9


def test_empty_conventions():
    z = np.zeros((4, 4), np.uint8)
    o = np.ones((4, 4), np.uint8)
    assert miou(z, z) == 1.0 and fscore(z, z) == 1.0
    assert miou(z, o) == 0.0 and fscore(z, o) == 0.0
    assert miou(o, z) == 0.0 and fscore(o, z) == 0.0


def test_rejects_non_binary_and_shape_mismatch():
    with pytest.raises(ValueError, match="binary"):
        miou(np.full((2, 2), 0.5), np.zeros((2, 2)))
    with pytest.raises(ValueError, match="dims"):
        miou(np.zeros((2, 2)), np.zeros((3, 3)))


def test_binarize_threshold_inclusive():
    np.testing.assert_array_equal(binarize([0.49, 0.5, 0.9]), [0, 1, 1])


masks = arrays(np.uint8, (3, 6, 6), elements=st.integers(0, 1))


@settings(max_examples=60, deadline=None)
@given(masks, masks)
def test_scores_bounded_and_symmetric_iou(p, g):
    ious = frame_ious(p, g)
    assert np.all((0 <= ious) & (ious <= 1))
    np.testing.assert_array_equal(ious, frame_ious(g, p))
    f = frame_prf(p, g)[2]
    assert np.all((0 <= f) & (f <= 1 + 1e-12))


@settings(max_examples=40, deadline=None)
@given(masks, masks, st.permutations(range(3)))
def test_frame_permutation_invariance(p, g, perm):
    perm = list(perm)
    assert miou(p[perm], g[perm]) == pytest.approx(miou(p, g), abs=1e-12)
    assert fscore(p[perm], g[perm]) == pytest.approx(fscore(p, g), abs=1e-12)


def test_adding_true_positive_never_lowers_iou():
    rng = np.random.default_rng(1)
    for _ in range(50):
        gt = (rng.random((8, 8)) < 0.4).astype(np.uint8)
        pred = gt * (rng.random((8, 8)) < 0.5)
        missing = np.argwhere((gt == 1) & (pred == 0))
        if not len(missing):
            continue
        before = miou(pred, gt)
        pred[tuple(missing[0])] = 1
        assert miou(pred, gt) >= before


def test_evaluate_report_is_unweighted_clip_mean():
    a = np.ones((2, 4, 4), np.uint8)
    b = np.zeros((5, 4, 4), np.uint8)
    b_gt = b.copy()
    b_gt[:, 0, 0] = 1
    rep = evaluate([a, b], [a, b_gt], ids=["x", "y"], config={"k": 1})
    assert rep.miou == pytest.approx(0.5)
    d = json.loads(rep.to_json())
    assert [c["id"] for c in d["clips"]] == ["x", "y"] and d["config"] == {"k": 1}
    with pytest.raises(ValueError):
        evaluate([], [])
