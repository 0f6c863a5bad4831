"""Overlap metrics against a voxel-counting oracle; report structure."""

import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liverseg.metrics import (
    EvalReport, MetricsError, build_report, dice, evaluate, jaccard,
)
from liverseg.volume_io import LabelVolume

from oracles import overlap_counts


def test_hand_counted_offset_blocks():
    a = np.zeros((4, 6), dtype=np.uint8)
    b = np.zeros((4, 6), dtype=np.uint8)
    a[1:3, 0:2] = 1
    b[1:3, 1:3] = 1
    # |A|=4, |B|=4, overlap is the shared 2-pixel column
    assert dice(a, b) == 0.5
    assert jaccard(a, b) == pytest.approx(1.0 / 3.0)


def test_identity_disjoint_and_empty():
    a = np.ones((3, 3))
    z = np.zeros((3, 3))
    b = np.zeros((3, 3))
    b[0, 0] = 1
    assert dice(a, a) == 1.0 and jaccard(a, a) == 1.0
    assert dice(b, 1 - b) == 0.0 and jaccard(b, 1 - b) == 0.0
    assert dice(z, z) == 1.0 and jaccard(z, z) == 1.0


def test_shape_mismatch_rejected():
    with pytest.raises(MetricsError):
        dice(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(MetricsError):
        jaccard(np.zeros(2), np.zeros(3))


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
def test_matches_oracle_and_relation(seed, density):
    rng = np.random.default_rng(seed)
    a = rng.random((5, 7)) < density
    b = rng.random((5, 7)) < density
    inter, union, sa, sb = overlap_counts(a, b)
    d, j = dice(a, b), jaccard(a, b)
    if sa + sb:
        assert d == pytest.approx(2 * inter / (sa + sb), abs=1e-15)
    if union:
        assert j == pytest.approx(inter / union, abs=1e-15)
    assert abs(d - 2 * j / (1 + j)) < 1e-12
    assert j <= d + 1e-15
    assert d == dice(b, a) and j == jaccard(b, a)


def test_false_positives_never_improve_dice():
    truth = np.zeros((8, 8), dtype=np.uint8)
    truth[2:6, 2:6] = 1
    pred = truth.copy()
    scores = []
    for y, x in ((0, 0), (0, 1), (7, 7), (1, 0)):
        scores.append(dice(pred, truth))
        pred[y, x] = 1
    scores.append(dice(pred, truth))
    assert all(b <= a for a, b in zip(scores, scores[1:]))


# -- evaluate ---------------------------------------------------------------

def _phantom_labels():
    labels = np.zeros((4, 8, 8), dtype=np.uint8)
    labels[1:3, 2:6, 2:6] = 1
    labels[1, 3:5, 3:5] = 2
    return labels


def test_perfect_prediction_scores_ones():
    truth = LabelVolume(_phantom_labels())
    m = evaluate(truth, truth, "v0")
    assert m.as_row() == [1.0, 1.0, 1.0, 1.0]


def test_liver_mask_includes_lesion_label():
    truth = _phantom_labels()
    pred = truth.copy()
    pred[pred == 2] = 1   # merge lesion into liver
    m = evaluate(pred, truth)
    assert m.liver_dice == 1.0
    assert m.lesion_dice == 0.0


def test_all_background_prediction():
    truth = _phantom_labels()
    m = evaluate(np.zeros_like(truth), truth)
    assert m.liver_dice == 0.0
    assert m.lesion_dice == 0.0


def test_dilated_prediction_matches_oracle_counts():
    from scipy.ndimage import binary_dilation
    truth = _phantom_labels()
    pred = np.zeros_like(truth)
    pred[binary_dilation(truth >= 1)] = 1
    pred[binary_dilation(truth == 2)] = 2
    m = evaluate(pred, truth)
    inter, union, sa, sb = overlap_counts(pred >= 1, truth >= 1)
    assert m.liver_dice == pytest.approx(2 * inter / (sa + sb), abs=1e-15)
    inter, union, sa, sb = overlap_counts(pred == 2, truth == 2)
    assert m.lesion_jaccard == pytest.approx(inter / union, abs=1e-15)


def test_evaluate_rejects_bad_labels():
    truth = _phantom_labels()
    bad = truth.copy()
    bad[0, 0, 0] = 3
    with pytest.raises(MetricsError):
        evaluate(bad, truth)
    with pytest.raises(MetricsError):
        evaluate(truth[:2], truth)


# -- report ------------------------------------------------------------------

def _report():
    truth = _phantom_labels()
    pred = truth.copy()
    pred[1, 2, 2] = 0
    return build_report([("v0", truth, truth), ("v1", pred, truth)])


def test_report_mean_is_unweighted():
    r = _report()
    rows = np.array([v.as_row() for v in r.volumes])
    np.testing.assert_allclose(r.mean().as_row(), rows.mean(axis=0))
    assert r.volume_count == 2


def test_report_json_matches_schema():
    jsonschema = pytest.importorskip("jsonschema")
    schema = json.loads(
        resources.files("liverseg").joinpath(
            "schemas/eval_report.schema.json").read_text())
    jsonschema.validate(json.loads(_report().to_json()), schema)


def test_report_text_table_is_aligned():
    table = _report().text_table()
    lines = table.splitlines()
    assert "Liver Dice" in lines[0] and "Lesion Jaccard" in lines[0]
    assert len({len(l) for l in lines if l and not l.startswith("-")}) == 1
    assert lines[-1].startswith("mean")
    assert "1.0000" in lines[2]


def test_report_requires_volumes():
    with pytest.raises(MetricsError):
        EvalReport(())
