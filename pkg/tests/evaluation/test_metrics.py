import random

import numpy as np
import pytest

from saandet.evaluation.metrics import (
    ScoredBox,
    average_precision,
    compute_ap,
    compute_iou,
    interpolated_precision,
    match_detections,
)
from saandet.models.dataset import Annotation
from saandet.models.geometry import BBox


def _gt(image_id, box, masked=False, position=0):
    return Annotation(
        annotation_id=f"{image_id}#{position}",
        image_id=image_id,
        class_name="plane",
        bbox=BBox.from_tuple(box),
        masked=masked,
    )


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ((0, 0, 10, 10), (0, 0, 10, 10), 1.0),
        ((0, 0, 10, 10), (5, 0, 15, 10), 1 / 3),
        ((0, 0, 10, 10), (10, 0, 20, 10), 0.0),
        ((0, 0, 10, 10), (20, 20, 30, 30), 0.0),
        ((0, 0, 10, 10), (0, 0, 10, 20), 0.5),
        ((0, 0, 10, 10), (2, 2, 8, 8), 0.36),
    ],
)
def test_iou(a, b, expected):
    assert compute_iou(a, b) == pytest.approx(expected)
    assert compute_iou(b, a) == pytest.approx(expected)
    assert compute_iou(BBox.from_tuple(a), b) == pytest.approx(expected)


def test_perfect_detections():
    gt = [_gt("a", (0, 0, 10, 10)), _gt("b", (5, 5, 20, 20))]
    detections = [ScoredBox("a", 0.9, (0, 0, 10, 10)), ScoredBox("b", 0.8, (5, 5, 20, 20))]
    result = compute_ap(detections, gt)
    assert result.ap == pytest.approx(1.0)
    assert result.recall == (0.5, 1.0)
    assert compute_ap(detections, gt, variant="11_point").ap == pytest.approx(1.0)


def test_false_positive_ranked_first():
    gt = [_gt("a", (0, 0, 10, 10))]
    detections = [ScoredBox("a", 0.9, (50, 50, 60, 60)), ScoredBox("a", 0.5, (0, 0, 10, 10))]
    assert compute_ap(detections, gt).ap == pytest.approx(0.5)
    assert compute_ap(detections, gt, variant="11_point").ap == pytest.approx(0.5)


def test_half_recall():
    gt = [_gt("a", (0, 0, 10, 10)), _gt("a", (30, 30, 40, 40), position=1)]
    result = compute_ap([ScoredBox("a", 0.7, (0, 0, 10, 10))], gt)
    assert result.ap == pytest.approx(0.5)
    # thresholds 0.0 to 0.5 are reached, 0.6 to 1.0 are not
    assert compute_ap([ScoredBox("a", 0.7, (0, 0, 10, 10))], gt, variant="11_point").ap == pytest.approx(6 / 11)


def test_no_detections_and_no_ground_truth():
    assert compute_ap([], [_gt("a", (0, 0, 10, 10))]).ap == 0.0
    assert compute_ap([], [_gt("a", (0, 0, 10, 10))], variant="11_point").ap == 0.0
    result = compute_ap([ScoredBox("a", 0.9, (0, 0, 10, 10))], [])
    assert result.ap is None
    assert result.num_ground_truth == 0
    assert compute_ap([], [_gt("a", (0, 0, 10, 10), masked=True)]).ap is None


def test_duplicates_and_other_images_are_false_positives():
    gt = [_gt("a", (0, 0, 10, 10))]
    detections = [
        ScoredBox("a", 0.9, (0, 0, 10, 10)),
        ScoredBox("a", 0.8, (0, 0, 10, 11)),
        ScoredBox("b", 0.95, (0, 0, 10, 10)),
    ]
    matches = match_detections(detections, gt)
    assert [(m.detection, m.outcome) for m in matches] == [(2, "fp"), (0, "tp"), (1, "fp")]
    assert matches[1].ground_truth == "a#0"


def test_threshold_is_inclusive():
    gt = [_gt("a", (0, 0, 10, 10))]
    assert match_detections([ScoredBox("a", 0.9, (0, 0, 10, 20))], gt, 0.5)[0].outcome == "tp"
    assert match_detections([ScoredBox("a", 0.9, (0, 0, 10, 20))], gt, 0.51)[0].outcome == "fp"


def test_ties_keep_input_order():
    gt = [_gt("a", (0, 0, 10, 10))]
    detections = [ScoredBox("a", 0.5, (0, 0, 10, 11)), ScoredBox("a", 0.5, (0, 0, 10, 10))]
    matches = match_detections(detections, gt)
    assert [(m.detection, m.outcome) for m in matches] == [(0, "tp"), (1, "fp")]


def test_masked_objects_are_ignored():
    gt = [_gt("a", (0, 0, 10, 10)), _gt("a", (30, 30, 40, 40), masked=True, position=1)]
    detections = [ScoredBox("a", 0.9, (30, 30, 40, 40)), ScoredBox("a", 0.8, (0, 0, 10, 10))]
    result = compute_ap(detections, gt)
    assert [m.outcome for m in result.matches] == ["ignored", "tp"]
    assert result.num_ground_truth == 1
    assert result.ap == pytest.approx(1.0)
    assert result.recall == (1.0,)


def test_interpolated_precision_is_non_increasing():
    envelope = interpolated_precision(np.array([1.0, 0.5, 0.67, 0.5, 0.6]))
    assert envelope.tolist() == [1.0, 0.67, 0.67, 0.6, 0.6]
    assert interpolated_precision(np.array([])).size == 0


def test_average_precision_of_an_empty_curve():
    assert average_precision(np.array([]), np.array([])) == 0.0


def _reference_ap(outcomes, num_gt):
    counted = [o for o in outcomes if o != "ignored"]
    precisions = []
    tp = 0
    for rank, outcome in enumerate(counted, start=1):
        tp += outcome == "tp"
        precisions.append(tp / rank)
    total = 0.0
    for rank, outcome in enumerate(counted):
        if outcome == "tp":
            total += max(precisions[rank:])
    return total / num_gt


def _random_case(rng):
    gt = []
    for i in range(rng.randint(1, 4)):
        for j in range(rng.randint(0, 3)):
            x, y = rng.uniform(0, 60), rng.uniform(0, 60)
            box = (x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30))
            gt.append(_gt(f"img{i}", box, masked=rng.random() < 0.15, position=j))
    detections = []
    for _ in range(rng.randint(0, 12)):
        if gt and rng.random() < 0.6:
            target = rng.choice(gt)
            x1, y1, x2, y2 = target.bbox.as_tuple()
            jitter = rng.uniform(-3, 3)
            detections.append(ScoredBox(target.image_id, rng.random(), (x1 + jitter, y1, x2 + jitter, y2)))
        else:
            x, y = rng.uniform(0, 80), rng.uniform(0, 80)
            detections.append(ScoredBox(f"img{rng.randint(0, 3)}", rng.random(), (x, y, x + 10, y + 10)))
    return detections, gt


def test_matches_reference_on_random_cases():
    rng = random.Random(1234)
    for _ in range(1000):
        detections, gt = _random_case(rng)
        result = compute_ap(detections, gt)
        num_gt = sum(not ann.masked for ann in gt)
        if num_gt == 0:
            assert result.ap is None
            continue
        assert 0.0 <= result.ap <= 1.0
        reference = _reference_ap([m.outcome for m in result.matches], num_gt)
        assert result.ap == pytest.approx(reference, abs=1e-9)
        eleven = compute_ap(detections, gt, variant="11_point").ap
        assert 0.0 <= eleven <= 1.0


def test_monotone_rescoring_keeps_ap():
    rng = random.Random(99)
    for _ in range(200):
        detections, gt = _random_case(rng)
        rescored = [ScoredBox(d.image_id, d.score**3 * 0.5 + 0.1, d.box) for d in detections]
        assert compute_ap(detections, gt).ap == compute_ap(rescored, gt).ap
