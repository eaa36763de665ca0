import random

import pytest
import torch

from saandet.detector.boxes import BoxCoder, batched_nms, clip_boxes, nms, remove_small_boxes


def _iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _reference_nms(boxes, scores, threshold):
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(_iou(boxes[i], boxes[j]) <= threshold for j in keep):
            keep.append(i)
    return keep


def test_nms_examples():
    boxes = torch.tensor([[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 30, 30]], dtype=torch.float32)
    scores = torch.tensor([0.9, 0.8, 0.7])
    assert nms(boxes, scores, 0.5).tolist() == [0, 2]
    assert nms(boxes, scores, 0.9).tolist() == [0, 1, 2]


def test_nms_tie_keeps_lower_index():
    boxes = torch.tensor([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=torch.float32)
    assert nms(boxes, torch.tensor([0.5, 0.5]), 0.5).tolist() == [0]


def test_nms_empty():
    assert nms(torch.zeros((0, 4)), torch.zeros((0,)), 0.5).numel() == 0


def test_nms_matches_brute_force():
    rng = random.Random(7)
    for _ in range(200):
        n = rng.randint(1, 25)
        boxes = []
        for _ in range(n):
            x, y = rng.uniform(0, 50), rng.uniform(0, 50)
            boxes.append((x, y, x + rng.uniform(1, 30), y + rng.uniform(1, 30)))
        # few distinct values force ties
        scores = [rng.choice([0.1, 0.3, 0.5, 0.7, 0.9]) for _ in range(n)]
        threshold = rng.choice([0.3, 0.5, 0.7])
        kept = nms(torch.tensor(boxes, dtype=torch.float64), torch.tensor(scores, dtype=torch.float64), threshold)
        assert kept.tolist() == _reference_nms(boxes, scores, threshold)


def test_batched_nms_is_per_label():
    boxes = torch.tensor([[0, 0, 10, 10], [0, 0, 10, 10], [1, 1, 10, 10]], dtype=torch.float32)
    scores = torch.tensor([0.6, 0.9, 0.5])
    labels = torch.tensor([1, 2, 1])
    assert batched_nms(boxes, scores, labels, 0.5).tolist() == [1, 0]


def test_encode_decode_identity():
    reference = torch.tensor([[10.0, 10.0, 30.0, 50.0], [0.0, 0.0, 8.0, 8.0]], dtype=torch.float64)
    gt = torch.tensor([[12.0, 5.0, 40.0, 45.0], [1.0, 2.0, 5.0, 9.0]], dtype=torch.float64)
    for coder in (BoxCoder(), BoxCoder((10.0, 10.0, 5.0, 5.0))):
        decoded = coder.decode(reference, coder.encode(reference, gt))
        assert torch.allclose(decoded, gt)


def test_encode_same_box_is_zero():
    box = torch.tensor([[3.0, 4.0, 20.0, 11.0]])
    assert torch.allclose(BoxCoder().encode(box, box), torch.zeros(1, 4))


def test_decode_clamps_scale():
    reference = torch.tensor([[0.0, 0.0, 10.0, 10.0]])
    decoded = BoxCoder().decode(reference, torch.tensor([[0.0, 0.0, 100.0, 100.0]]))
    assert torch.isfinite(decoded).all()


def test_clip_and_small():
    boxes = torch.tensor([[-5.0, -2.0, 30.0, 70.0], [10.0, 10.0, 11.0, 40.0]])
    clipped = clip_boxes(boxes, (60, 20))
    assert clipped.tolist() == [[0.0, 0.0, 20.0, 60.0], [10.0, 10.0, 11.0, 40.0]]
    assert remove_small_boxes(clipped, 2.0).tolist() == [0]


@pytest.mark.parametrize("threshold", [0.0, 1.0])
def test_nms_threshold_extremes(threshold):
    boxes = torch.tensor([[0, 0, 10, 10], [5, 5, 15, 15], [40, 40, 50, 50]], dtype=torch.float32)
    kept = nms(boxes, torch.tensor([0.3, 0.2, 0.1]), threshold)
    assert kept.tolist() == ([0, 2] if threshold == 0.0 else [0, 1, 2])
