import pytest
import torch

from saandet.detector.roi import PredictHead, RoIHead, expand_predict_head, predict_head, roi_align, sample_proposals
from saandet.exceptions import GeometryError, ShapeError


def test_constant_map_pools_constant():
    features = torch.full((1, 3, 8, 8), 2.5)
    pooled = roi_align(features, torch.tensor([[4.0, 4.0, 40.0, 30.0], [0.0, 0.0, 64.0, 64.0]]), 7, 1 / 8)
    assert pooled.shape == (2, 3, 7, 7)
    assert torch.allclose(pooled, torch.full_like(pooled, 2.5))


def test_ramp_samples_at_cell_centres():
    ramp = torch.arange(16, dtype=torch.float32).repeat(16, 1).view(1, 1, 16, 16)
    pooled = roi_align(ramp, torch.tensor([[2.0, 2.0, 10.0, 10.0]]), 4, 1.0)
    # cell j holds its value at x = j + 0.5
    assert torch.allclose(pooled[0, 0, 0], torch.tensor([2.5, 4.5, 6.5, 8.5]))
    assert torch.allclose(pooled[0, 0, :, 1], torch.full((4,), 4.5))


def test_zero_area_box():
    with pytest.raises(GeometryError):
        roi_align(torch.zeros(1, 1, 4, 4), torch.tensor([[1.0, 1.0, 1.0, 3.0]]), 2, 1.0)


def test_bad_shapes():
    with pytest.raises(ShapeError):
        roi_align(torch.zeros(2, 1, 4, 4), torch.tensor([[0.0, 0.0, 2.0, 2.0]]), 2, 1.0)
    with pytest.raises(ShapeError):
        roi_align(torch.zeros(1, 1, 4, 4), torch.tensor([0.0, 0.0, 2.0, 2.0]), 2, 1.0)


def test_roi_head_shapes():
    head = RoIHead(4, 3, (16, 8))
    assert head.out_features == 8
    assert head(torch.randn(5, 4, 3, 3)).shape == (5, 8)
    with pytest.raises(ShapeError):
        head(torch.randn(5, 4, 2, 2))


def test_predict_head_shapes_and_softmax():
    head = PredictHead(8, 3)
    logits, deltas = head(torch.randn(6, 8))
    assert logits.shape == (6, 4)
    assert deltas.shape == (6, 12)
    scores, _ = predict_head(head, torch.randn(6, 8))
    assert torch.allclose(scores.sum(dim=-1), torch.ones(6))
    assert (scores >= 0).all()


def test_zero_features_give_uniform_scores():
    scores, deltas = predict_head(PredictHead(8, 4), torch.zeros(2, 8))
    assert torch.allclose(scores, torch.full((2, 5), 0.2))
    assert torch.equal(deltas, torch.zeros(2, 16))


def test_predict_head_needs_a_class():
    with pytest.raises(ShapeError):
        PredictHead(8, 0)
    with pytest.raises(ShapeError):
        PredictHead(8, 2)(torch.zeros(1, 4))


def test_expand_keeps_existing_rows():
    head = PredictHead(8, 2)
    with torch.no_grad():
        head.cls_score.bias.copy_(torch.tensor([0.1, 0.2, 0.3]))
    expanded = expand_predict_head(head, 5, generator=torch.Generator().manual_seed(0))
    assert expanded.num_classes == 5
    assert torch.equal(expanded.cls_score.weight[:3], head.cls_score.weight)
    assert torch.equal(expanded.cls_score.bias[:3], head.cls_score.bias)
    assert torch.equal(expanded.bbox_pred.weight[:8], head.bbox_pred.weight)
    assert torch.equal(expanded.cls_score.bias[3:], torch.zeros(3))
    assert torch.equal(expanded.bbox_pred.bias[8:], torch.zeros(12))
    assert expanded.cls_score.weight[3:].abs().max() > 0

    features = torch.randn(4, 8)
    old_logits, old_deltas = head(features)
    new_logits, new_deltas = expanded(features)
    assert torch.allclose(new_logits[:, :3], old_logits)
    assert torch.allclose(new_deltas[:, :8], old_deltas)


def test_expand_is_seeded():
    head = PredictHead(8, 1)
    a = expand_predict_head(head, 2, generator=torch.Generator().manual_seed(4))
    b = expand_predict_head(head, 2, generator=torch.Generator().manual_seed(4))
    assert torch.equal(a.cls_score.weight, b.cls_score.weight)


@pytest.mark.parametrize("size", [1, 2])
def test_expand_refuses_to_shrink(size):
    with pytest.raises(ShapeError):
        expand_predict_head(PredictHead(8, 2), size)


def test_ground_truth_joins_the_candidates():
    gt = torch.tensor([[10.0, 10.0, 30.0, 30.0]])
    boxes, labels, matched = sample_proposals(
        torch.zeros((0, 4)), gt, torch.tensor([3]), torch.zeros((0, 4)), 8, 0.25, 0.5
    )
    assert boxes.tolist() == gt.tolist()
    assert labels.tolist() == [3]
    assert matched.tolist() == [0]


def test_background_near_ignore_region_is_dropped():
    proposals = torch.tensor([[50.0, 50.0, 70.0, 70.0], [0.0, 0.0, 5.0, 5.0]])
    boxes, labels, _ = sample_proposals(
        proposals,
        torch.zeros((0, 4)),
        torch.zeros((0,), dtype=torch.int64),
        torch.tensor([[50.0, 50.0, 70.0, 72.0]]),
        8,
        0.25,
        0.5,
    )
    assert boxes.tolist() == [[0.0, 0.0, 5.0, 5.0]]
    assert labels.tolist() == [0]


def test_no_candidates():
    empty = torch.zeros((0, 4))
    boxes, labels, matched = sample_proposals(empty, empty, torch.zeros((0,), dtype=torch.int64), empty, 8, 0.25, 0.5)
    assert boxes.shape == (0, 4)
    assert labels.numel() == matched.numel() == 0
