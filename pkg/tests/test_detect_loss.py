import math

import numpy as np
import pytest
import torch

from uvcamo.detect_loss import (
    DetectionSet, GridDetectorNet, ToyDetector, attack_loss, batch_attack_loss, batch_center_cell_loss,
    detection_score, detector_forward, iou, nms_filter, smooth_loss, toy_detector_forward, total_loss,
)
from uvcamo.exceptions import ShapeMismatchError, TrainingFailedError
from uvcamo.selftest import detector_gradient_error


def test_iou_example():
    assert float(iou([0, 0, 2, 2], [1, 1, 3, 3])) == pytest.approx(1 / 7, abs=1e-12)


def test_iou_disjoint_and_degenerate():
    assert float(iou([0, 0, 1, 1], [2, 2, 3, 3])) == 0.0
    assert float(iou([0, 0, 0, 0], [0, 0, 0, 0])) == 0.0


def test_iou_broadcasts():
    out = iou(torch.tensor([[0, 0, 2, 2], [0, 0, 4, 4.0]]), torch.tensor([0, 0, 2, 2.0]))
    assert out.tolist() == pytest.approx([1.0, 0.25])


def test_detection_score_example():
    dets = DetectionSet([[0, 0, 2, 2]], [0.9], [[0.8, 0.2]])
    assert float(detection_score(dets, [0, 0, 2, 1])[0]) == pytest.approx(0.36, abs=1e-12)


@pytest.mark.parametrize("max_score,expected", [(0.5, 0.6931), (0.36, 0.4463)])
def test_attack_loss_examples(max_score, expected):
    dets = DetectionSet([[0, 0, 2, 2], [0, 0, 2, 2]], [1.0, 1.0], [[max_score, 0], [max_score / 2, 0]])
    assert float(attack_loss(dets, [0, 0, 2, 2])) == pytest.approx(expected, abs=1e-4)
    assert float(attack_loss(dets, [0, 0, 2, 2])) == pytest.approx(-math.log(1 - max_score), abs=1e-12)


def test_attack_loss_empty_is_zero():
    assert float(attack_loss(DetectionSet.empty(), [0, 0, 1, 1])) == 0.0


def test_attack_loss_finite_at_certain_detection():
    dets = DetectionSet([[0, 0, 2, 2]], [1.0], [[1.0, 0.0]])
    assert math.isfinite(float(attack_loss(dets, [0, 0, 2, 2])))


def test_smooth_loss_examples():
    assert float(smooth_loss(torch.tensor([[0.0, 1.0]]))) == 1.0
    assert float(smooth_loss(torch.tensor([[0.0, 1.0], [0.0, 1.0]]))) == 2.0


def test_smooth_loss_constant_is_zero():
    assert float(smooth_loss(torch.full((5, 7, 3), 0.3))) == 0.0


def test_smooth_loss_batched():
    x = torch.zeros(2, 2, 2, 1)
    x[1, 0, 1, 0] = 1.0
    assert smooth_loss(x).tolist() == [0.0, 2.0]


def test_total_loss_example():
    assert total_loss(0.5, 100.0) == pytest.approx(0.51, abs=1e-12)
    with pytest.raises(ValueError):
        total_loss(0.5, 1.0, alpha=-1)


def test_batch_attack_loss_matches_single():
    torch.manual_seed(0)
    boxes = torch.rand(3, 5, 4) * 10
    boxes[..., 2:] += boxes[..., :2]
    obj, cls = torch.rand(3, 5), torch.rand(3, 5, 2)
    gt = torch.tensor([[1.0, 1.0, 8.0, 8.0]] * 3)
    batched = batch_attack_loss(boxes, obj, cls, gt)
    for i in range(3):
        single = attack_loss(DetectionSet(boxes[i], obj[i], cls[i]), gt[i])
        assert float(batched[i]) == pytest.approx(float(single), rel=1e-6)


def test_center_cell_loss_uses_only_center_cell():
    s = 4
    boxes = torch.tensor([[0.0, 0.0, 16.0, 16.0]]).repeat(1, s * s, 1)
    obj = torch.zeros(1, s * s)
    cls = torch.ones(1, s * s, 2)
    gt = torch.tensor([[0.0, 0.0, 16.0, 16.0]])  # center (8, 8) -> cell row 1, col 1 at stride 8
    obj[0, 0] = 0.9
    assert float(batch_center_cell_loss(boxes, obj, cls, gt, (s, s), (32, 32))[0]) == 0.0
    obj[0, 1 * s + 1] = 0.5
    assert float(batch_center_cell_loss(boxes, obj, cls, gt, (s, s), (32, 32))[0]) == pytest.approx(math.log(2))


def test_grid_decode_geometry():
    net = GridDetectorNet((32, 32), grid=4, channels=(4, 8))
    raw = torch.zeros(1, 4, 4, 7)
    boxes, obj, cls = net.decode(raw)
    # sigmoid(0) = 0.5: centers in the middle of each 8-pixel cell, boxes half the image
    assert boxes[0, 0].tolist() == [4 - 8, 4 - 8, 4 + 8, 4 + 8]
    assert boxes[0, 5].tolist() == [12 - 8, 12 - 8, 12 + 8, 12 + 8]
    assert torch.all(obj == 0.5) and cls.shape == (1, 16, 2)


def test_detector_forward_resolution_check():
    net = GridDetectorNet((32, 32), grid=4, channels=(4, 8))
    with pytest.raises(ShapeMismatchError):
        detector_forward(net, torch.zeros(1, 16, 16, 3))
    assert len(toy_detector_forward(net, torch.zeros(32, 32, 3))) == 16


def test_grid_must_divide_image():
    with pytest.raises(ValueError):
        GridDetectorNet((30, 30), grid=4)


def test_detector_image_gradient_matches_finite_differences():
    assert detector_gradient_error() < 1e-3


def test_nms_drops_overlaps_and_low_confidence():
    dets = DetectionSet([[0, 0, 10, 10], [1, 1, 10, 10], [20, 20, 30, 30], [40, 40, 50, 50]],
                        [1, 1, 1, 1], [[0.9, 0], [0.8, 0], [0.7, 0], [0.01, 0]])
    kept = nms_filter(dets, 0.5, 0.05)
    assert kept.boxes.tolist() == [[0, 0, 10, 10], [20, 20, 30, 30]]


def _blob_scenes(n, size=32, seed=0):
    """Bright rectangles on dark noise: an easy single-object detection task."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 0.3, size=(n, size, size, 3)).astype(np.float32)
    y = np.zeros((n, 4))
    for i in range(n):
        w, h = rng.integers(8, 20, size=2)
        x0, y0 = rng.integers(0, size - w), rng.integers(0, size - h)
        X[i, y0:y0 + h, x0:x0 + w] = rng.uniform(0.7, 1.0, size=3)
        y[i] = [x0, y0, x0 + w, y0 + h]
    return X, y


@pytest.fixture(scope="module")
def fitted_toy():
    X, y = _blob_scenes(192)
    return ToyDetector(image_size=(32, 32), grid=4, channels=(8, 16, 32), epochs=25, batch_size=16,
                       learning_rate=0.005, min_ap=0.0, random_state=0).fit(X, y)


def test_toy_detector_learns_blobs(fitted_toy):
    X, y = _blob_scenes(64, seed=1)
    assert fitted_toy.score(X, y) > 0.7
    assert not any(p.requires_grad for p in fitted_toy.net_.parameters())


def test_toy_detector_refuses_below_min_ap():
    X, y = _blob_scenes(16)
    with pytest.raises(TrainingFailedError, match="AP@0.5"):
        ToyDetector(image_size=(32, 32), grid=4, channels=(4,), epochs=1, min_ap=0.99).fit(X, y)


def test_toy_detector_input_validation():
    X, y = _blob_scenes(4)
    det = ToyDetector(image_size=(32, 32), grid=4, epochs=1, min_ap=0.0)
    with pytest.raises(ShapeMismatchError):
        det.fit(X, y[:3])
    with pytest.raises(ValueError):
        det.fit(X * 3, y)


def test_toy_detector_save_load(tmp_path, fitted_toy):
    fitted_toy.save(tmp_path / "det.pt", extra={"seed": 0})
    back = ToyDetector.load(tmp_path / "det.pt")
    X, _ = _blob_scenes(4, seed=2)
    a, b = fitted_toy.forward(torch.as_tensor(X)), back.forward(torch.as_tensor(X))
    assert all(torch.equal(u, v) for u, v in zip(a, b))
    assert back.meta_ == {"seed": 0}
