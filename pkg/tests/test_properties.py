import numpy as np
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from uvcamo.dataset import gt_box_from_mask, split_fg_bg
from uvcamo.detect_loss import DetectionSet, attack_loss, iou, smooth_loss
from uvcamo.environment import EnvFeatureMaps, fuse
from uvcamo.eval_report import ap_at_05
from uvcamo.optimize import composite

coord = st.floats(0, 50, allow_nan=False)


@st.composite
def boxes(draw):
    x, y = draw(coord), draw(coord)
    return [x, y, x + draw(st.floats(0.5, 30)), y + draw(st.floats(0.5, 30))]


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    ab, ba = float(iou(a, b)), float(iou(b, a))
    assert ab == ba
    assert 0.0 <= ab <= 1.0 + 1e-12


@given(boxes())
def test_iou_self_is_one(a):
    assert abs(float(iou(a, a)) - 1.0) < 1e-12


@given(st.lists(st.floats(0, 1), min_size=1, max_size=6))
def test_attack_loss_depends_only_on_max_score(scores):
    n = len(scores)
    dets = DetectionSet([[0, 0, 1, 1]] * n, [1.0] * n, [[s, 0] for s in scores])
    expected = -np.log1p(-min(max(scores), 1 - 1e-6))
    assert abs(float(attack_loss(dets, [0, 0, 1, 1])) - expected) < 1e-9
    assert float(attack_loss(dets, [0, 0, 1, 1])) >= 0


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(3)), elements=st.floats(0, 1)),
       st.floats(-1, 1))
def test_smooth_loss_nonnegative_and_shift_invariant(x, c):
    a = float(smooth_loss(torch.as_tensor(x)))
    b = float(smooth_loss(torch.as_tensor(x + c)))
    assert a >= 0
    assert abs(a - b) <= 1e-9 * max(1.0, a)


@given(arrays(np.float64, (4, 5, 3), elements=st.floats(0, 1)),
       arrays(np.int64, (4, 5), elements=st.integers(0, 1)))
def test_fuse_identity_and_split_identity(x, mask):
    sil = torch.as_tensor(1 - mask, dtype=torch.float64)
    ef = EnvFeatureMaps(torch.ones(4, 5, 3, dtype=torch.float64), torch.zeros(4, 5, 3, dtype=torch.float64))
    assert torch.equal(fuse(torch.as_tensor(x), ef, sil), torch.as_tensor(x) * sil[..., None])
    x_ref, b = split_fg_bg(x, mask)
    assert np.array_equal(x_ref + b, x)
    out = composite(torch.as_tensor(x_ref), torch.as_tensor(b), torch.as_tensor(mask, dtype=torch.float64))
    assert np.array_equal(out.numpy(), x)


@given(arrays(np.int64, (6, 7), elements=st.integers(0, 1)).filter(lambda m: (m == 0).any()))
def test_gt_box_contains_every_vehicle_pixel(m):
    x1, y1, x2, y2 = gt_box_from_mask(m)
    rows, cols = np.nonzero(m == 0)
    assert rows.min() == y1 and rows.max() == y2 - 1 and cols.min() == x1 and cols.max() == x2 - 1


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=12))
def test_ap_bounded(items):
    gt = [0, 0, 10, 10]
    dets = [DetectionSet([gt if hit else [20, 20, 30, 30]], [1.0], [[c, 0]]) for c, hit in items]
    ap = ap_at_05(dets, np.array([gt] * len(items), float))
    assert 0.0 <= ap <= 1.0
    if all(hit for _, hit in items):
        assert ap == 1.0
