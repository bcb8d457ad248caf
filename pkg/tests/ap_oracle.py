"""Brute-force AP reference shared by the unit and acceptance tests."""
from fractions import Fraction

import numpy as np

from uvcamo.detect_loss import DetectionSet


def _iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def threshold_oracle_ap(detections, gts):
    """Brute force: enumerate every confidence cut-off, then integrate the
    monotone precision envelope over recall in exact rationals."""
    flat = [(float(c), i, _iou(list(map(float, b)), list(gts[i])) >= 0.5)
            for i, d in enumerate(detections)
            for c, b in zip(d.confidence.numpy(), d.boxes.numpy())]
    n = len(gts)
    points = []
    for tau in sorted({c for c, _, _ in flat}, reverse=True):
        kept = [(i, hit) for c, i, hit in flat if c >= tau]
        tp = len({i for i, hit in kept if hit})
        points.append((Fraction(tp, n), Fraction(tp, len(kept))))
    ap, prev = Fraction(0), Fraction(0)
    for r in sorted({r for r, _ in points}):
        if r == 0:
            continue
        best = max(p for rr, p in points if rr >= r)
        ap += (r - prev) * best
        prev = r
    return float(ap)


def random_instance(rng, n_images):
    gts, dets = [], []
    for _ in range(n_images):
        x, y = rng.uniform(0, 40, size=2)
        gt = [x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20)]
        gts.append(gt)
        k = int(rng.integers(0, 5))
        boxes = []
        for _ in range(k):
            jitter = rng.normal(scale=rng.choice([1.0, 6.0]), size=4)
            b = np.array(gt) + jitter
            b[2:] = np.maximum(b[2:], b[:2] + 1)
            boxes.append(b)
        # coarse confidences make ties common
        conf = rng.choice([0.2, 0.4, 0.6, 0.8, 1.0], size=k) if rng.uniform() < 0.5 else rng.uniform(size=k)
        dets.append(DetectionSet(np.array(boxes).reshape(-1, 4), np.ones(k), np.stack([conf, 1 - conf], 1)))
    return dets, np.array(gts)
