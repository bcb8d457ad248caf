"""Detections, the toy grid detector, and the attack-side losses.

Boxes are ``(x1, y1, x2, y2)`` in pixels. The car class is index 0 of the
detector's two per-class sigmoid scores ``(car, background)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torchvision.ops import nms

from .exceptions import ShapeMismatchError, TrainingFailedError
from .validation import check_boxes, check_images

logger = logging.getLogger(__name__)

CAR = 0
LOG_EPS = 1e-6
CHECKPOINT_FORMAT = "uvcamo-detector"
CHECKPOINT_VERSION = 1


@dataclass
class DetectionSet:
    """Detections for one image.

    Attributes:
        boxes: (N, 4) tensor.
        objectness: (N,) tensor in [0, 1].
        class_conf: (N, 2) tensor in [0, 1]; column ``CAR`` is the car score.
    """

    boxes: torch.Tensor
    objectness: torch.Tensor
    class_conf: torch.Tensor

    def __post_init__(self):
        if isinstance(self.boxes, (list, tuple)):
            self.boxes = np.asarray(self.boxes, dtype=np.float64)
        self.boxes = torch.as_tensor(self.boxes, dtype=torch.float64).reshape(-1, 4)
        self.objectness = torch.as_tensor(self.objectness, dtype=self.boxes.dtype).reshape(-1)
        self.class_conf = torch.as_tensor(self.class_conf, dtype=self.boxes.dtype)
        if self.class_conf.ndim != 2 or len(self.class_conf) != len(self.boxes):
            self.class_conf = self.class_conf.reshape(len(self.boxes), 2)
        if len(self.objectness) != len(self.boxes):
            raise ShapeMismatchError("objectness and boxes disagree in length")

    def __len__(self):
        return len(self.boxes)

    @property
    def confidence(self) -> torch.Tensor:
        """Ranking score: car confidence times objectness."""
        return self.class_conf[:, CAR] * self.objectness

    @classmethod
    def empty(cls):
        return cls(torch.zeros(0, 4), torch.zeros(0), torch.zeros(0, 2))


# --------------------------------------------------------------------------- #
# Losses
# --------------------------------------------------------------------------- #

def iou(a, b):
    """Elementwise (broadcast) IoU of boxes ``(..., 4)``; zero-area boxes give 0."""
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    if not a.is_floating_point():
        a = a.double()
    b = b.to(a.dtype)
    ix = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    iy = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = ix * iy
    area_a = (a[..., 2] - a[..., 0]).clamp(min=0) * (a[..., 3] - a[..., 1]).clamp(min=0)
    area_b = (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)
    union = area_a + area_b - inter
    safe = torch.where(union > 0, union, torch.ones_like(union))
    return torch.where(union > 0, inter / safe, torch.zeros_like(inter))


def detection_score(dets: DetectionSet, gt) -> torch.Tensor:
    """Per-box ``IoU(box, gt) * car_conf * objectness``."""
    if len(dets) == 0:
        return dets.objectness.new_zeros(0)
    gt = torch.as_tensor(gt, dtype=dets.boxes.dtype)
    return iou(dets.boxes, gt) * dets.class_conf[:, CAR] * dets.objectness


def attack_loss(dets: DetectionSet, gt) -> torch.Tensor:
    """``-log(1 - max H_d)``; zero when there are no detections."""
    scores = detection_score(dets, gt)
    if scores.numel() == 0:
        return torch.zeros((), dtype=dets.boxes.dtype)
    return -torch.log1p(-scores.max().clamp(max=1.0 - LOG_EPS))


def batch_detection_scores(boxes, objectness, class_conf, gt):
    """Batched scores: boxes (B, N, 4), objectness (B, N), class_conf (B, N, 2), gt (B, 4)."""
    return iou(boxes, gt[:, None, :]) * class_conf[..., CAR] * objectness


def batch_attack_loss(boxes, objectness, class_conf, gt):
    """(B,) attack losses, one per image."""
    scores = batch_detection_scores(boxes, objectness, class_conf, gt)
    if scores.shape[1] == 0:
        return scores.new_zeros(scores.shape[0])
    return -torch.log1p(-scores.max(dim=1).values.clamp(max=1.0 - LOG_EPS))


def batch_center_cell_loss(boxes, objectness, class_conf, gt, grid_shape, image_size):
    """FCA-style variant: only the grid cell holding the ground-truth center is attacked."""
    rows, cols = grid_shape
    h, w = image_size
    cx = (gt[:, 0] + gt[:, 2]) / 2
    cy = (gt[:, 1] + gt[:, 3]) / 2
    col = torch.clamp((cx / (w / cols)).long(), 0, cols - 1)
    row = torch.clamp((cy / (h / rows)).long(), 0, rows - 1)
    cell = row * cols + col
    scores = batch_detection_scores(boxes, objectness, class_conf, gt)
    picked = scores.gather(1, cell[:, None])[:, 0]
    return -torch.log1p(-picked.clamp(max=1.0 - LOG_EPS))


def smooth_loss(x) -> torch.Tensor:
    """Sum of squared differences between vertical and horizontal neighbours.

    ``x`` is (H, W), (H, W, C), or batched (B, H, W, C); batched input gives (B,).
    """
    x = torch.as_tensor(x)
    if not x.is_floating_point():
        x = x.double()
    if x.ndim == 2:
        x = x[..., None]
    dv = (x[..., :-1, :, :] - x[..., 1:, :, :]).pow(2).sum(dim=(-3, -2, -1))
    dh = (x[..., :, :-1, :] - x[..., :, 1:, :]).pow(2).sum(dim=(-3, -2, -1))
    return dv + dh


def total_loss(l_atk, l_sm, alpha=1.0, beta=0.0001):
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    return alpha * l_atk + beta * l_sm


# --------------------------------------------------------------------------- #
# Toy grid detector
# --------------------------------------------------------------------------- #

class GridDetectorNet(nn.Module):
    """YOLO-style single-scale detector: one box per cell of an S x S grid.

    Per cell the head emits ``(tx, ty, tw, th, objectness, car, background)`` logits.
    """

    def __init__(self, image_size=(64, 64), grid=8, channels=(16, 32, 64)):
        super().__init__()
        h, w = image_size
        n_down = int(round(math.log2(h / grid)))
        if h % grid or w % grid or 2 ** n_down != h // grid or h // grid != w // grid:
            raise ValueError(f"image size {image_size} must be grid * 2**k for grid {grid}")
        self.image_size = tuple(image_size)
        self.grid = grid
        layers = [nn.Conv2d(3, channels[0], 3, padding=1), nn.LeakyReLU(0.1)]
        cin = channels[0]
        for k in range(n_down):
            cout = channels[min(k + 1, len(channels) - 1)]
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.LeakyReLU(0.1)]
            cin = cout
        layers += [nn.Conv2d(cin, cin, 3, padding=1), nn.LeakyReLU(0.1),
                   nn.Conv2d(cin, cin, 3, padding=2, dilation=2), nn.LeakyReLU(0.1)]
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, 7, 1)

    def forward(self, images):
        """(B, H, W, 3) images in [0, 1] -> (B, S, S, 7) raw logits."""
        return self.head(self.body(images.permute(0, 3, 1, 2))).permute(0, 2, 3, 1)

    def decode(self, raw):
        """Raw logits -> boxes (B, S*S, 4), objectness (B, S*S), class_conf (B, S*S, 2)."""
        b, s = raw.shape[0], self.grid
        h, w = self.image_size
        rows = torch.arange(s, dtype=raw.dtype).view(1, s, 1)
        cols = torch.arange(s, dtype=raw.dtype).view(1, 1, s)
        cx = (cols + torch.sigmoid(raw[..., 0])) * (w / s)
        cy = (rows + torch.sigmoid(raw[..., 1])) * (h / s)
        bw = torch.sigmoid(raw[..., 2]) * w
        bh = torch.sigmoid(raw[..., 3]) * h
        boxes = torch.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], dim=-1)
        return (boxes.reshape(b, s * s, 4), torch.sigmoid(raw[..., 4]).reshape(b, s * s),
                torch.sigmoid(raw[..., 5:7]).reshape(b, s * s, 2))


def detector_forward(net: GridDetectorNet, images):
    """Differentiable forward: (B, H, W, 3) -> (boxes, objectness, class_conf), no NMS."""
    images = torch.as_tensor(images)
    if images.ndim == 3:
        images = images[None]
    if tuple(images.shape[1:3]) != net.image_size or images.shape[-1] != 3:
        raise ShapeMismatchError(
            f"detector expects (B, {net.image_size[0]}, {net.image_size[1]}, 3), got {tuple(images.shape)}"
        )
    return net.decode(net(images))


def toy_detector_forward(net: GridDetectorNet, image) -> DetectionSet:
    """All S*S decoded boxes for a single (H, W, 3) image."""
    boxes, obj, cls = detector_forward(net, image)
    return DetectionSet(boxes[0], obj[0], cls[0])


def nms_filter(dets: DetectionSet, iou_threshold=0.5, conf_floor=0.05) -> DetectionSet:
    """Evaluation view: drop low-confidence boxes, then greedy NMS on confidence."""
    conf = dets.confidence
    keep = conf >= conf_floor
    boxes, conf = dets.boxes[keep], conf[keep]
    if len(boxes) == 0:
        return DetectionSet.empty()
    order = nms(boxes.double(), conf.double(), iou_threshold)
    idx = torch.nonzero(keep)[:, 0][order]
    return DetectionSet(dets.boxes[idx], dets.objectness[idx], dets.class_conf[idx])


class ToyDetector(BaseEstimator):
    """Trainable stand-in for a white-box single-stage detector.

    ``fit`` learns from benign scenes with one car each, then refuses to return
    unless held-out AP@0.5 reaches ``min_ap``. After fitting the weights are frozen.
    """

    def __init__(self, image_size=(64, 64), grid=8, channels=(16, 32, 64), learning_rate=0.002,
                 epochs=30, batch_size=32, min_ap=0.9, nms_iou=0.5, conf_floor=0.05,
                 flip_augment=True, random_state=0):
        self.image_size = image_size
        self.grid = grid
        self.channels = channels
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.min_ap = min_ap
        self.nms_iou = nms_iou
        self.conf_floor = conf_floor
        self.flip_augment = flip_augment
        self.random_state = random_state

    def _make_net(self):
        torch.manual_seed(self.random_state)
        return GridDetectorNet(self.image_size, self.grid, self.channels)

    def fit(self, X, y, eval_set=None):
        """Train on images ``X`` (N, H, W, 3) with boxes ``y`` (N, 4).

        Args:
            eval_set: optional (images, boxes) used for the AP gate; defaults to the
                training data.

        Raises:
            TrainingFailedError: held-out AP@0.5 stays below ``min_ap``.
        """
        from .eval_report import ap_at_05

        X = check_images(X, self.image_size)
        if len(X) == 0:
            raise ValueError("detector training set is empty")
        X = torch.as_tensor(X)
        y = torch.as_tensor(check_boxes(y, len(X), self.image_size), dtype=torch.float32)
        net = self._make_net()
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=self.epochs)
        gen = torch.Generator().manual_seed(self.random_state)
        n = len(X)
        self.history_ = []
        for epoch in range(self.epochs):
            net.train()
            order = torch.randperm(n, generator=gen)
            running = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                images, boxes = X[idx], y[idx]
                if self.flip_augment:
                    flip = torch.rand(len(idx), generator=gen) < 0.5
                    images = torch.where(flip[:, None, None, None], images.flip(2), images)
                    w = self.image_size[1]
                    flipped = torch.stack([w - boxes[:, 2], boxes[:, 1], w - boxes[:, 0], boxes[:, 3]], 1)
                    boxes = torch.where(flip[:, None], flipped, boxes)
                loss = self._train_loss(net, images, boxes)
                opt.zero_grad()
                loss.backward()
                opt.step()
                running += loss.item() * len(idx)
            sched.step()
            self.history_.append({"epoch": epoch + 1, "loss": running / n})
            logger.info("detector epoch %d loss %.4f", epoch + 1, running / n)

        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self.net_ = net
        ev_x, ev_y = eval_set if eval_set is not None else (X, y)
        self.eval_ap_ = ap_at_05(self.predict(ev_x), np.asarray(ev_y))
        if self.eval_ap_ < self.min_ap:
            raise TrainingFailedError(
                f"detector reached AP@0.5 {self.eval_ap_:.3f} < required {self.min_ap:.2f} "
                f"after {self.epochs} epochs"
            )
        return self

    def _train_loss(self, net, images, gt):
        raw = net(images)
        boxes, obj, cls = net.decode(raw)
        b, s = len(images), self.grid
        h, w = self.image_size
        cx, cy = (gt[:, 0] + gt[:, 2]) / 2, (gt[:, 1] + gt[:, 3]) / 2
        col = torch.clamp((cx / (w / s)).long(), 0, s - 1)
        row = torch.clamp((cy / (h / s)).long(), 0, s - 1)
        cell = row * s + col
        ar = torch.arange(b)

        with torch.no_grad():
            overlap = iou(boxes, gt[:, None, :])
        obj_target = torch.zeros_like(obj)
        obj_target[ar, cell] = 1.0
        obj_weight = torch.where(overlap > 0.5, torch.zeros_like(obj), torch.ones_like(obj))
        obj_weight[ar, cell] = 1.0
        obj_loss = (F.binary_cross_entropy(obj, obj_target, reduction="none") * obj_weight).sum() / b

        cls_target = torch.tensor([1.0, 0.0]).expand(b, 2)
        cls_loss = F.binary_cross_entropy(cls[ar, cell], cls_target, reduction="sum") / b

        pred = boxes[ar, cell]
        scale = torch.tensor([w, h, w, h], dtype=pred.dtype)
        box_loss = (F.l1_loss(pred / scale, gt / scale, reduction="sum")
                    + (1.0 - iou(pred, gt)).sum()) / b
        return obj_loss + cls_loss + 5.0 * box_loss

    @torch.no_grad()
    def predict(self, X, batch_size=256):
        """NMS-filtered ``DetectionSet`` per image."""
        check_is_fitted(self, "net_")
        X = torch.as_tensor(check_images(X, self.image_size))
        out = []
        for start in range(0, len(X), batch_size):
            boxes, obj, cls = detector_forward(self.net_, X[start:start + batch_size])
            for i in range(len(boxes)):
                out.append(nms_filter(DetectionSet(boxes[i], obj[i], cls[i]), self.nms_iou, self.conf_floor))
        return out

    def forward(self, images):
        """Differentiable, un-filtered forward for the loss path."""
        check_is_fitted(self, "net_")
        return detector_forward(self.net_, images)

    def score(self, X, y):
        from .eval_report import ap_at_05

        return ap_at_05(self.predict(X), np.asarray(y))

    # persistence -------------------------------------------------------------

    def save(self, path, extra=None):
        check_is_fitted(self, "net_")
        params = {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()}
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "architecture": {"grid": self.grid, "channels": list(self.channels),
                             "image_size": list(self.image_size), "outputs": 7},
            "params": params,
            "state_dict": self.net_.state_dict(),
            "eval_ap": float(getattr(self, "eval_ap_", float("nan"))),
            "history": self.history_,
            "meta": extra or {},
        }, path)

    @classmethod
    def load(cls, path):
        ckpt = torch.load(path, weights_only=True)
        if ckpt.get("format") != CHECKPOINT_FORMAT or ckpt.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a detector checkpoint of version {CHECKPOINT_VERSION}")
        params = ckpt["params"]
        params["image_size"] = tuple(params["image_size"])
        params["channels"] = tuple(params["channels"])
        est = cls(**params)
        net = GridDetectorNet(est.image_size, est.grid, est.channels)
        net.load_state_dict(ckpt["state_dict"])
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        est.net_ = net
        est.eval_ap_ = ckpt.get("eval_ap")
        est.history_ = ckpt.get("history", [])
        est.meta_ = ckpt.get("meta", {})
        return est
