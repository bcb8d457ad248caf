"""Camouflage generation: render -> fuse -> composite -> detect -> loss -> texture step."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dataset import FragmentCache, SceneBatch
from .detect_loss import (
    batch_attack_loss, batch_center_cell_loss, batch_detection_scores, smooth_loss, total_loss,
)
from .environment import EnvFeatureMaps, fuse
from .exceptions import NonFiniteLossError, ShapeMismatchError
from .mesh_render import BilinearTaps, TextureMap, bilinear_taps, sample_texture, save_texture

logger = logging.getLogger(__name__)

LOSSES = ("all-boxes", "center-cell")


def composite(x_ren, b, m):
    """Paste the rendered vehicle onto its background: ``x_ren * (1 - m) + b``."""
    x_ren, b = torch.as_tensor(x_ren), torch.as_tensor(b)
    m = torch.as_tensor(m, dtype=x_ren.dtype)
    if m.ndim == x_ren.ndim - 1:
        m = m[..., None]
    if x_ren.shape != b.shape or m.shape[:-1] != x_ren.shape[:-1]:
        raise ShapeMismatchError(
            f"composite shapes disagree: x_ren {tuple(x_ren.shape)}, b {tuple(b.shape)}, m {tuple(m.shape)}"
        )
    return x_ren * (1 - m) + b


@dataclass
class CamoScenes:
    """Texture-independent per-sample state, precomputed once.

    The extractor and the rasterizer geometry are frozen, so fusion maps and
    bilinear taps do not change while the texture is optimized.
    """

    ids: list
    taps: list            # BilinearTaps per sample
    silhouette: torch.Tensor  # (N, H, W)
    mask: torch.Tensor        # (N, H, W), 1 on background
    background: torch.Tensor  # (N, H, W, 3)
    mul_map: torch.Tensor     # (N, H, W, 3)
    add_map: torch.Tensor     # (N, H, W, 3)
    gt: torch.Tensor          # (N, 4)

    def __len__(self):
        return len(self.ids)

    def to(self, dtype):
        return CamoScenes(
            ids=self.ids,
            taps=[BilinearTaps(t.pixel_index, t.texel_index, t.weight.to(dtype), t.image_size, t.texture_size)
                  for t in self.taps],
            silhouette=self.silhouette.to(dtype), mask=self.mask.to(dtype),
            background=self.background.to(dtype), mul_map=self.mul_map.to(dtype),
            add_map=self.add_map.to(dtype), gt=self.gt.to(dtype),
        )


def prepare_scenes(batch: SceneBatch, cache: FragmentCache, extractor, texture_size=(64, 64)) -> CamoScenes:
    """Split scenes into foreground/background, run the frozen extractor, cache texture taps."""
    x_ref, backgrounds = batch.fg_bg()
    ef = extractor.feature_maps(x_ref.astype(np.float32))
    taps = []
    for i, pose in enumerate(batch.poses):
        frags = cache(pose)
        if not np.array_equal(frags.silhouette, 1.0 - batch.masks[i]):
            raise ShapeMismatchError(f"sample {batch.ids[i]}: stored mask disagrees with rasterizer")
        taps.append(bilinear_taps(frags, texture_size, dtype=torch.float32))
    return CamoScenes(
        ids=list(batch.ids),
        taps=taps,
        silhouette=torch.as_tensor(1.0 - batch.masks, dtype=torch.float32),
        mask=torch.as_tensor(batch.masks, dtype=torch.float32),
        background=torch.as_tensor(backgrounds, dtype=torch.float32),
        mul_map=ef.mul_map.float(),
        add_map=ef.add_map.float(),
        gt=torch.as_tensor(batch.boxes, dtype=torch.float32),
    )


def render_scenes(texels: torch.Tensor, scenes: CamoScenes, idx):
    """Environment-fused vehicles ``x_ren`` and composited scenes ``i_out`` for ``idx``."""
    idx = list(idx)
    x_nr = torch.stack([sample_texture(texels, scenes.taps[i]) for i in idx])
    ef = EnvFeatureMaps(scenes.mul_map[idx], scenes.add_map[idx])
    x_ren = fuse(x_nr, ef, scenes.silhouette[idx])
    i_out = composite(x_ren, scenes.background[idx], scenes.mask[idx])
    return x_ren, i_out


def camouflage_loss(texels, scenes: CamoScenes, idx, detector_net, alpha=1.0, beta=0.0001,
                    loss="all-boxes"):
    """Batch-mean total loss and its parts for the samples ``idx``.

    Returns:
        dict with ``total`` (scalar tensor) and per-sample ``l_atk``, ``l_sm``, ``max_hd``.
    """
    from .detect_loss import detector_forward

    idx = list(idx)
    x_ren, i_out = render_scenes(texels, scenes, idx)
    boxes, obj, cls = detector_forward(detector_net, i_out)
    gt = scenes.gt[idx].to(boxes.dtype)
    if loss == "all-boxes":
        l_atk = batch_attack_loss(boxes, obj, cls, gt)
    elif loss == "center-cell":
        l_atk = batch_center_cell_loss(boxes, obj, cls, gt, (detector_net.grid, detector_net.grid),
                                       detector_net.image_size)
    else:
        raise ValueError(f"unknown loss '{loss}'; choose from {LOSSES}")
    l_sm = smooth_loss(x_ren)
    per_sample = total_loss(l_atk, l_sm, alpha, beta)
    with torch.no_grad():
        max_hd = batch_detection_scores(boxes, obj, cls, gt).max(dim=1).values
    return {"total": per_sample.mean(), "per_sample": per_sample, "l_atk": l_atk, "l_sm": l_sm,
            "max_hd": max_hd}


class CamouflageGenerator(BaseEstimator):
    """Optimizes a UV texture so the frozen detector misses the car.

    Parameters:
        learning_rate, epochs, batch_size: Adam schedule over the texgen scenes.
        alpha, beta: weights of the attack and smoothness terms.
        loss: ``"all-boxes"`` (max detection score over every box) or
            ``"center-cell"`` (only the box of the cell holding the gt center).
        texture_size: (H_t, W_t) of the UV map.
        random_state: seeds the texture initialization and batch order.
        checkpoint_dir: if set, the texture is written there after every epoch.
    """

    def __init__(self, learning_rate=0.01, epochs=5, batch_size=8, alpha=1.0, beta=0.0001,
                 loss="all-boxes", texture_size=(64, 64), random_state=0, checkpoint_dir=None):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.alpha = alpha
        self.beta = beta
        self.loss = loss
        self.texture_size = texture_size
        self.random_state = random_state
        self.checkpoint_dir = checkpoint_dir

    def _validate(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss '{self.loss}'; choose from {LOSSES}")

    def initial_texture(self):
        gen = torch.Generator().manual_seed(self.random_state)
        return torch.rand(*self.texture_size, 3, generator=gen)

    def fit(self, scenes: CamoScenes, detector, y=None, max_steps=None):
        """Optimize the texture over ``scenes`` against the frozen ``detector``.

        ``detector`` is a fitted ``ToyDetector`` (or its network). ``max_steps``
        truncates the run, mostly for tests.
        """
        self._validate()
        if len(scenes) == 0:
            raise ValueError("no texgen scenes to optimize over")
        net = getattr(detector, "net_", detector)
        for p in net.parameters():
            p.requires_grad_(False)
        dtype = next(net.parameters()).dtype
        if scenes.background.dtype != dtype:
            scenes = scenes.to(dtype)

        texels = self.initial_texture().to(dtype).requires_grad_(True)
        opt = torch.optim.Adam([texels], lr=self.learning_rate)
        gen = torch.Generator().manual_seed(self.random_state + 1)
        self.trace_ = []
        step = 0
        n = len(scenes)
        for epoch in range(1, self.epochs + 1):
            order = torch.randperm(n, generator=gen).tolist()
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                out = camouflage_loss(texels, scenes, idx, net, self.alpha, self.beta, self.loss)
                if not torch.isfinite(out["total"]):
                    bad = [scenes.ids[i] for i, v in zip(idx, out["per_sample"]) if not torch.isfinite(v)]
                    record = {"epoch": epoch, "step": step, "samples": bad or [scenes.ids[i] for i in idx]}
                    raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step}: {record}", record)
                opt.zero_grad()
                out["total"].backward()
                opt.step()
                with torch.no_grad():
                    texels.clamp_(0.0, 1.0)
                self.trace_.append({
                    "epoch": epoch, "step": step,
                    "l_atk": out["l_atk"].detach().mean().item(), "l_sm": out["l_sm"].detach().mean().item(),
                    "l_total": out["total"].detach().item(), "max_hd": out["max_hd"].mean().item(),
                })
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            logger.info("camo epoch %d mean L_atk %.4f", epoch,
                        np.mean([r["l_atk"] for r in self.trace_ if r["epoch"] == epoch]))
            if self.checkpoint_dir is not None:
                Path(self.checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_texture(texels.detach().double().numpy(),
                             Path(self.checkpoint_dir) / f"texture_epoch{epoch}.png")
            if max_steps is not None and step >= max_steps:
                break
        self.texture_ = TextureMap(texels.detach().double().numpy())
        return self

    @torch.no_grad()
    def transform(self, scenes: CamoScenes):
        """Composite images of ``scenes`` painted with the learned texture, (N, H, W, 3)."""
        check_is_fitted(self, "texture_")
        texels = torch.as_tensor(self.texture_.texels, dtype=scenes.background.dtype)
        _, i_out = render_scenes(texels, scenes, range(len(scenes)))
        return i_out.numpy()

    def write_trace(self, path, metadata=None):
        check_is_fitted(self, "trace_")
        Path(path).write_text(json.dumps({"metadata": metadata or {}, "steps": self.trace_},
                                         sort_keys=True, indent=1) + "\n")


def trace_is_consistent(trace) -> bool:
    keys = [(r["epoch"], r["step"]) for r in trace]
    finite = all(math.isfinite(r[k]) for r in trace for k in ("l_atk", "l_sm", "l_total", "max_hd"))
    return keys == sorted(keys) and len({k[1] for k in keys}) == len(keys) and finite
