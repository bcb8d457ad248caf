"""Built-in gradient and loss-oracle checks, run by ``uvcamo selftest``.

Each check returns a :class:`CheckResult`; the test suite calls the same
functions so the CLI and pytest agree on what "passing" means.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .detect_loss import (
    DetectionSet, GridDetectorNet, attack_loss, detection_score, detector_forward, iou, smooth_loss,
    total_loss, batch_attack_loss,
)
from .environment import EnvFeatureNet, EnvFeatureMaps, area_weight, efe_forward, efe_loss, fuse
from .mesh_render import (
    CameraPose, TextureMap, bilinear_taps, make_car_mesh, rasterize, rasterize_fragments, sample_texture,
    texture_gradient,
)
from .optimize import composite


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


# --------------------------------------------------------------------------- #
# Finite-difference checks
# --------------------------------------------------------------------------- #

def central_difference(f, x: np.ndarray, step: float, indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` for every entry (or ``indices``)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def rasterizer_gradient_error(seed=0, texture_size=(8, 8), image_size=(16, 16), step=1e-3):
    """Max abs error between the rasterizer's texture gradient and central differences."""
    rng = np.random.default_rng(seed)
    mesh = make_car_mesh(texture_size=16)
    pose = CameraPose(azimuth=35.0, elevation=25.0, distance=6.0)
    texture = TextureMap(rng.uniform(0.1, 0.9, size=(*texture_size, 3)))
    upstream = rng.normal(size=(*image_size, 3))
    analytic = texture_gradient(mesh, texture, pose, image_size, upstream)

    def f(texels):
        return float((rasterize(mesh, TextureMap(texels), pose, image_size).color * upstream).sum())

    numeric = central_difference(f, texture.texels, step)
    return float(np.abs(analytic - numeric).max())


def micro_instance(seed=0, texture_size=(8, 8), image_size=(32, 32)):
    """A float64 end-to-end pipeline small enough for exhaustive finite differences.

    Returns ``(loss_fn, texels0)`` where ``loss_fn(texels_tensor)`` is the total loss
    (attack + smoothness) of one composited scene under a random extractor and detector.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    mesh = make_car_mesh(texture_size=16)
    pose = CameraPose(azimuth=30.0, elevation=20.0, distance=7.0)
    frags = rasterize_fragments(mesh, pose, image_size)
    taps = bilinear_taps(frags, texture_size, dtype=torch.float64)
    sil = torch.as_tensor(frags.silhouette, dtype=torch.float64)
    mask = 1.0 - sil
    background = torch.as_tensor(rng.uniform(0, 1, size=(*image_size, 3))) * mask[..., None]
    x_ref = torch.as_tensor(rng.uniform(0.2, 0.8, size=(*image_size, 3))) * sil[..., None]

    efe = EnvFeatureNet(channels=(4, 8)).double().eval()
    detector = GridDetectorNet(image_size, grid=4, channels=(4, 8)).double().eval()
    for p in list(efe.parameters()) + list(detector.parameters()):
        p.requires_grad_(False)
    with torch.no_grad():
        ef = efe_forward(efe, x_ref)
    ys, xs = np.nonzero(frags.silhouette)
    gt = torch.tensor([[xs.min(), ys.min(), xs.max() + 1, ys.max() + 1]], dtype=torch.float64)

    def loss_fn(texels):
        x_nr = sample_texture(texels, taps)
        x_ren = fuse(x_nr, ef, sil)
        i_out = composite(x_ren, background, mask)
        boxes, obj, cls = detector_forward(detector, i_out)
        l_atk = batch_attack_loss(boxes, obj, cls, gt)[0]
        return total_loss(l_atk, smooth_loss(x_ren), 1.0, 1e-4)

    def saturated(texels):
        """Texels that feed a pixel whose fused value sits on the [0, 1] clamp."""
        with torch.no_grad():
            raw = sample_texture(texels, taps) * ef.mul_map + ef.add_map
            bad_pixels = ((raw <= 0) | (raw >= 1)).any(-1).reshape(-1)
        flagged = np.zeros(texture_size, dtype=bool)
        hit = bad_pixels[taps.pixel_index].numpy()
        for k in range(4):
            idx = taps.texel_index[hit, k].numpy()
            flagged.reshape(-1)[idx[taps.weight[hit, k].numpy() > 0]] = True
        return flagged

    texels0 = rng.uniform(0.05, 0.95, size=(*texture_size, 3))
    return loss_fn, texels0, saturated


def pipeline_gradient_error(seed=0, step=1e-6, floor=1e-3):
    """Max relative error of d(total loss)/d(texture) against central differences.

    Relative error is ``|g - fd| / max(|fd|, floor * max|fd|)``; texels feeding a
    clamp-saturated pixel are excluded.
    """
    loss_fn, texels0, saturated = micro_instance(seed)
    t = torch.tensor(texels0, requires_grad=True)
    loss_fn(t).backward()
    analytic = t.grad.numpy()

    def f(x):
        with torch.no_grad():
            return float(loss_fn(torch.as_tensor(x)))

    numeric = central_difference(f, texels0, step)
    keep = ~np.broadcast_to(saturated(torch.as_tensor(texels0))[..., None], numeric.shape)
    scale = max(np.abs(numeric).max(), 1e-300)
    denom = np.maximum(np.abs(numeric), floor * scale)
    rel = np.abs(analytic - numeric) / denom
    return float(rel[keep].max()), int(keep.sum())


def detector_gradient_error(seed=0, step=1e-6):
    """Relative error of d(attack loss)/d(image) for the toy detector on a 32x32 input."""
    torch.manual_seed(seed)
    net = GridDetectorNet((32, 32), grid=4, channels=(4, 8)).double().eval()
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.2, 0.8, size=(1, 32, 32, 3))
    gt = torch.tensor([[6.0, 8.0, 26.0, 22.0]], dtype=torch.float64)

    def loss(x):
        boxes, obj, cls = detector_forward(net, x)
        return batch_attack_loss(boxes, obj, cls, gt)[0]

    x = torch.tensor(img, requires_grad=True)
    loss(x).backward()
    analytic = x.grad.numpy()
    idx = rng.choice(img.size, size=64, replace=False)

    def f(v):
        with torch.no_grad():
            return float(loss(torch.as_tensor(v)))

    numeric = central_difference(f, img, step, indices=idx)
    a, n = analytic.reshape(-1)[idx], numeric.reshape(-1)[idx]
    return float(np.abs(a - n).max() / np.abs(n).max())


# --------------------------------------------------------------------------- #
# Loss oracles
# --------------------------------------------------------------------------- #

def loss_oracle_cases():
    """(name, computed, expected) for every worked loss example."""
    cases = [
        ("iou unit squares offset by one", float(iou([0, 0, 2, 2], [1, 1, 3, 3])), 1 / 7),
        ("detection score 0.5*0.8*0.9",  # (0,0,2,2) vs (0,0,2,1) has IoU exactly 0.5
         float(detection_score(DetectionSet([[0, 0, 2, 2]], [0.9], [[0.8, 0.2]]), [0, 0, 2, 1])[0]),
         0.36),
        ("attack loss at max score 0.5",
         float(attack_loss(DetectionSet([[0, 0, 2, 2]], [1.0], [[0.5, 0.5]]), [0, 0, 2, 2])),
         -math.log(0.5)),
        ("attack loss at max score 0.36",
         float(attack_loss(DetectionSet([[0, 0, 2, 2], [5, 5, 6, 6]], [0.9, 0.3], [[0.8, 0.2], [0.9, 0.1]]),
                           [0, 0, 2, 1])),
         -math.log(0.64)),
        ("attack loss with no boxes", float(attack_loss(DetectionSet.empty(), [0, 0, 2, 2])), 0.0),
        ("smooth loss 1x2", float(smooth_loss(torch.tensor([[0.0, 1.0]]))), 1.0),
        ("smooth loss 2x2", float(smooth_loss(torch.tensor([[0.0, 1.0], [0.0, 1.0]]))), 2.0),
        ("area weight 10x10 with 25 pixels", float(area_weight(25, (10, 10))), 4.0),
        ("efe loss single pixel",
         float(efe_loss(torch.tensor([[[0.5]]]), torch.tensor([[[1.0]]]), 1, (1, 1))), -math.log(0.5)),
        ("total loss defaults", float(total_loss(0.5, 100.0)), 0.51),
        ("fuse 0.5*0.4+0.1",
         float(fuse(torch.full((1, 1, 3), 0.5),
                    EnvFeatureMaps(torch.full((1, 1, 3), 0.4), torch.full((1, 1, 3), 0.1)),
                    torch.ones(1, 1))[0, 0, 0]),
         0.3),
    ]
    return cases


def check_loss_oracles(tol=1e-6):
    results = []
    for name, got, want in loss_oracle_cases():
        results.append(CheckResult(f"oracle: {name}", abs(got - want) <= tol, f"got {got:.9f}, want {want:.9f}"))
    return results


def run_checks():
    results = []
    t = time.perf_counter()
    err = rasterizer_gradient_error()
    results.append(CheckResult("rasterizer texture gradient vs finite differences", err < 1e-4,
                               f"max abs error {err:.2e} (< 1e-4)"))
    err, n = pipeline_gradient_error()
    results.append(CheckResult("end-to-end texture gradient vs finite differences", err < 1e-2,
                               f"max relative error {err:.2e} over {n} texel channels (< 1e-2)"))
    err = detector_gradient_error()
    results.append(CheckResult("detector image gradient vs finite differences", err < 1e-3,
                               f"relative error {err:.2e} (< 1e-3)"))
    results.extend(check_loss_oracles())
    results.append(CheckResult("runtime", True, f"{time.perf_counter() - t:.1f} s"))
    return results


def run_selftest(verbose=True) -> bool:
    results = run_checks()
    if verbose:
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
        print("selftest", "passed" if all(r.passed for r in results) else "FAILED")
    return all(r.passed for r in results)
