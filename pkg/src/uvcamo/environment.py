"""Environment path: analytic weather oracle, environment feature extractor, fusion.

The oracle plays the role of a photo-realistic simulator: Lambertian shading
under a sun direction plus exponential distance fog. The environment feature
extractor (EFE) is a small U-Net that looks at the masked photo of the white
car and predicts a multiplicative and an additive map; fusing them with the
textured rasterization gives the environment-aware vehicle image.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DegenerateSampleError, ShapeMismatchError
from .mesh_render import Fragments, RenderOutput

logger = logging.getLogger(__name__)

FOG_COLOR = 0.7
FOG_COEFF = 0.004  # per meter per density unit
DEFAULT_SUN_AZIMUTH = 45.0
BCE_EPS = 1e-6
CHECKPOINT_FORMAT = "uvcamo-efe"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class WeatherParams:
    sun_altitude: float
    fog_density: float

    def __post_init__(self):
        if not -90.0 <= self.sun_altitude <= 90.0:
            raise ValueError(f"sun_altitude must lie in [-90, 90], got {self.sun_altitude}")
        if not 0.0 <= self.fog_density <= 100.0:
            raise ValueError(f"fog_density must lie in [0, 100], got {self.fog_density}")

    def to_dict(self):
        return {"sun_altitude": self.sun_altitude, "fog_density": self.fog_density}

    @classmethod
    def from_dict(cls, d):
        return cls(d["sun_altitude"], d["fog_density"])


@dataclass
class EnvFeatureMaps:
    """Fusion maps, each (..., H, W, 3). ``mul_map`` >= 0, ``add_map`` in [0, 1]."""

    mul_map: torch.Tensor
    add_map: torch.Tensor


def sun_direction(altitude_deg: float, azimuth_deg: float = DEFAULT_SUN_AZIMUTH) -> np.ndarray:
    alt, az = math.radians(altitude_deg), math.radians(azimuth_deg)
    return np.array([math.cos(alt) * math.cos(az), math.cos(alt) * math.sin(az), math.sin(alt)])


def ambient_level(altitude_deg: float) -> float:
    return 0.15 + 0.35 * min(max(math.sin(math.radians(altitude_deg)), 0.0), 1.0)


def fog_transmittance(depth, fog_density):
    return np.exp(-np.asarray(depth) * fog_density * FOG_COEFF)


def env_oracle(render: RenderOutput | tuple, weather: WeatherParams,
               sun_azimuth: float = DEFAULT_SUN_AZIMUTH) -> np.ndarray:
    """Shade and fog a rasterized vehicle; zero outside the silhouette.

    Args:
        render: a ``RenderOutput``, or a ``(color, fragments)`` pair.
        weather: sun altitude and fog density.
        sun_azimuth: horizontal sun direction in degrees.
    """
    if isinstance(render, RenderOutput):
        color, fragments = render.color, render.fragments
    else:
        color, fragments = render
    color = np.asarray(color, dtype=np.float64)
    sil = fragments.face_index >= 0
    out = np.zeros_like(color)
    if not sil.any():
        return out
    s_hat = sun_direction(weather.sun_altitude, sun_azimuth)
    ambient = ambient_level(weather.sun_altitude)
    lambert = np.maximum(0.0, fragments.normal[sil] @ s_hat)
    shaded = color[sil] * (ambient + (1.0 - ambient) * lambert)[:, None]
    t = fog_transmittance(fragments.depth[sil], weather.fog_density)[:, None]
    out[sil] = shaded * t + FOG_COLOR * (1.0 - t)
    return out


def oracle_factors(fragments: Fragments, weather: WeatherParams,
                   sun_azimuth: float = DEFAULT_SUN_AZIMUTH):
    """The exact per-pixel (mul, add) pair the oracle applies, (H, W) each.

    Useful as a reference for what the extractor should learn; not used in training.
    """
    sil = fragments.face_index >= 0
    mul = np.zeros(fragments.image_size)
    add = np.zeros(fragments.image_size)
    s_hat = sun_direction(weather.sun_altitude, sun_azimuth)
    ambient = ambient_level(weather.sun_altitude)
    lambert = np.maximum(0.0, fragments.normal[sil] @ s_hat)
    t = fog_transmittance(fragments.depth[sil], weather.fog_density)
    mul[sil] = (ambient + (1.0 - ambient) * lambert) * t
    add[sil] = FOG_COLOR * (1.0 - t)
    return mul, add


# --------------------------------------------------------------------------- #
# Fusion and loss
# --------------------------------------------------------------------------- #

def fuse(x_nr, ef: EnvFeatureMaps, silhouette) -> torch.Tensor:
    """``clamp(x_nr * mul + add, 0, 1) * silhouette``; all inputs (..., H, W, 3|1)."""
    x_nr = torch.as_tensor(x_nr)
    silhouette = torch.as_tensor(silhouette, dtype=x_nr.dtype)
    mul, add = torch.as_tensor(ef.mul_map), torch.as_tensor(ef.add_map)
    if silhouette.ndim == x_nr.ndim - 1:
        silhouette = silhouette[..., None]
    try:
        torch.broadcast_shapes(x_nr.shape, mul.shape, add.shape, silhouette.shape)
        ok = mul.shape[-3:] == x_nr.shape[-3:] and add.shape[-3:] == x_nr.shape[-3:] \
            and silhouette.shape[-3:-1] == x_nr.shape[-3:-1]
    except RuntimeError:
        ok = False
    if not ok:
        raise ShapeMismatchError(
            f"fuse shapes disagree: x_nr {tuple(x_nr.shape)}, mul {tuple(mul.shape)}, "
            f"add {tuple(add.shape)}, silhouette {tuple(silhouette.shape)}"
        )
    return torch.clamp(x_nr * mul + add, 0.0, 1.0) * silhouette


def area_weight(vehicle_pixels, image_size):
    """Loss weight ``h * w / s`` that rebalances small on-screen vehicles."""
    h, w = image_size
    s = torch.as_tensor(vehicle_pixels, dtype=torch.float64)
    if torch.any(s <= 0):
        raise DegenerateSampleError("sample has no vehicle pixels")
    return (h * w) / s


def bce(x_ren, tg, reduce_dims=None):
    x_hat = torch.clamp(x_ren, BCE_EPS, 1.0 - BCE_EPS)
    elem = -(tg * torch.log(x_hat) + (1.0 - tg) * torch.log(1.0 - x_hat))
    if reduce_dims is None:
        return elem.mean()
    return elem.mean(dim=reduce_dims)


def efe_loss(x_ren, tg, s, image_size) -> torch.Tensor:
    """Area-weighted binary cross-entropy for a single image."""
    x_ren, tg = torch.as_tensor(x_ren), torch.as_tensor(tg)
    if x_ren.shape != tg.shape:
        raise ShapeMismatchError(f"x_ren {tuple(x_ren.shape)} vs tg {tuple(tg.shape)}")
    return area_weight(s, image_size).to(x_ren.dtype) * bce(x_ren, tg)


def batch_efe_loss(x_ren, tg, s, image_size, weighted=True):
    """Per-sample losses averaged over the leading batch dims.

    ``x_ren`` and ``tg`` are (B, ..., H, W, 3); ``s`` is (B,).
    """
    dims = tuple(range(1, x_ren.ndim))
    per_sample = bce(x_ren, tg, reduce_dims=dims)
    if weighted:
        per_sample = per_sample * area_weight(s, image_size).to(x_ren.dtype)
    return per_sample.mean()


# --------------------------------------------------------------------------- #
# Network
# --------------------------------------------------------------------------- #

def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class EnvFeatureNet(nn.Module):
    """Encoder-decoder with skip connections, 3 -> 6 channels at full resolution.

    With ``channels=()`` the network collapses to a single 3x3 convolution, which
    is handy for gradient checks.
    """

    def __init__(self, channels=(16, 32, 64), mul_init=0.8, add_init=0.02):
        super().__init__()
        self.channels = tuple(channels)
        self.down = nn.ModuleList()
        cin = 3
        for c in self.channels:
            self.down.append(_double_conv(cin, c))
            cin = c
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for c_skip in reversed(self.channels[:-1]):
            self.up.append(nn.ConvTranspose2d(cin, c_skip, 2, stride=2))
            self.merge.append(_double_conv(2 * c_skip, c_skip))
            cin = c_skip
        self.head = nn.Conv2d(cin, 6, 1 if self.channels else 3, padding=0 if self.channels else 1)
        with torch.no_grad():
            self.head.bias[:3].fill_(math.log(math.expm1(mul_init)))
            self.head.bias[3:].fill_(math.log(add_init / (1.0 - add_init)))

    def forward(self, x):
        """(B, 3, H, W) -> (mul, add), each (B, 3, H, W). H, W divisible by 2**(levels-1)."""
        skips = []
        for i, block in enumerate(self.down):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        for up, merge, skip in zip(self.up, self.merge, reversed(skips[:-1])):
            x = merge(torch.cat([up(x), skip], dim=1))
        out = self.head(x)
        return F.softplus(out[:, :3]), torch.sigmoid(out[:, 3:])


def efe_forward(net: EnvFeatureNet, x_ref, image_size=None) -> EnvFeatureMaps:
    """Run the extractor on (H, W, 3) or (B, H, W, 3) masked reference images."""
    x_ref = torch.as_tensor(x_ref)
    single = x_ref.ndim == 3
    if single:
        x_ref = x_ref[None]
    if x_ref.ndim != 4 or x_ref.shape[-1] != 3:
        raise ShapeMismatchError(f"x_ref must be (B, H, W, 3), got {tuple(x_ref.shape)}")
    if image_size is not None and tuple(x_ref.shape[1:3]) != tuple(image_size):
        raise ShapeMismatchError(
            f"x_ref resolution {tuple(x_ref.shape[1:3])} does not match {tuple(image_size)}"
        )
    param = next(net.parameters())
    mul, add = net(x_ref.to(param.dtype).permute(0, 3, 1, 2))
    mul, add = mul.permute(0, 2, 3, 1), add.permute(0, 2, 3, 1)
    if single:
        mul, add = mul[0], add[0]
    return EnvFeatureMaps(mul, add)


# --------------------------------------------------------------------------- #
# Estimator
# --------------------------------------------------------------------------- #

@dataclass
class EFEPairs:
    """Training pairs: one masked white-car photo against several solid paint colors.

    Attributes:
        x_ref: (N, H, W, 3) masked reference images.
        silhouette: (N, H, W) vehicle masks (1 on the vehicle).
        colors: (C, 3) paint colors; ``x_nr`` of sample i, color j is ``colors[j] * silhouette[i]``.
        targets: (N, C, H, W, 3) oracle renders of the painted car, zero off-vehicle.
        distance: (N,) camera distances, used for bucketed error reports.
    """

    x_ref: np.ndarray
    silhouette: np.ndarray
    colors: np.ndarray
    targets: np.ndarray
    distance: np.ndarray

    def __len__(self):
        return len(self.x_ref)


class EnvironmentFeatureExtractor(TransformerMixin, BaseEstimator):
    """Fits the EFE network on ``EFEPairs``; ``transform`` maps x_ref to fusion maps.

    Parameters:
        image_size: (H, W) expected input resolution.
        channels: encoder widths.
        learning_rate, epochs, batch_size: Adam training schedule.
        cosine: anneal the learning rate from ``learning_rate`` to 0 over the epochs.
        weighted: apply the ``h*w/s`` area weight to the BCE loss.
        random_state: seed for initialization and shuffling.
    """

    def __init__(self, image_size=(64, 64), channels=(16, 32, 64), learning_rate=0.01,
                 epochs=20, batch_size=16, weighted=True, cosine=True, random_state=0):
        self.image_size = image_size
        self.channels = channels
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.weighted = weighted
        self.cosine = cosine
        self.random_state = random_state

    def _make_net(self):
        torch.manual_seed(self.random_state)
        return EnvFeatureNet(self.channels)

    def fit(self, X: EFEPairs, y=None, eval_set: EFEPairs | None = None):
        """Train with Adam and keep the checkpoint with the lowest held-out loss.

        If ``eval_set`` is None the training loss picks the checkpoint.
        """
        if X is None or len(X) == 0:
            raise ValueError("EFE training set is empty")
        self._check_pairs(X)
        net = self._make_net()
        opt = torch.optim.Adam(net.parameters(), lr=self.learning_rate)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=self.epochs) if self.cosine else None
        gen = torch.Generator().manual_seed(self.random_state)
        data = _as_tensors(X)
        n = len(X)

        self.history_ = []
        best_loss, best_state = math.inf, None
        for epoch in range(self.epochs):
            net.train()
            order = torch.randperm(n, generator=gen)
            running = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                loss = self._pairs_loss(net, data, idx)
                opt.zero_grad()
                loss.backward()
                opt.step()
                running += loss.item() * len(idx)
            if sched is not None:
                sched.step()
            train_loss = running / n
            held = self._dataset_loss(net, _as_tensors(eval_set)) if eval_set is not None else train_loss
            self.history_.append({"epoch": epoch + 1, "train_loss": train_loss, "eval_loss": held})
            logger.info("efe epoch %d train %.5f eval %.5f", epoch + 1, train_loss, held)
            if held < best_loss:
                best_loss = held
                best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        net.load_state_dict(best_state)
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self.net_ = net
        self.best_loss_ = best_loss
        return self

    def _check_pairs(self, pairs):
        if tuple(pairs.x_ref.shape[1:3]) != tuple(self.image_size):
            raise ShapeMismatchError(
                f"pairs at {pairs.x_ref.shape[1:3]} but extractor configured for {self.image_size}"
            )

    def _pairs_loss(self, net, data, idx):
        x_ref, sil, colors, targets = data["x_ref"][idx], data["sil"][idx], data["colors"], data["targets"][idx]
        ef = efe_forward(net, x_ref)
        # (B, 1, H, W, 3) maps broadcast over the color axis
        maps = EnvFeatureMaps(ef.mul_map[:, None], ef.add_map[:, None])
        x_nr = colors[None, :, None, None, :] * sil[:, None, :, :, None]
        x_ren = fuse(x_nr, maps, sil[:, None])
        return batch_efe_loss(x_ren, targets, sil.sum(dim=(1, 2)), self.image_size, self.weighted)

    @torch.no_grad()
    def _dataset_loss(self, net, data):
        net.eval()
        n = len(data["x_ref"])
        total = 0.0
        for start in range(0, n, self.batch_size):
            idx = torch.arange(start, min(start + self.batch_size, n))
            total += self._pairs_loss(net, data, idx).item() * len(idx)
        net.train()
        return total / n

    def transform(self, X):
        """Masked reference images (N, H, W, 3) -> (N, H, W, 6) stacked [mul, add]."""
        ef = self.feature_maps(X)
        return torch.cat([ef.mul_map, ef.add_map], dim=-1).numpy()

    @torch.no_grad()
    def feature_maps(self, x_ref, batch_size=64) -> EnvFeatureMaps:
        check_is_fitted(self, "net_")
        x_ref = torch.as_tensor(np.asarray(x_ref), dtype=torch.float32)
        muls, adds = [], []
        for start in range(0, len(x_ref), batch_size):
            ef = efe_forward(self.net_, x_ref[start:start + batch_size], self.image_size)
            muls.append(ef.mul_map)
            adds.append(ef.add_map)
        return EnvFeatureMaps(torch.cat(muls), torch.cat(adds))

    @torch.no_grad()
    def render_error(self, pairs: EFEPairs):
        """Vehicle-region mean absolute error per (sample, color), shape (N, C)."""
        data = _as_tensors(pairs)
        ef = self.feature_maps(pairs.x_ref)
        sil = data["sil"]
        x_nr = data["colors"][None, :, None, None, :] * sil[:, None, :, :, None]
        x_ren = fuse(x_nr, EnvFeatureMaps(ef.mul_map[:, None], ef.add_map[:, None]), sil[:, None])
        err = (x_ren - data["targets"]).abs().sum(dim=(2, 3, 4))
        return (err / (3.0 * sil.sum(dim=(1, 2)))[:, None]).numpy()

    def score(self, X, y=None):
        return -float(self.render_error(X).mean())

    # persistence -------------------------------------------------------------

    def save(self, path, extra=None):
        check_is_fitted(self, "net_")
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "architecture": {"channels": list(self.channels), "image_size": list(self.image_size)},
            "params": _jsonable(self.get_params()),
            "state_dict": self.net_.state_dict(),
            "history": self.history_,
            "meta": extra or {},
        }, path)

    @classmethod
    def load(cls, path):
        ckpt = torch.load(path, weights_only=True)
        if ckpt.get("format") != CHECKPOINT_FORMAT or ckpt.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not an EFE checkpoint of version {CHECKPOINT_VERSION}")
        params = ckpt["params"]
        params["image_size"] = tuple(params["image_size"])
        params["channels"] = tuple(params["channels"])
        est = cls(**params)
        net = EnvFeatureNet(est.channels)
        net.load_state_dict(ckpt["state_dict"])
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        est.net_ = net
        est.history_ = ckpt.get("history", [])
        est.meta_ = ckpt.get("meta", {})
        return est


def _as_tensors(pairs: EFEPairs):
    return {
        "x_ref": torch.as_tensor(pairs.x_ref, dtype=torch.float32),
        "sil": torch.as_tensor(pairs.silhouette, dtype=torch.float32),
        "colors": torch.as_tensor(pairs.colors, dtype=torch.float32),
        "targets": torch.as_tensor(pairs.targets, dtype=torch.float32),
    }


def _jsonable(params):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
