import math

import numpy as np
import pytest
import torch

from uvcamo.environment import (
    BCE_EPS, FOG_COLOR, EFEPairs, EnvFeatureMaps, EnvFeatureNet, EnvironmentFeatureExtractor, WeatherParams,
    area_weight, batch_efe_loss, efe_forward, efe_loss, env_oracle, fog_transmittance, fuse, oracle_factors,
)
from uvcamo.exceptions import DegenerateSampleError, ShapeMismatchError
from uvcamo.mesh_render import CameraPose, TextureMap, rasterize

from conftest import quad_mesh


@pytest.fixture
def overhead_quad_render():
    tex = TextureMap(np.random.default_rng(0).uniform(size=(4, 4, 3)))
    return rasterize(quad_mesh(), tex, CameraPose(0, 90, 3, look_at=(0, 0, 0)), (16, 16))


# ----------------------------------------------------------------------------- oracle

def test_oracle_identity_configuration(overhead_quad_render):
    # sun straight overhead, normal +z, no fog: ambient + (1 - ambient) * 1 = 1 and t = 1
    out = env_oracle(overhead_quad_render, WeatherParams(90, 0))
    np.testing.assert_allclose(out, overhead_quad_render.color, atol=1e-12)


def test_oracle_heavy_fog_goes_to_fog_color(overhead_quad_render):
    out = env_oracle(overhead_quad_render, WeatherParams(30, 100))
    sil = overhead_quad_render.silhouette > 0
    t = fog_transmittance(3.0, 100)
    assert np.abs(out[sil] - FOG_COLOR).max() <= t + 1e-12
    assert (out[~sil] == 0).all()


def test_fog_transmittance_example():
    assert fog_transmittance(10.0, 25.0) == pytest.approx(math.exp(-1.0), abs=1e-12)
    assert fog_transmittance(10.0, 25.0) == pytest.approx(0.3679, abs=1e-4)


def test_oracle_factors_reproduce_oracle(overhead_quad_render):
    w = WeatherParams(-30, 40)
    mul, add = oracle_factors(overhead_quad_render.fragments, w, 100.0)
    manual = overhead_quad_render.color * mul[..., None] + add[..., None]
    np.testing.assert_allclose(env_oracle(overhead_quad_render, w, 100.0), manual, atol=1e-12)


@pytest.mark.parametrize("alt,fog", [(-91, 0), (0, -1), (0, 101)])
def test_weather_out_of_range(alt, fog):
    with pytest.raises(ValueError):
        WeatherParams(alt, fog)


# ----------------------------------------------------------------------------- fuse

def test_fuse_example():
    ef = EnvFeatureMaps(torch.full((1, 1, 3), 0.4, dtype=torch.float64), torch.full((1, 1, 3), 0.1, dtype=torch.float64))
    out = fuse(torch.full((1, 1, 3), 0.5, dtype=torch.float64), ef, torch.ones(1, 1))
    np.testing.assert_allclose(out.numpy(), 0.3, atol=1e-6)


def test_fuse_clamps_high():
    ef = EnvFeatureMaps(torch.full((1, 1, 3), 1.5), torch.full((1, 1, 3), 0.2))
    assert fuse(torch.ones(1, 1, 3), ef, torch.ones(1, 1)).max().item() == 1.0


def test_fuse_identity_is_exact():
    rng = np.random.default_rng(0)
    x = torch.as_tensor(rng.uniform(size=(5, 6, 3)))
    sil = torch.as_tensor((rng.uniform(size=(5, 6)) > 0.5).astype(float))
    ef = EnvFeatureMaps(torch.ones(5, 6, 3, dtype=torch.float64), torch.zeros(5, 6, 3, dtype=torch.float64))
    assert torch.equal(fuse(x, ef, sil), x * sil[..., None])


def test_fuse_batched_silhouette():
    x = torch.rand(2, 4, 4, 3)
    ef = EnvFeatureMaps(torch.ones(2, 4, 4, 3), torch.zeros(2, 4, 4, 3))
    sil = torch.zeros(2, 4, 4)
    sil[1] = 1
    out = fuse(x, ef, sil)
    assert (out[0] == 0).all() and torch.equal(out[1], x[1])


def test_fuse_shape_mismatch():
    ef = EnvFeatureMaps(torch.ones(4, 4, 3), torch.zeros(4, 4, 3))
    with pytest.raises(ShapeMismatchError):
        fuse(torch.rand(5, 4, 3), ef, torch.ones(5, 4))


# ----------------------------------------------------------------------------- loss

def test_area_weight_example():
    assert float(area_weight(25, (10, 10))) == 4.0


def test_area_weight_zero_pixels():
    with pytest.raises(DegenerateSampleError):
        area_weight(0, (10, 10))


def test_efe_loss_single_pixel():
    assert float(efe_loss(torch.tensor([[[0.5]]]), torch.tensor([[[1.0]]]), 1, (1, 1))) == pytest.approx(
        0.6931, abs=1e-4)


def test_efe_loss_at_target_is_near_zero():
    tg = torch.tensor(np.random.default_rng(0).integers(0, 2, size=(4, 4, 3)), dtype=torch.float64)
    x = tg.clamp(BCE_EPS, 1 - BCE_EPS)
    assert float(efe_loss(x, tg, 4, (4, 4))) < 1e-4


def test_weighted_batch_loss_rebalances_small_vehicles():
    x = torch.full((2, 4, 4, 3), 0.5, dtype=torch.float64)
    tg = torch.ones_like(x)
    s = torch.tensor([16.0, 1.0])
    plain = batch_efe_loss(x, tg, s, (4, 4), weighted=False)
    weighted = batch_efe_loss(x, tg, s, (4, 4), weighted=True)
    assert float(plain) == pytest.approx(math.log(2))
    assert float(weighted) == pytest.approx(math.log(2) * (1 + 16) / 2)


# ----------------------------------------------------------------------------- network

def test_efe_forward_zero_input_is_finite():
    net = EnvFeatureNet(channels=(4, 8)).eval()
    ef = efe_forward(net, torch.zeros(16, 16, 3))
    assert ef.mul_map.shape == (16, 16, 3)
    assert torch.isfinite(ef.mul_map).all() and torch.isfinite(ef.add_map).all()
    assert (ef.mul_map >= 0).all() and (ef.add_map >= 0).all() and (ef.add_map <= 1).all()


def test_efe_forward_is_deterministic():
    net = EnvFeatureNet(channels=(4, 8)).eval()
    x = torch.rand(2, 16, 16, 3)
    a, b = efe_forward(net, x), efe_forward(net, x)
    assert torch.equal(a.mul_map, b.mul_map) and torch.equal(a.add_map, b.add_map)


def test_efe_forward_resolution_mismatch():
    with pytest.raises(ShapeMismatchError):
        efe_forward(EnvFeatureNet(channels=(4,)), torch.zeros(16, 16, 3), image_size=(32, 32))


def _toy_pairs(n=6, size=16, seed=0):
    rng = np.random.default_rng(seed)
    sil = np.zeros((n, size, size))
    sil[:, 4:12, 3:13] = 1
    x_ref = rng.uniform(0.3, 0.9, size=(n, size, size, 3)) * sil[..., None]
    colors = np.array([[1, 0, 0], [0, 0, 1.0]])
    targets = np.clip(colors[None, :, None, None, :] * x_ref[:, None] + 0.05, 0, 1) * sil[:, None, ..., None]
    return EFEPairs(x_ref=x_ref.astype(np.float32), silhouette=sil.astype(np.float32), colors=colors,
                    targets=targets.astype(np.float32), distance=np.full(n, 5.0))


def test_extractor_fit_reduces_loss_and_freezes():
    pairs = _toy_pairs()
    est = EnvironmentFeatureExtractor(image_size=(16, 16), channels=(4, 8), epochs=4, batch_size=3,
                                      random_state=0).fit(pairs)
    losses = [h["train_loss"] for h in est.history_]
    assert losses[-1] <= losses[0]
    assert not any(p.requires_grad for p in est.net_.parameters())
    assert est.render_error(pairs).shape == (6, 2)


def test_extractor_empty_dataset():
    pairs = _toy_pairs(n=0)
    with pytest.raises(ValueError):
        EnvironmentFeatureExtractor(image_size=(16, 16), channels=(4,), epochs=1).fit(pairs)


def test_extractor_save_load_round_trip(tmp_path):
    pairs = _toy_pairs()
    est = EnvironmentFeatureExtractor(image_size=(16, 16), channels=(4, 8), epochs=1, random_state=0).fit(pairs)
    est.save(tmp_path / "efe.pt", extra={"seed": 0})
    back = EnvironmentFeatureExtractor.load(tmp_path / "efe.pt")
    a, b = est.feature_maps(pairs.x_ref), back.feature_maps(pairs.x_ref)
    assert torch.equal(a.mul_map, b.mul_map)
    assert back.get_params() == est.get_params()


def test_extractor_get_params_are_constructor_args():
    est = EnvironmentFeatureExtractor(epochs=3, weighted=False)
    params = est.get_params()
    assert params["epochs"] == 3 and params["weighted"] is False
    assert est.set_params(epochs=5).epochs == 5
