"""Acceptance gate: one test per criterion, run on the full desk-scale pipeline.

The desk run takes about 8 minutes on one CPU core. It is built once
per session by the ``desk`` fixture and shared by the criteria that need it.
Each test prints a one-line verdict with the measured numbers.
"""
import time

import numpy as np
import pytest

from ap_oracle import random_instance, threshold_oracle_ap
from uvcamo import cli
from uvcamo.config import load_config
from uvcamo.dataset import load_manifest, split_fg_bg
from uvcamo.eval_report import ap_at_05
from uvcamo.pipeline import Pipeline, set_deterministic
from uvcamo.selftest import check_loss_oracles, pipeline_gradient_error, rasterizer_gradient_error

pytestmark = pytest.mark.acceptance


def verdict(n, ok, detail):
    print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")


class DeskRun:
    """Artifacts and timings of one default-config pipeline run."""

    def __init__(self, out_dir):
        set_deterministic(True)
        self.pipe = Pipeline(load_config(None, {"out_dir": str(out_dir)}))
        self.seconds = {}
        self.pipe_stage("dataset", self.pipe.gen_dataset)
        self.detector = self.pipe_stage("detector", self.pipe.train_detector)
        self.efe = self.pipe_stage("efe", self.pipe.train_efe)
        self.efe_unweighted = self.pipe_stage("efe_unweighted", lambda: self.pipe.train_efe(weighted=False,
                                                                                            save=False))
        scenes = self.pipe.texgen_scenes(self.efe)
        self.camo = self.pipe_stage("camo", lambda: self.pipe.gen_camo(scenes=scenes, detector=self.detector))
        self.results = self.pipe_stage("evaluate", lambda: self.pipe.evaluate(detector=self.detector))
        self.center = self.pipe.gen_camo(scenes=scenes, detector=self.detector, save=False, loss="center-cell")
        self.center_results = self.pipe.evaluate({"center-cell": self.center.texture_}, splits=("eval-seen",),
                                                 detector=self.detector, save=False)
        self.pipe.report(self.results)

    def pipe_stage(self, name, fn):
        t = time.perf_counter()
        out = fn()
        self.seconds[name] = time.perf_counter() - t
        return out

    def ap(self, texture, split="eval-seen"):
        return self.results[texture][split].ap


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    return DeskRun(tmp_path_factory.mktemp("desk"))


def test_criterion_1_gradients_match_finite_differences():
    t = time.perf_counter()
    raster_err = rasterizer_gradient_error()
    rel_err, n_kept = pipeline_gradient_error()
    seconds = time.perf_counter() - t
    ok = raster_err < 1e-4 and rel_err < 1e-2 and seconds < 120
    verdict(1, ok, f"rasterizer max abs err {raster_err:.2e} (< 1e-4); end-to-end max rel err {rel_err:.2e} "
                   f"over {n_kept} texel channels (< 1e-2); {seconds:.1f} s (< 120 s)")
    assert ok


def test_criterion_2_loss_oracles():
    results = check_loss_oracles(tol=1e-6)
    failed = [r for r in results if not r.passed]
    verdict(2, not failed, f"{len(results) - len(failed)}/{len(results)} oracle values within 1e-6"
            + "".join(f"; {r.name}: {r.detail}" for r in failed))
    assert not failed


def test_criterion_3_foreground_background_identity(desk):
    samples = list(load_manifest(desk.pipe.manifest_path))
    rng = np.random.default_rng(0)
    picked = rng.choice(len(samples), size=100, replace=False)
    bad = 0
    for i in picked:
        s = samples[i]
        x_ref, b = split_fg_bg(s.i_in, s.m)
        bad += int(not np.array_equal(x_ref + b, s.i_in))
    verdict(3, bad == 0, f"x_ref + b == i_in exactly on {100 - bad}/100 random samples")
    assert bad == 0


def test_criterion_4_efe_fidelity(desk):
    weighted = desk.efe.test_error_.mean(axis=1)
    plain = desk.efe_unweighted.test_error_.mean(axis=1)
    dist = desk.efe.test_distance_
    far = dist == dist.max()
    mae_w, mae_p = weighted.mean(), plain.mean()
    far_w, far_p = weighted[far].mean(), plain[far].mean()
    seconds = desk.seconds["efe"]
    ok = mae_w < 0.08 and mae_w <= mae_p and far_w < far_p and seconds < 1200
    verdict(4, ok, f"MAE weighted {mae_w:.4f} (< 0.08), unweighted {mae_p:.4f}; at {dist.max():g} m "
                   f"weighted {far_w:.4f} vs unweighted {far_p:.4f}; training {seconds:.0f} s (< 1200 s)")
    assert ok


def test_criterion_5_attack_lowers_ap(desk):
    benign, random, adv = desk.ap("benign"), desk.ap("random"), desk.ap("adversarial")
    seconds = desk.seconds["detector"] + desk.seconds["camo"] + desk.seconds["evaluate"]
    ordered = adv < random < benign
    halved = adv <= 0.5 * benign
    ok = benign >= 0.90 and ordered and halved and seconds < 2400
    verdict(5, ok, f"eval-seen AP@0.5 benign {benign:.4f}, random {random:.4f}, adversarial {adv:.4f}; "
                   f"ordering {'holds' if ordered else 'violated'}; adversarial <= 0.5 x benign "
                   f"({0.5 * benign:.4f}) {'holds' if halved else 'violated'}; {seconds:.0f} s (< 2400 s)")
    assert ok


def test_criterion_6_unseen_weather_transfer(desk):
    seen, unseen = desk.ap("adversarial"), desk.ap("adversarial", "eval-unseen")
    ok = unseen <= 1.2 * seen
    verdict(6, ok, f"adversarial AP@0.5 unseen {unseen:.4f} <= 1.2 x seen {seen:.4f} = {1.2 * seen:.4f}")
    assert ok


def test_criterion_7_all_boxes_loss_beats_center_cell(desk):
    all_boxes = desk.ap("adversarial")
    center = desk.center_results["center-cell"]["eval-seen"].ap
    ok = all_boxes <= center
    verdict(7, ok, f"adversarial AP@0.5 all-boxes {all_boxes:.4f} <= center-cell {center:.4f}")
    assert ok


def test_criterion_8_ap_matches_threshold_oracle():
    mismatches = []
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        dets, gts = random_instance(rng, int(rng.integers(1, 21)))
        got, want = ap_at_05(dets, gts), threshold_oracle_ap(dets, gts)
        if got != want:
            mismatches.append((seed, got, want))
    verdict(8, not mismatches, f"{50 - len(mismatches)}/50 random instances equal the oracle exactly")
    assert not mismatches


TINY_CONFIG = """
seed: 5
grid:
  image_size: [32, 32]
  efe_train_poses: 2
  efe_test_poses: 2
  texgen_poses: 2
  eval_poses: 2
  seen_sun_altitudes: [-30.0, 60.0]
  seen_fog_densities: [0.0, 50.0]
  unseen_sun_altitudes: [0.0]
  unseen_fog_densities: [10.0, 40.0]
  texgen_locations: 2
  eval_locations: 2
efe:
  channels: [4, 8, 16]
  epochs: 2
detector:
  grid: 4
  channels: [4, 8, 16]
  epochs: 2
  min_ap: 0.0
  textures_per_scene: 1
camo:
  epochs: 2
"""


def _run_cli(config, out):
    for cmd in ("gen-dataset", "train-detector", "train-efe", "gen-camo", "evaluate", "report"):
        assert cli.main([cmd, "--config", str(config), "--out", str(out), "--deterministic"]) == 0, cmd


def _tree_bytes(root, patterns):
    return {str(p.relative_to(root)): p.read_bytes()
            for pattern in patterns for p in sorted(root.glob(pattern)) if p.is_file()}


def test_criterion_9_deterministic_reruns(tmp_path):
    config = tmp_path / "tiny.yaml"
    config.write_text(TINY_CONFIG)
    runs = []
    for name in ("a", "b"):
        _run_cli(config, tmp_path / name)
        runs.append(_tree_bytes(tmp_path / name, ("camo/texture.png", "dataset/**/*", "report/*", "eval/*")))
    a, b = runs
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = bool(a) and not differing and "camo/texture.png" in a and "dataset/manifest.json" in a
    verdict(9, ok, f"{len(a)} artifact files compared across two runs; {len(differing)} differ"
            + (f" ({', '.join(differing[:5])})" if differing else ""))
    assert ok
