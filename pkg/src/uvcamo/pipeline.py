"""End-to-end stages shared by the CLI and the acceptance suite.

Every stage reads its inputs from and writes its outputs under ``cfg.out_dir``::

    dataset/manifest.json, dataset/<split>/*.png
    mesh.obj
    efe.pt, detector.pt
    camo/texture.png, camo/trace.json, camo/checkpoints/
    eval/<texture>_<split>.json
    report/summary.json, report/curve_*.csv, report/curve_*.png
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from .config import PipelineConfig
from .dataset import (
    TRAIN_COLORS, FULL_TEST_PALETTE, FragmentCache, GridConfig, build_efe_pairs, generate_dataset,
    load_split, read_manifest, render_vehicle, eval_palette, write_json,
)
from .detect_loss import DetectionSet, ToyDetector
from .environment import EnvironmentFeatureExtractor
from .eval_report import EvalResult, emit_report, evaluate_texture
from .mesh_render import TextureMap, load_mesh, load_texture, make_car_mesh, save_mesh, save_texture
from .optimize import CamouflageGenerator, prepare_scenes

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
EVAL_SPLITS = ("eval-seen", "eval-unseen")


def set_deterministic(enabled: bool = True):
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(enabled)


def benign_textures(count, rng, texture_size=(64, 64), atlas_cells=4):
    """Non-adversarial paint jobs for detector training: solid, per-panel, and blotchy."""
    colors = np.concatenate([TRAIN_COLORS, FULL_TEST_PALETTE])
    th, tw = texture_size
    out = []
    for _ in range(count):
        kind = rng.uniform()
        if kind < 0.5:
            tex = np.broadcast_to(colors[rng.integers(len(colors))], (th, tw, 3)).copy()
        elif kind < 0.75:
            panels = colors[rng.integers(len(colors), size=(atlas_cells, atlas_cells))]
            tex = np.kron(panels, np.ones((th // atlas_cells, tw // atlas_cells, 1)))
        else:
            coarse = rng.uniform(0, 1, size=(4, 4, 3))
            tex = np.kron(coarse, np.ones((th // 4, tw // 4, 1)))
        out.append(np.clip(tex, 0.0, 1.0))
    return out


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self._mesh = None
        self._cache = None

    # paths ---------------------------------------------------------------------

    @property
    def manifest_path(self):
        return self.out / "dataset" / "manifest.json"

    @property
    def efe_path(self):
        return self.out / "efe.pt"

    @property
    def detector_path(self):
        return self.out / "detector.pt"

    @property
    def texture_path(self):
        return self.out / "camo" / "texture.png"

    def meta(self, **extra):
        return {"config_hash": self.cfg.hash(), "seed": self.cfg.seed, "format_version": FORMAT_VERSION,
                **extra}

    # shared state ----------------------------------------------------------------

    @property
    def mesh(self):
        if self._mesh is None:
            if self.cfg.mesh:
                self._mesh = load_mesh(self.cfg.mesh)
            else:
                self._mesh = make_car_mesh(self.cfg.camo.texture_size[0])
        return self._mesh

    @property
    def cache(self):
        if self._cache is None:
            self._cache = FragmentCache(self.mesh, self.cfg.grid.image_size, self.cfg.grid.fov)
        return self._cache

    def _require(self, path, stage):
        if not Path(path).exists():
            raise FileNotFoundError(f"{path} missing; run '{stage}' first")

    # stages ----------------------------------------------------------------------

    def gen_dataset(self):
        self.out.mkdir(parents=True, exist_ok=True)
        save_mesh(self.mesh, self.out / "mesh.obj")
        manifest = generate_dataset(self.mesh, None, self.cfg.grid, self.cfg.seed, self.out / "dataset",
                                    config_hash=self.cfg.hash())
        logger.info("wrote %d samples (%d dropped)", len(manifest["records"]), manifest["dropped"])
        return manifest

    def efe_pairs(self, split, colors):
        self._require(self.manifest_path, "gen-dataset")
        return build_efe_pairs(load_split(self.manifest_path, split), self.cache, colors)

    def train_efe(self, weighted=None, save=True):
        c = self.cfg.efe
        train = self.efe_pairs("efe-train", TRAIN_COLORS)
        test = self.efe_pairs("efe-test", eval_palette(c.test_colors))
        est = EnvironmentFeatureExtractor(
            image_size=self.cfg.grid.image_size, channels=tuple(c.channels), learning_rate=c.learning_rate,
            epochs=c.epochs, batch_size=c.batch_size, weighted=c.weighted if weighted is None else weighted,
            cosine=c.cosine, random_state=self.cfg.seed,
        ).fit(train, eval_set=test)
        est.test_error_ = est.render_error(test)
        est.test_distance_ = test.distance
        if save:
            est.save(self.efe_path, extra=self.meta(test_mae=float(est.test_error_.mean())))
        return est

    def detector_training_set(self):
        self._require(self.manifest_path, "gen-dataset")
        rng = np.random.default_rng([self.cfg.seed, 31337])
        images, boxes = [], []
        for split in ("texgen", "efe-train"):
            batch = load_split(self.manifest_path, split)
            _, backgrounds = batch.fg_bg()
            images.append(batch.images)
            boxes.append(batch.boxes)
            for _ in range(self.cfg.detector.textures_per_scene):
                textures = benign_textures(len(batch), rng, self.cfg.camo.texture_size)
                painted = np.stack([
                    render_vehicle(self.cache(p), tex, w, s) + bg
                    for p, w, s, bg, tex in zip(batch.poses, batch.weathers, batch.sun_azimuths,
                                                backgrounds, textures)
                ])
                images.append(painted)
                boxes.append(batch.boxes)
        return np.concatenate(images).astype(np.float32), np.concatenate(boxes)

    def benign_texture(self):
        return TextureMap.solid(self.cfg.eval.benign_color, self.cfg.camo.texture_size)

    def random_texture(self):
        return TextureMap.random(self.cfg.camo.texture_size, seed=self.cfg.eval.random_seed)

    def painted_split(self, split, texture):
        """Scenes of ``split`` repainted with ``texture`` through the oracle: (images, boxes)."""
        batch = load_split(self.manifest_path, split)
        _, backgrounds = batch.fg_bg()
        images = np.stack([
            render_vehicle(self.cache(p), texture, w, s) + bg
            for p, w, s, bg in zip(batch.poses, batch.weathers, batch.sun_azimuths, backgrounds)
        ])
        return images.astype(np.float32), batch.boxes

    def train_detector(self, save=True):
        c = self.cfg.detector
        X, y = self.detector_training_set()
        eval_set = self.painted_split("eval-seen", self.benign_texture())
        det = ToyDetector(
            image_size=self.cfg.grid.image_size, grid=c.grid, channels=tuple(c.channels),
            learning_rate=c.learning_rate, epochs=c.epochs, batch_size=c.batch_size, min_ap=c.min_ap,
            nms_iou=self.cfg.eval.nms_iou, conf_floor=self.cfg.eval.conf_floor, random_state=self.cfg.seed,
        ).fit(X, y, eval_set=eval_set)
        if save:
            det.save(self.detector_path, extra=self.meta(eval_ap=det.eval_ap_))
        return det

    def load_efe(self):
        self._require(self.efe_path, "train-efe")
        return EnvironmentFeatureExtractor.load(self.efe_path)

    def load_detector(self):
        self._require(self.detector_path, "train-detector")
        return ToyDetector.load(self.detector_path)

    def texgen_scenes(self, extractor=None):
        extractor = extractor or self.load_efe()
        batch = load_split(self.manifest_path, "texgen")
        return prepare_scenes(batch, self.cache, extractor, tuple(self.cfg.camo.texture_size))

    def gen_camo(self, scenes=None, detector=None, save=True, out_subdir="camo", max_steps=None, **overrides):
        c = self.cfg.camo
        params = dict(learning_rate=c.learning_rate, epochs=c.epochs, batch_size=c.batch_size, alpha=c.alpha,
                      beta=c.beta, loss=c.loss, texture_size=tuple(c.texture_size), random_state=self.cfg.seed)
        params.update(overrides)
        out_dir = self.out / out_subdir
        if save:
            params["checkpoint_dir"] = str(out_dir / "checkpoints")
        scenes = scenes if scenes is not None else self.texgen_scenes()
        detector = detector or self.load_detector()
        gen = CamouflageGenerator(**params).fit(scenes, detector, max_steps=max_steps)
        if save:
            out_dir.mkdir(parents=True, exist_ok=True)
            meta = self.meta(**{k: v for k, v in params.items() if k != "checkpoint_dir"})
            save_texture(gen.texture_, out_dir / "texture.png", metadata=meta)
            gen.write_trace(out_dir / "trace.json", metadata=meta)
        return gen

    def evaluate(self, textures: dict | None = None, splits=EVAL_SPLITS, detector=None, save=True):
        """Evaluate named textures on the eval splits; defaults to benign / random / adversarial."""
        detector = detector or self.load_detector()
        if textures is None:
            self._require(self.texture_path, "gen-camo")
            textures = {"benign": self.benign_texture(), "random": self.random_texture(),
                        "adversarial": load_texture(self.texture_path)}
        results = {}
        for name, texture in textures.items():
            results[name] = {}
            for split in splits:
                batch = load_split(self.manifest_path, split)
                res = evaluate_texture(detector, self.cache, texture, batch, split, name)
                results[name][split] = res
                if save:
                    (self.out / "eval").mkdir(parents=True, exist_ok=True)
                    write_json(eval_to_dict(res, self.meta()), self.out / "eval" / f"{name}_{split}.json")
                logger.info("%s on %s: AP@0.5 %.3f", name, split, res.ap)
        return results

    def report(self, results=None, plots=True):
        if results is None:
            results = load_eval_results(self.out / "eval")
        return emit_report(results, self.out / "report", metadata=self.meta(), plots=plots)


def eval_to_dict(result: EvalResult, meta=None):
    records = []
    for rec in result.records:
        dets = rec["detections"]
        records.append({
            "id": rec["id"], "pose": rec["pose"], "weather": rec["weather"], "axes": rec["axes"],
            "gt": rec["gt"], "matched": rec["matched"],
            "detections": [
                {"box": [round(float(v), 6) for v in box], "objectness": round(float(o), 6),
                 "class_conf": [round(float(v), 6) for v in cc]}
                for box, o, cc in zip(dets.boxes, dets.objectness, dets.class_conf)
            ],
        })
    return {"format": "uvcamo-eval", "version": FORMAT_VERSION, "metadata": meta or {},
            "split": result.split, "texture": result.texture_name, "ap": result.ap, "records": records}


def eval_from_dict(d) -> EvalResult:
    from .eval_report import ap_at_05

    res = EvalResult(split=d["split"], texture_name=d["texture"])
    for rec in d["records"]:
        dets = rec["detections"]
        rec = dict(rec)
        rec["detections"] = DetectionSet(
            [x["box"] for x in dets] or np.zeros((0, 4)),
            [x["objectness"] for x in dets],
            [x["class_conf"] for x in dets] or np.zeros((0, 2)),
        )
        res.records.append(rec)
    res.ap = ap_at_05(res.detections(), res.gts())
    return res


def load_eval_results(eval_dir):
    eval_dir = Path(eval_dir)
    files = sorted(eval_dir.glob("*.json"))
    if not files:
        raise FileNotFoundError(f"no evaluation results in {eval_dir}; run 'evaluate' first")
    results = {}
    order = {"benign": 0, "random": 1, "adversarial": 2}
    for path in files:
        d = json.loads(path.read_text())
        results.setdefault(d["texture"], {})[d["split"]] = eval_from_dict(d)
    return dict(sorted(results.items(), key=lambda kv: (order.get(kv[0], 99), kv[0])))
