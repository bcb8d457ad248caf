"""Multi-weather scene dataset: generation, manifests, and the foreground/background split.

Mask convention: ``m`` is 1 on background and 0 on the vehicle.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .environment import DEFAULT_SUN_AZIMUTH, EFEPairs, WeatherParams, env_oracle
from .exceptions import DegenerateSampleError, InvariantViolationError, ShapeMismatchError
from .mesh_render import (
    DEFAULT_FOV, CameraPose, Fragments, Mesh, TextureMap, bilinear_taps, rasterize_fragments,
    sample_texture, save_png,
)

MANIFEST_FORMAT = "uvcamo-manifest"
MANIFEST_VERSION = 1
SPLITS = ("efe-train", "efe-test", "texgen", "eval-seen", "eval-unseen")

SEEN_SUN_ALTITUDES = (-90.0, -30.0, 30.0, 90.0)
SEEN_FOG_DENSITIES = (0.0, 25.0, 50.0, 90.0)
UNSEEN_SUN_ALTITUDES = (-60.0, 0.0, 60.0)
UNSEEN_FOG_DENSITIES = (10.0, 40.0, 70.0)

TEXGEN_AZIMUTHS = tuple(float(a) for a in range(0, 360, 45))
TEXGEN_ELEVATIONS = (0.0, 22.5, 45.0, 67.5)
DISTANCES = (5.0, 10.0, 15.0, 20.0)
EFE_AZIMUTHS = tuple(float(a) for a in range(0, 360, 45))
EFE_ELEVATIONS = (22.5, 67.5)

TRAIN_COLORS = np.array([
    [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0],
    [1.0, 0.0, 1.0], [1.0, 1.0, 0.0], [0.0, 1.0, 1.0],
    [1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [0.5, 0.5, 0.5],
])
FULL_TEST_PALETTE = np.array(list(itertools.product((0, 85, 170, 255), repeat=3)), dtype=np.float64) / 255.0


def eval_palette(n=16, seed=0):
    """Deterministic subset of the 64-color (0/85/170/255)^3 palette."""
    if n >= len(FULL_TEST_PALETTE):
        return FULL_TEST_PALETTE.copy()
    idx = np.sort(np.random.default_rng(seed).choice(len(FULL_TEST_PALETTE), size=n, replace=False))
    return FULL_TEST_PALETTE[idx]


# --------------------------------------------------------------------------- #
# Core operations
# --------------------------------------------------------------------------- #

def check_binary_mask(m, name="mask"):
    m = np.asarray(m)
    if not np.all((m == 0) | (m == 1)):
        raise InvariantViolationError(f"{name} is not binary")
    return m


def split_fg_bg(i_in, m):
    """Foreground ``x_ref = i_in * (1 - m)`` and background ``b = i_in * m``."""
    i_in = np.asarray(i_in)
    m = check_binary_mask(m)
    if m.shape != i_in.shape[:2]:
        raise ShapeMismatchError(f"mask {m.shape} does not match image {i_in.shape}")
    m3 = m[..., None].astype(i_in.dtype)
    return i_in * (1 - m3), i_in * m3


def gt_box_from_mask(m):
    """Tight half-open box (x1, y1, x2, y2) around the zero (vehicle) region of ``m``."""
    m = check_binary_mask(m)
    rows, cols = np.nonzero(m == 0)
    if len(rows) == 0:
        raise DegenerateSampleError("mask contains no vehicle pixels")
    return (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)


@dataclass
class SceneSample:
    sample_id: str
    i_in: np.ndarray
    m: np.ndarray
    y: tuple
    pose: CameraPose
    weather: WeatherParams
    split_tag: str
    location: int = 0
    sun_azimuth: float = DEFAULT_SUN_AZIMUTH

    def fg_bg(self):
        return split_fg_bg(self.i_in, self.m)


# --------------------------------------------------------------------------- #
# Generation
# --------------------------------------------------------------------------- #

@dataclass
class GridConfig:
    """What to generate. Counts are per weather setting."""

    image_size: tuple = (64, 64)
    fov: float = DEFAULT_FOV
    sun_azimuth: float = DEFAULT_SUN_AZIMUTH
    seen_sun_altitudes: tuple = SEEN_SUN_ALTITUDES
    seen_fog_densities: tuple = SEEN_FOG_DENSITIES
    unseen_sun_altitudes: tuple = UNSEEN_SUN_ALTITUDES
    unseen_fog_densities: tuple = UNSEEN_FOG_DENSITIES
    distances: tuple = DISTANCES
    efe_azimuths: tuple = EFE_AZIMUTHS
    efe_elevations: tuple = EFE_ELEVATIONS
    texgen_azimuths: tuple = TEXGEN_AZIMUTHS
    texgen_elevations: tuple = TEXGEN_ELEVATIONS
    efe_train_poses: int = 16
    efe_test_poses: int = 4
    texgen_poses: int = 48
    eval_poses: int = 32
    texgen_locations: int = 8
    eval_locations: int = 4
    splits: tuple = SPLITS

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        for name in ("seen_sun_altitudes", "seen_fog_densities", "unseen_sun_altitudes",
                     "unseen_fog_densities", "distances", "efe_azimuths", "efe_elevations",
                     "texgen_azimuths", "texgen_elevations", "splits"):
            setattr(self, name, tuple(getattr(self, name)))
        unknown = set(self.splits) - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown split(s): {sorted(unknown)}")

    def seen_weathers(self):
        return [WeatherParams(a, f) for a in self.seen_sun_altitudes for f in self.seen_fog_densities]

    def unseen_weathers(self):
        return [WeatherParams(a, f) for a in self.unseen_sun_altitudes for f in self.unseen_fog_densities]

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _pose_grid(azimuths, elevations, distances):
    return [(a, e, d) for a in azimuths for e in elevations for d in distances]


def plan_samples(grid: GridConfig, seed: int):
    """Enumerate (split, location, sun azimuth, pose, weather) for every sample, deterministically.

    A location stands for a spot in the world: a background plate plus a car yaw.
    Poses are relative to the car, so a yaw shows up as a rotated sun azimuth.
    """
    rng = np.random.default_rng([seed, 7919])
    plan = []
    seen, unseen = grid.seen_weathers(), grid.unseen_weathers()
    efe_grid = _pose_grid(grid.efe_azimuths, grid.efe_elevations, grid.distances)
    tex_grid = _pose_grid(grid.texgen_azimuths, grid.texgen_elevations, grid.distances)

    location_ids = itertools.count()
    efe_train_locs = [next(location_ids) for _ in seen]
    efe_test_locs = [next(location_ids) for _ in seen]
    tex_locs = [next(location_ids) for _ in range(grid.texgen_locations)]
    eval_seen_locs = [next(location_ids) for _ in range(grid.eval_locations)]
    eval_unseen_locs = [next(location_ids) for _ in range(grid.eval_locations)]
    n_locations = next(location_ids)
    yaws = rng.integers(0, 8, size=n_locations) * 45.0

    def take(split, weathers, pose_grid, count, locs, per_weather_location=False, stratify=False):
        if split not in grid.splits:
            return
        for wi, weather in enumerate(weathers):
            if stratify:
                # one pose per distance bucket, cycling, so every distance is represented
                chosen = []
                by_dist = {d: [p for p in pose_grid if p[2] == d] for d in grid.distances}
                for k in range(count):
                    bucket = by_dist[grid.distances[k % len(grid.distances)]]
                    chosen.append(bucket[int(rng.integers(len(bucket)))])
            else:
                idx = rng.choice(len(pose_grid), size=min(count, len(pose_grid)), replace=False)
                chosen = [pose_grid[i] for i in sorted(idx)]
            used = set()
            for az, el, dist in chosen:
                loc = locs[wi] if per_weather_location else locs[int(rng.integers(len(locs)))]
                key = (az, el, dist, loc)
                if key in used:
                    continue
                used.add(key)
                plan.append({
                    "split": split, "location": loc,
                    "sun_azimuth": float((grid.sun_azimuth - yaws[loc]) % 360.0),
                    "pose": CameraPose(az, el, dist), "weather": weather,
                })

    take("efe-train", seen, efe_grid, grid.efe_train_poses, efe_train_locs, per_weather_location=True)
    take("efe-test", seen, efe_grid, grid.efe_test_poses, efe_test_locs, per_weather_location=True,
         stratify=True)
    take("texgen", seen, tex_grid, grid.texgen_poses, tex_locs)
    take("eval-seen", seen, tex_grid, grid.eval_poses, eval_seen_locs)
    take("eval-unseen", unseen, tex_grid, grid.eval_poses, eval_unseen_locs)
    return plan


def background_plate(location: int, image_size, seed: int) -> np.ndarray:
    """Flat or vertical-gradient plate, fixed per (seed, location)."""
    rng = np.random.default_rng([seed, 104729, location])
    h, w = image_size
    top = rng.uniform(0.05, 0.95, size=3)
    if rng.uniform() < 0.5:
        return np.broadcast_to(top, (h, w, 3)).copy()
    bottom = rng.uniform(0.05, 0.95, size=3)
    t = np.linspace(0.0, 1.0, h)[:, None, None]
    return np.broadcast_to((1 - t) * top + t * bottom, (h, w, 3)).copy()


class FragmentCache:
    """Memoizes rasterizer fragments by pose; geometry never changes within a run."""

    def __init__(self, mesh: Mesh, image_size, fov=DEFAULT_FOV):
        self.mesh = mesh
        self.image_size = tuple(image_size)
        self.fov = fov
        self._store = {}

    def __call__(self, pose: CameraPose) -> Fragments:
        key = (pose.azimuth, pose.elevation, pose.distance, pose.look_at)
        if key not in self._store:
            self._store[key] = rasterize_fragments(self.mesh, pose, self.image_size, self.fov)
        return self._store[key]


def render_vehicle(fragments: Fragments, texture: TextureMap | np.ndarray, weather: WeatherParams,
                   sun_azimuth=DEFAULT_SUN_AZIMUTH) -> np.ndarray:
    """Oracle ("photo-realistic") render of the textured car, zero off-vehicle."""
    import torch

    texels = texture.texels if isinstance(texture, TextureMap) else np.asarray(texture, dtype=np.float64)
    taps = bilinear_taps(fragments, texels.shape[:2])
    with torch.no_grad():
        color = sample_texture(torch.from_numpy(texels), taps).numpy()
    return env_oracle((color, fragments), weather, sun_azimuth)


def generate_dataset(mesh: Mesh, base_texture: TextureMap | None, grid: GridConfig, seed: int,
                     out_dir, config_hash: str | None = None):
    """Render every planned sample, write PNGs and ``manifest.json`` under ``out_dir``.

    EFE splits always use a white car (the unpainted reference); the other splits
    use ``base_texture`` (white when None). Samples whose vehicle is fully outside
    the frame are dropped.

    Returns:
        The manifest dict that was written.
    """
    plan = plan_samples(grid, seed)
    if not plan:
        raise ValueError("dataset grid has zero points")
    out_dir = Path(out_dir)
    white = TextureMap.solid((1.0, 1.0, 1.0), (8, 8))
    base = base_texture if base_texture is not None else white
    cache = FragmentCache(mesh, grid.image_size, grid.fov)
    records = []
    dropped = 0
    for split in grid.splits:
        (out_dir / split).mkdir(parents=True, exist_ok=True)
    for index, item in enumerate(plan):
        frags = cache(item["pose"])
        sil = frags.face_index >= 0
        if not sil.any():
            dropped += 1
            continue
        texture = white if item["split"].startswith("efe") else base
        vehicle = render_vehicle(frags, texture, item["weather"], item["sun_azimuth"])
        m = (~sil).astype(np.float64)
        plate = background_plate(item["location"], grid.image_size, seed)
        i_in = vehicle + plate * m[..., None]
        sid = f"{index:05d}"
        image_rel = f"{item['split']}/{sid}.png"
        mask_rel = f"{item['split']}/{sid}_mask.png"
        save_png(i_in, out_dir / image_rel)
        Image.fromarray(m.astype(bool)).save(out_dir / mask_rel, format="PNG")
        records.append({
            "id": sid,
            "split": item["split"],
            "image": image_rel,
            "mask": mask_rel,
            "box": list(gt_box_from_mask(m)),
            "pose": item["pose"].to_dict(),
            "weather": item["weather"].to_dict(),
            "location": int(item["location"]),
            "sun_azimuth": item["sun_azimuth"],
        })
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": int(seed),
        "config_hash": config_hash or hash_config({"grid": grid.to_dict(), "seed": seed}),
        "grid": grid.to_dict(),
        "dropped": dropped,
        "records": records,
    }
    write_json(manifest, out_dir / "manifest.json")
    return manifest


def hash_config(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# --------------------------------------------------------------------------- #
# Loading
# --------------------------------------------------------------------------- #

def read_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT or manifest.get("version") != MANIFEST_VERSION:
        raise InvariantViolationError(f"{path}: unsupported manifest format/version")
    return manifest


def load_manifest(path, split: str | None = None):
    """Yield validated ``SceneSample`` objects, optionally only those tagged ``split``."""
    path = Path(path)
    manifest = read_manifest(path)
    root = path.parent
    for rec in manifest["records"]:
        if split is not None and rec["split"] != split:
            continue
        yield _load_record(root, rec)


def _load_record(root: Path, rec: dict) -> SceneSample:
    sid = rec.get("id", "?")
    image_path, mask_path = root / rec["image"], root / rec["mask"]
    for p in (image_path, mask_path):
        if not p.exists():
            raise FileNotFoundError(f"sample {sid}: missing file {p}")
    with Image.open(image_path) as img:
        i_in = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    with Image.open(mask_path) as img:
        if img.mode == "1":
            m = np.asarray(img, dtype=np.float64)
        else:
            raw = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
            if not np.all((raw == 0) | (raw == 1)):
                raise InvariantViolationError(f"sample {sid}: mask is not binary")
            m = raw
    if m.shape != i_in.shape[:2]:
        raise InvariantViolationError(f"sample {sid}: mask/image shapes differ")
    box = tuple(int(v) for v in rec["box"])
    h, w = m.shape
    x1, y1, x2, y2 = box
    if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
        raise InvariantViolationError(f"sample {sid}: gt box {box} outside image bounds {(w, h)}")
    try:
        tight = gt_box_from_mask(m)
    except DegenerateSampleError:
        raise InvariantViolationError(f"sample {sid}: mask has no vehicle pixels") from None
    if tight != box:
        raise InvariantViolationError(f"sample {sid}: gt box {box} is not the tight mask box {tight}")
    return SceneSample(
        sample_id=sid, i_in=i_in, m=m, y=box,
        pose=CameraPose.from_dict(rec["pose"]), weather=WeatherParams.from_dict(rec["weather"]),
        split_tag=rec["split"], location=rec.get("location", 0),
        sun_azimuth=rec.get("sun_azimuth", DEFAULT_SUN_AZIMUTH),
    )


@dataclass
class SceneBatch:
    """A split held in memory as stacked arrays."""

    ids: list
    images: np.ndarray   # (N, H, W, 3)
    masks: np.ndarray    # (N, H, W)
    boxes: np.ndarray    # (N, 4)
    poses: list
    weathers: list
    sun_azimuths: list
    meta: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def fg_bg(self):
        m3 = self.masks[..., None]
        return self.images * (1 - m3), self.images * m3

    def axis_values(self, axis):
        getters = {
            "azimuth": lambda i: self.poses[i].azimuth,
            "elevation": lambda i: self.poses[i].elevation,
            "distance": lambda i: self.poses[i].distance,
            "fog_density": lambda i: self.weathers[i].fog_density,
            "sun_altitude": lambda i: self.weathers[i].sun_altitude,
        }
        if axis not in getters:
            raise ValueError(f"unknown axis '{axis}'; choose from {sorted(getters)}")
        return [getters[axis](i) for i in range(len(self))]


def load_split(path, split: str) -> SceneBatch:
    path = Path(path)
    manifest = read_manifest(path)
    recs = {r["id"]: r for r in manifest["records"]}
    samples = list(load_manifest(path, split))
    if not samples:
        raise ValueError(f"split '{split}' is empty in {path}")
    return SceneBatch(
        ids=[s.sample_id for s in samples],
        images=np.stack([s.i_in for s in samples]),
        masks=np.stack([s.m for s in samples]),
        boxes=np.array([s.y for s in samples], dtype=np.float64),
        poses=[s.pose for s in samples],
        weathers=[s.weather for s in samples],
        sun_azimuths=[s.sun_azimuth for s in samples],
        meta=[recs[s.sample_id] for s in samples],
    )


def build_efe_pairs(batch: SceneBatch, cache: FragmentCache, colors) -> EFEPairs:
    """Pair each white-car reference with oracle renders of the car in ``colors``."""
    colors = np.asarray(colors, dtype=np.float64)
    x_ref, _ = batch.fg_bg()
    targets = np.zeros((len(batch), len(colors), *batch.images.shape[1:]), dtype=np.float32)
    sil = 1.0 - batch.masks
    for i, (pose, weather, sun_az) in enumerate(zip(batch.poses, batch.weathers, batch.sun_azimuths)):
        frags = cache(pose)
        if not np.array_equal(frags.silhouette, sil[i]):
            raise InvariantViolationError(f"sample {batch.ids[i]}: stored mask disagrees with rasterizer")
        for j, c in enumerate(colors):
            targets[i, j] = env_oracle((frags.silhouette[..., None] * c, frags), weather, sun_az)
    return EFEPairs(
        x_ref=x_ref.astype(np.float32),
        silhouette=sil.astype(np.float32),
        colors=colors.astype(np.float32),
        targets=targets,
        distance=np.array([p.distance for p in batch.poses]),
    )
