"""Full-coverage adversarial camouflage for vehicles under varied weather.

The pipeline: a numpy z-buffer rasterizer paints a UV texture onto a car mesh,
a learned environment feature extractor adds weather (lighting and fog), the
result is composited into a scene, and the texture is optimized so a frozen
grid detector misses the car.
"""
from .config import ConfigError, PipelineConfig, load_config
from .dataset import GridConfig, SceneBatch, SceneSample, generate_dataset, gt_box_from_mask, load_manifest, split_fg_bg
from .detect_loss import (
    DetectionSet, GridDetectorNet, ToyDetector, attack_loss, detection_score, iou, smooth_loss, total_loss,
)
from .environment import (
    EnvFeatureMaps, EnvironmentFeatureExtractor, WeatherParams, area_weight, efe_loss, env_oracle, fuse,
)
from .eval_report import EvalResult, ap_at_05, emit_report, evaluate_texture
from .exceptions import (
    DegenerateSampleError, InvariantViolationError, MalformedMeshError, NonFiniteLossError,
    ShapeMismatchError, TrainingFailedError, UvcamoError,
)
from .mesh_render import (
    CameraPose, Fragments, Mesh, RenderOutput, TextureMap, load_mesh, load_texture, make_car_mesh, rasterize,
    save_mesh, save_texture, texture_gradient,
)
from .optimize import CamouflageGenerator, composite

__version__ = "0.1.0"
