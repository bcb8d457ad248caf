"""Mesh loading, camera setup and hard z-buffer rasterization with UV texturing.

Geometry is never differentiated. Rasterization produces per-pixel fragments
(face id, UV, depth, normal) with numpy; texturing is a bilinear gather done in
torch so that gradients reach the texels exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, PngImagePlugin

from .exceptions import MalformedMeshError, ShapeMismatchError

DEFAULT_FOV = 45.0
DEFAULT_IMAGE_SIZE = (128, 128)
NEAR_PLANE = 0.1
FAR_PLANE = 1000.0


@dataclass
class Mesh:
    """Triangle mesh with per-face-vertex UV coordinates.

    Attributes:
        vertices: (V, 3) float array in meters.
        faces: (F, 3) int array of vertex indices.
        uv_coords: (F, 3, 2) float array in [0, 1].
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv_coords: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.uv_coords = np.asarray(self.uv_coords, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3 or len(self.vertices) < 3:
            raise MalformedMeshError("mesh needs at least 3 vertices of shape (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3 or len(self.faces) < 1:
            raise MalformedMeshError("mesh needs at least 1 triangular face")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise MalformedMeshError("face index out of range")
        if self.uv_coords.shape != (len(self.faces), 3, 2):
            raise MalformedMeshError(
                f"uv_coords must have shape {(len(self.faces), 3, 2)}, got {self.uv_coords.shape}"
            )
        if self.uv_coords.min() < 0.0 or self.uv_coords.max() > 1.0:
            raise MalformedMeshError("uv coordinates must lie in [0, 1]")

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)


@dataclass
class TextureMap:
    """UV texture, (H_t, W_t, 3) texels in [0, 1]."""

    texels: np.ndarray

    def __post_init__(self):
        self.texels = np.asarray(self.texels, dtype=np.float64)
        if self.texels.ndim != 3 or self.texels.shape[2] != 3:
            raise ShapeMismatchError(f"texture must be (H, W, 3), got {self.texels.shape}")
        if self.texels.min() < 0.0 or self.texels.max() > 1.0:
            raise ValueError("texel values must lie in [0, 1]")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.texels.shape[0], self.texels.shape[1]

    @classmethod
    def solid(cls, color, resolution=(64, 64)) -> "TextureMap":
        texels = np.empty((*resolution, 3))
        texels[:] = np.asarray(color, dtype=np.float64)
        return cls(texels)

    @classmethod
    def random(cls, resolution=(64, 64), seed=0) -> "TextureMap":
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(0.0, 1.0, size=(*resolution, 3)))


@dataclass(frozen=True)
class CameraPose:
    """Camera on a sphere around ``look_at``; angles in degrees, world is z-up."""

    azimuth: float
    elevation: float
    distance: float
    look_at: tuple[float, float, float] | None = None

    def __post_init__(self):
        if not self.distance > 0:
            raise ValueError(f"camera distance must be > 0, got {self.distance}")
        if not 0.0 <= self.elevation <= 90.0:
            raise ValueError(f"elevation must lie in [0, 90], got {self.elevation}")
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)
        if self.look_at is not None:
            object.__setattr__(self, "look_at", tuple(float(c) for c in self.look_at))

    def target(self, mesh: Mesh | None = None) -> np.ndarray:
        if self.look_at is not None:
            return np.asarray(self.look_at, dtype=np.float64)
        if mesh is None:
            return np.zeros(3)
        return mesh.centroid

    def eye(self, mesh: Mesh | None = None) -> np.ndarray:
        az, el = math.radians(self.azimuth), math.radians(self.elevation)
        offset = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        return self.target(mesh) + self.distance * offset

    def to_dict(self) -> dict:
        out = {"azimuth": self.azimuth, "elevation": self.elevation, "distance": self.distance}
        if self.look_at is not None:
            out["look_at"] = list(self.look_at)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        look_at = d.get("look_at")
        return cls(d["azimuth"], d["elevation"], d["distance"], tuple(look_at) if look_at else None)


@dataclass
class Fragments:
    """Per-pixel rasterization result; ``face_index`` is -1 where nothing is drawn."""

    face_index: np.ndarray
    uv: np.ndarray
    depth: np.ndarray
    normal: np.ndarray

    @property
    def silhouette(self) -> np.ndarray:
        return (self.face_index >= 0).astype(np.float64)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.face_index.shape


@dataclass
class RenderOutput:
    color: np.ndarray
    silhouette: np.ndarray
    depth: np.ndarray
    fragments: Fragments = field(repr=False)


# --------------------------------------------------------------------------- #
# OBJ / PNG I/O
# --------------------------------------------------------------------------- #

def load_mesh(path) -> Mesh:
    """Read the ``v`` / ``vt`` / ``f`` subset of Wavefront OBJ.

    Faces with more than three corners are fan-triangulated. Every face corner
    must carry a texture index. UVs outside [0, 1] wrap to their fractional part.
    """
    path = Path(path)
    vertices, texcoords, faces, face_uvs = [], [], [], []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            try:
                if tag == "v":
                    vertices.append([float(x) for x in rest[:3]])
                    if len(rest) < 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif tag == "vt":
                    if len(rest) < 2:
                        raise ValueError("texture coordinate needs 2 values")
                    texcoords.append([float(x) for x in rest[:2]])
                elif tag == "f":
                    corners = [_parse_corner(tok, len(vertices), len(texcoords)) for tok in rest]
                    if len(corners) < 3:
                        raise ValueError("face needs at least 3 corners")
                    for k in range(1, len(corners) - 1):
                        tri = (corners[0], corners[k], corners[k + 1])
                        faces.append([c[0] for c in tri])
                        face_uvs.append([texcoords[c[1]] for c in tri])
            except (ValueError, IndexError) as err:
                raise MalformedMeshError(f"{path}:{lineno}: {err}") from None
    if not faces:
        raise MalformedMeshError(f"{path}: no faces")
    uv = np.asarray(face_uvs, dtype=np.float64)
    uv = np.where((uv >= 0.0) & (uv <= 1.0), uv, uv - np.floor(uv))
    return Mesh(np.asarray(vertices), np.asarray(faces), uv)


def _parse_corner(token: str, n_vertices: int, n_texcoords: int) -> tuple[int, int]:
    parts = token.split("/")
    if len(parts) < 2 or not parts[1]:
        raise ValueError(f"face corner '{token}' has no texture index")
    vi, ti = int(parts[0]), int(parts[1])
    vi = vi - 1 if vi > 0 else n_vertices + vi if vi < 0 else None
    ti = ti - 1 if ti > 0 else n_texcoords + ti if ti < 0 else None
    if vi is None or ti is None:
        raise ValueError(f"index 0 is invalid in OBJ (1-based) corner '{token}'")
    if not 0 <= vi < n_vertices:
        raise ValueError(f"face references missing vertex in '{token}'")
    if not 0 <= ti < n_texcoords:
        raise ValueError(f"face references missing vt in '{token}'")
    return vi, ti


def save_mesh(mesh: Mesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    for u, v in mesh.uv_coords.reshape(-1, 2):
        lines.append(f"vt {u:.9g} {v:.9g}")
    for i, face in enumerate(mesh.faces):
        corners = [f"{face[k] + 1}/{3 * i + k + 1}" for k in range(3)]
        lines.append("f " + " ".join(corners))
    Path(path).write_text("\n".join(lines) + "\n")


def load_texture(path) -> TextureMap:
    with Image.open(path) as img:
        return TextureMap(np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0)


def save_texture(texture: TextureMap | np.ndarray, path, metadata: dict | None = None) -> None:
    texels = texture.texels if isinstance(texture, TextureMap) else np.asarray(texture)
    save_png(texels, path, metadata)


def save_png(image: np.ndarray, path, metadata: dict | None = None) -> None:
    data = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    info = None
    if metadata:
        info = PngImagePlugin.PngInfo()
        for key in sorted(metadata):
            info.add_text(key, str(metadata[key]))
    Image.fromarray(data).save(path, format="PNG", pnginfo=info)


# --------------------------------------------------------------------------- #
# Camera
# --------------------------------------------------------------------------- #

def camera_matrices(pose: CameraPose, image_size=DEFAULT_IMAGE_SIZE, fov_deg=DEFAULT_FOV, mesh=None):
    """Right-handed look-at view matrix and OpenGL-style perspective projection.

    ``fov_deg`` is the vertical field of view. The camera looks down its -z axis.

    Returns:
        (view, projection): two 4x4 float64 arrays.
    """
    h, w = image_size
    if h <= 0 or w <= 0:
        raise ShapeMismatchError(f"image size must be positive, got {image_size}")
    if not 0.0 < fov_deg < 180.0:
        raise ValueError(f"fov must lie in (0, 180), got {fov_deg}")
    if not pose.distance > 0:
        raise ValueError("degenerate camera pose: distance must be > 0")

    eye = pose.eye(mesh)
    target = pose.target(mesh)
    forward = target - eye
    forward /= np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 1.0 - 1e-9:
        az = math.radians(pose.azimuth)
        up = np.array([-math.cos(az), -math.sin(az), 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)

    view = np.eye(4)
    view[0, :3], view[1, :3], view[2, :3] = right, true_up, -forward
    view[:3, 3] = -view[:3, :3] @ eye

    f = 1.0 / math.tan(math.radians(fov_deg) / 2.0)
    aspect = w / h
    n, fa = NEAR_PLANE, FAR_PLANE
    proj = np.zeros((4, 4))
    proj[0, 0] = f / aspect
    proj[1, 1] = f
    proj[2, 2] = (fa + n) / (n - fa)
    proj[2, 3] = 2.0 * fa * n / (n - fa)
    proj[3, 2] = -1.0
    return view, proj


# --------------------------------------------------------------------------- #
# Rasterization
# --------------------------------------------------------------------------- #

def rasterize_fragments(mesh: Mesh, pose: CameraPose, image_size=DEFAULT_IMAGE_SIZE,
                        fov_deg=DEFAULT_FOV) -> Fragments:
    """Z-buffered hard rasterization into per-pixel fragments.

    Barycentrics are perspective-correct. Faces with any vertex behind the near
    plane are skipped. Back faces are drawn; normals are flipped toward the camera.
    """
    h, w = image_size
    view, proj = camera_matrices(pose, image_size, fov_deg, mesh)
    eye = pose.eye(mesh)

    verts_h = np.concatenate([mesh.vertices, np.ones((len(mesh.vertices), 1))], axis=1)
    cam = verts_h @ view.T
    clip = cam @ proj.T
    ndc = clip[:, :3] / clip[:, 3:4]
    px = (ndc[:, 0] + 1.0) * 0.5 * w
    py = (1.0 - ndc[:, 1]) * 0.5 * h
    zview = -cam[:, 2]

    tri_v = mesh.vertices[mesh.faces]
    normals = np.cross(tri_v[:, 1] - tri_v[:, 0], tri_v[:, 2] - tri_v[:, 0])
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, norms, out=np.zeros_like(normals), where=norms > 0)
    to_eye = eye - tri_v.mean(axis=1)
    normals *= np.where(np.einsum("ij,ij->i", normals, to_eye) < 0, -1.0, 1.0)[:, None]

    zbuf = np.full((h, w), np.inf)
    face_index = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))

    for fi, (a, b, c) in enumerate(mesh.faces):
        z = zview[[a, b, c]]
        if np.any(z <= NEAR_PLANE):
            continue
        xs, ys = px[[a, b, c]], py[[a, b, c]]
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if abs(area) < 1e-12:
            continue
        x0 = max(int(math.ceil(xs.min() - 0.5)), 0)
        x1 = min(int(math.floor(xs.max() - 0.5)), w - 1)
        y0 = max(int(math.ceil(ys.min() - 0.5)), 0)
        y1 = min(int(math.floor(ys.max() - 0.5)), h - 1)
        if x0 > x1 or y0 > y1:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
        l0 = ((xs[1] - gx) * (ys[2] - gy) - (xs[2] - gx) * (ys[1] - gy)) / area
        l1 = ((xs[2] - gx) * (ys[0] - gy) - (xs[0] - gx) * (ys[2] - gy)) / area
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        w0, w1, w2 = l0 / z[0], l1 / z[1], l2 / z[2]
        inv_z = w0 + w1 + w2
        depth = 1.0 / inv_z
        region = zbuf[y0:y1 + 1, x0:x1 + 1]
        closer = inside & (depth < region)
        if not closer.any():
            continue
        region[closer] = depth[closer]
        face_index[y0:y1 + 1, x0:x1 + 1][closer] = fi
        pc = np.stack([w0, w1, w2], axis=-1) / inv_z[..., None]
        bary[y0:y1 + 1, x0:x1 + 1][closer] = pc[closer]

    covered = face_index >= 0
    uv = np.zeros((h, w, 2))
    normal = np.zeros((h, w, 3))
    if covered.any():
        fids = face_index[covered]
        uv[covered] = np.einsum("nk,nkc->nc", bary[covered], mesh.uv_coords[fids])
        normal[covered] = normals[fids]
    return Fragments(face_index=face_index, uv=uv, depth=zbuf, normal=normal)


@dataclass
class BilinearTaps:
    """Flat texel indices and weights of the four bilinear taps per visible pixel."""

    pixel_index: torch.Tensor  # (N,) flat pixel ids into H*W
    texel_index: torch.Tensor  # (N, 4) flat texel ids into H_t*W_t
    weight: torch.Tensor       # (N, 4)
    image_size: tuple[int, int]
    texture_size: tuple[int, int]


def bilinear_taps(fragments: Fragments, texture_size, dtype=torch.float64) -> BilinearTaps:
    """Precompute bilinear sampling taps (repeat wrap) for the covered pixels.

    Texel (r, c) has its center at u = (c + 0.5) / W_t, v = 1 - (r + 0.5) / H_t.
    """
    th, tw = texture_size
    covered = fragments.face_index.reshape(-1) >= 0
    pixel_index = np.nonzero(covered)[0]
    uv = fragments.uv.reshape(-1, 2)[pixel_index]
    x = uv[:, 0] * tw - 0.5
    y = (1.0 - uv[:, 1]) * th - 0.5
    x0, y0 = np.floor(x), np.floor(y)
    fx, fy = x - x0, y - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
    xa, xb = np.mod(x0, tw), np.mod(x0 + 1, tw)
    ya, yb = np.mod(y0, th), np.mod(y0 + 1, th)
    idx = np.stack([ya * tw + xa, ya * tw + xb, yb * tw + xa, yb * tw + xb], axis=1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return BilinearTaps(
        pixel_index=torch.from_numpy(pixel_index),
        texel_index=torch.from_numpy(idx),
        weight=torch.from_numpy(wts).to(dtype),
        image_size=fragments.image_size,
        texture_size=(th, tw),
    )


def sample_texture(texels: torch.Tensor, taps: BilinearTaps) -> torch.Tensor:
    """Differentiable bilinear texturing: (H_t, W_t, 3) texels -> (H, W, 3) image.

    Pixels outside the silhouette are exactly zero.
    """
    th, tw = taps.texture_size
    if tuple(texels.shape) != (th, tw, 3):
        raise ShapeMismatchError(f"texels {tuple(texels.shape)} do not match taps {(th, tw, 3)}")
    flat = texels.reshape(-1, 3)
    gathered = flat[taps.texel_index]  # (N, 4, 3)
    colors = (gathered * taps.weight.to(texels.dtype)[..., None]).sum(dim=1)
    h, w = taps.image_size
    out = texels.new_zeros(h * w, 3)
    out = out.index_copy(0, taps.pixel_index, colors)
    return out.reshape(h, w, 3)


def rasterize(mesh: Mesh, texture: TextureMap, pose: CameraPose, image_size=DEFAULT_IMAGE_SIZE,
              fov_deg=DEFAULT_FOV) -> RenderOutput:
    """Render ``mesh`` with ``texture`` from ``pose`` into color, silhouette and depth."""
    h, w = image_size
    if h <= 0 or w <= 0:
        raise ShapeMismatchError(f"zero-area image {image_size}")
    fragments = rasterize_fragments(mesh, pose, image_size, fov_deg)
    taps = bilinear_taps(fragments, texture.resolution)
    with torch.no_grad():
        color = sample_texture(torch.from_numpy(texture.texels), taps).numpy()
    return RenderOutput(color=color, silhouette=fragments.silhouette, depth=fragments.depth,
                        fragments=fragments)


def texture_gradient(mesh: Mesh, texture: TextureMap, pose: CameraPose, image_size,
                     upstream_grad: np.ndarray, fov_deg=DEFAULT_FOV) -> np.ndarray:
    """Gradient of ``sum(color * upstream_grad)`` with respect to the texels."""
    upstream_grad = np.asarray(upstream_grad, dtype=np.float64)
    if upstream_grad.shape != (*image_size, 3):
        raise ShapeMismatchError(
            f"upstream gradient {upstream_grad.shape} does not match image {(*image_size, 3)}"
        )
    fragments = rasterize_fragments(mesh, pose, image_size, fov_deg)
    taps = bilinear_taps(fragments, texture.resolution)
    texels = torch.tensor(texture.texels, dtype=torch.float64, requires_grad=True)
    color = sample_texture(texels, taps)
    (color * torch.from_numpy(upstream_grad)).sum().backward()
    return texels.grad.numpy().copy()


# --------------------------------------------------------------------------- #
# Built-in vehicle
# --------------------------------------------------------------------------- #

def _box_quads(x0, x1, y0, y1, z0, z1, skip=()):
    quads = {
        "top": [(x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1)],
        "bottom": [(x0, y0, z0), (x0, y1, z0), (x1, y1, z0), (x1, y0, z0)],
        "front": [(x1, y0, z0), (x1, y1, z0), (x1, y1, z1), (x1, y0, z1)],
        "back": [(x0, y1, z0), (x0, y0, z0), (x0, y0, z1), (x0, y1, z1)],
        "left": [(x0, y1, z0), (x1, y1, z0), (x1, y1, z1), (x0, y1, z1)],
        "right": [(x1, y0, z0), (x0, y0, z0), (x0, y0, z1), (x1, y0, z1)],
    }
    return [q for name, q in quads.items() if name not in skip]


def make_car_mesh(texture_size: int = 64, atlas_cells: int = 4) -> Mesh:
    """A low-poly sedan (body box plus a sloped cabin), z-up, centered at the origin in x/y.

    Every quad gets its own atlas cell, inset by one texel so bilinear taps never
    bleed into a neighbouring cell.
    """
    body = _box_quads(-1.8, 1.8, -0.8, 0.8, 0.25, 0.95)
    cx0, cx1, tx0, tx1, zb, zt, yh = -1.0, 1.1, -0.7, 0.5, 0.95, 1.45, 0.72
    cabin = [
        [(tx0, -yh, zt), (tx1, -yh, zt), (tx1, yh, zt), (tx0, yh, zt)],  # roof
        [(cx1, -yh, zb), (cx1, yh, zb), (tx1, yh, zt), (tx1, -yh, zt)],  # windshield
        [(cx0, yh, zb), (cx0, -yh, zb), (tx0, -yh, zt), (tx0, yh, zt)],  # rear window
        [(cx0, yh, zb), (cx1, yh, zb), (tx1, yh, zt), (tx0, yh, zt)],    # left
        [(cx1, -yh, zb), (cx0, -yh, zb), (tx0, -yh, zt), (tx1, -yh, zt)],  # right
    ]
    quads = body + cabin
    if len(quads) > atlas_cells * atlas_cells:
        raise ValueError("atlas too small for the car quads")

    vertices, faces, uvs = [], [], []
    inset = 1.0 / texture_size
    cell = 1.0 / atlas_cells
    for qi, quad in enumerate(quads):
        r, c = divmod(qi, atlas_cells)
        u0, u1 = c * cell + inset, (c + 1) * cell - inset
        v1, v0 = 1.0 - r * cell - inset, 1.0 - (r + 1) * cell + inset
        corner_uv = [(u0, v0), (u1, v0), (u1, v1), (u0, v1)]
        base = len(vertices)
        vertices.extend(quad)
        for tri in ((0, 1, 2), (0, 2, 3)):
            faces.append([base + k for k in tri])
            uvs.append([corner_uv[k] for k in tri])
    return Mesh(np.asarray(vertices), np.asarray(faces), np.asarray(uvs))
