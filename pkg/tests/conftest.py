import numpy as np
import pytest
import torch

from uvcamo.dataset import GridConfig, generate_dataset
from uvcamo.mesh_render import Mesh, make_car_mesh


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def car():
    return make_car_mesh()


def quad_mesh(size=1.0, z=0.0, uv=((0, 0), (1, 0), (1, 1), (0, 1))):
    """Axis-aligned square in the z = ``z`` plane facing +z, two triangles."""
    s = size / 2
    verts = [(-s, -s, z), (s, -s, z), (s, s, z), (-s, s, z)]
    faces = [(0, 1, 2), (0, 2, 3)]
    uvs = [[uv[0], uv[1], uv[2]], [uv[0], uv[2], uv[3]]]
    return Mesh(np.array(verts), np.array(faces), np.array(uvs, dtype=float))


@pytest.fixture
def quad():
    return quad_mesh()


@pytest.fixture(scope="session")
def tiny_grid():
    return GridConfig(
        image_size=(32, 32), efe_train_poses=2, efe_test_poses=2, texgen_poses=2, eval_poses=2,
        seen_sun_altitudes=(-30.0, 60.0), seen_fog_densities=(0.0, 50.0),
        unseen_sun_altitudes=(0.0,), unseen_fog_densities=(10.0, 40.0),
        texgen_locations=2, eval_locations=2,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_grid):
    out = tmp_path_factory.mktemp("tiny_ds")
    manifest = generate_dataset(make_car_mesh(), None, tiny_grid, seed=3, out_dir=out)
    return out / "manifest.json", manifest
