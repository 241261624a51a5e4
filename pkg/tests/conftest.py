import pytest

from ucwave.services.config import ExperimentConfig, GeometryConfig
from ucwave.services.forms import StabilizationWeights
from ucwave.services.geometry import derive_params
from ucwave.services.mesh import build_mesh
from ucwave.services.spaces import SlabSpace


@pytest.fixture
def geometry_cfg():
    return GeometryConfig()


@pytest.fixture
def params(geometry_cfg):
    return derive_params(geometry_cfg)


@pytest.fixture
def forward_params():
    return derive_params(GeometryConfig(time_interval="forward", T=2.0))


@pytest.fixture
def small_mesh(params):
    # n_x = 8, N = 4 on (-T, T)
    return build_mesh(params, 8, 4)


@pytest.fixture
def small_space(small_mesh):
    return SlabSpace(small_mesh, 1, 1)


@pytest.fixture
def weights():
    return StabilizationWeights(gamma=1e-2, s=1)


@pytest.fixture
def quick_cfg():
    """Two coarse levels; enough for report plumbing."""
    return ExperimentConfig().with_updates(mesh={"n_x": 8, "levels": 2})


@pytest.fixture
def two_slab_space(params):
    return SlabSpace(build_mesh(params, 4, 2), 1, 1)


@pytest.fixture
def single_slab_mesh():
    # forward interval with minimal T: h_t / h_x = 3.37 at n_x = 4
    p = derive_params(GeometryConfig(time_interval="forward"))
    return build_mesh(p, 4, 1)
