"""
mesh.py

Tensor-product space-time mesh: uniform cells on Omega = (-R, 0) times
uniform time slabs I_n = (t_n, t_{n+1}).

The data-set boundary x = -r is required to be a mesh node, so every cell
lies either fully inside omega or fully outside of it.
"""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

import numpy as np

from ucwave.services.config import MeshConfig
from ucwave.services.errors import ConfigurationError, UsageError
from ucwave.services.geometry import WeightParams

logger = logging.getLogger(__name__)

# Admissible range for h_t / h_x ("|t_{n+1} - t_n| ~ h")
ASPECT_RANGE = (0.25, 4.0)


@dataclass(frozen=True, eq=False)
class SpaceTimeMesh:
    params: WeightParams
    spatial_nodes: np.ndarray
    cells: np.ndarray
    interior_facets: np.ndarray
    slabs: np.ndarray
    h_x: float
    h_t: float
    omega_cells: tuple[int, ...]

    @property
    def n_x(self) -> int:
        return self.cells.shape[0]

    @property
    def N(self) -> int:
        return self.slabs.shape[0]

    @property
    def h(self) -> float:
        # reported mesh width
        return self.h_x

    @property
    def time_nodes(self) -> np.ndarray:
        return np.append(self.slabs[:, 0], self.slabs[-1, 1])

    @property
    def slab_interfaces(self) -> np.ndarray:
        """Interior interface times t_1, ..., t_{N-1}."""
        return self.slabs[1:, 0]

    @property
    def omega_measure(self) -> float:
        return float(sum(self.spatial_nodes[c + 1] - self.spatial_nodes[c] for c in self.omega_cells))


def compatible_n_x(p: WeightParams) -> int:
    """
    Smallest n_x for which x = -r is a node of the uniform mesh on (-R, 0).
    """
    return Fraction((p.R - p.r) / p.R).limit_denominator(10_000).denominator


def build_mesh(p: WeightParams, mesh: Union[MeshConfig, int], N: Optional[int] = None) -> SpaceTimeMesh:
    """
    Build the uniform space-time mesh with n_x cells and N time slabs.

    mesh is either the mesh block of the config (its coarsest level) or
    n_x itself, in which case N is required.
    """
    if isinstance(mesh, MeshConfig):
        if N is not None:
            raise UsageError("N is taken from the mesh config; do not pass it twice")
        n_x, N = mesh.n_x, mesh.n_slabs
    else:
        if N is None:
            raise UsageError("build_mesh(p, n_x, N) needs the slab count N")
        n_x = mesh

    if n_x < 2 or N < 1:
        raise ConfigurationError(f"require n_x >= 2 and N >= 1, got n_x={n_x}, N={N}")

    # index of the node that has to sit on x = -r
    j_r = n_x * (p.R - p.r) / p.R
    if abs(j_r - round(j_r)) > 1e-9:
        raise ConfigurationError(
            f"x = -r = {-p.r} is not a node for n_x = {n_x}; "
            f"use an n_x divisible by {compatible_n_x(p)}"
        )
    j_r = int(round(j_r))

    nodes = np.linspace(-p.R, 0.0, n_x + 1)
    nodes[j_r] = -p.r
    cells = np.column_stack((np.arange(n_x), np.arange(1, n_x + 1)))
    h_x = p.R / n_x

    times = np.linspace(p.t_start, p.t_end, N + 1)
    slabs = np.column_stack((times[:-1], times[1:]))
    h_t = p.duration / N

    ratio = h_t / h_x
    if not ASPECT_RANGE[0] <= ratio <= ASPECT_RANGE[1]:
        raise ConfigurationError(
            f"h_t / h_x = {ratio:.3g} outside {ASPECT_RANGE}; choose N closer to "
            f"{int(round(p.duration / h_x))}"
        )

    logger.debug("mesh n_x=%d N=%d h_x=%.4g h_t=%.4g", n_x, N, h_x, h_t)
    return SpaceTimeMesh(
        params=p,
        spatial_nodes=nodes,
        cells=cells,
        interior_facets=np.arange(1, n_x),
        slabs=slabs,
        h_x=h_x,
        h_t=h_t,
        omega_cells=tuple(range(j_r)),
    )


def refine(mesh: SpaceTimeMesh) -> SpaceTimeMesh:
    """
    Uniform refinement: both n_x and N are doubled, coarse nodes are kept.
    """
    return build_mesh(mesh.params, 2 * mesh.n_x, 2 * mesh.N)
