"""
noise.py

Data perturbations delta_u on omega_T, scaled to ||delta_u||_{L2(omega_T)} = h^theta.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ucwave.services.config import NoiseConfig
from ucwave.services.errors import NoiseError, UsageError
from ucwave.services.forms import assemble_data_mass
from ucwave.services.spaces import SlabSpace, interpolate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"
    theta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "smooth", "worst_mode"):
            raise UsageError(f"unknown noise kind {self.kind!r}")
        if not 1.0 <= self.theta <= 2.0:
            raise UsageError(f"theta must lie in [1, 2], got {self.theta}")

    @classmethod
    def from_config(cls, cfg: NoiseConfig) -> "NoiseSpec":
        return cls(cfg.kind, cfg.theta, cfg.seed)


def omega_dofs(space: SlabSpace) -> np.ndarray:
    """Boolean mask of the dofs whose spatial node lies in the closure of omega."""
    r = space.mesh.params.r
    in_omega = space.node_coords <= -r + 1e-12
    return np.tile(in_omega, space.mesh.N * space.n_time)


def data_norm(space: SlabSpace, v: np.ndarray, data_mass=None) -> float:
    """||v||_{L2(omega_T)} of a u1 coefficient vector."""
    if data_mass is None:
        data_mass = assemble_data_mass(space)
    return math.sqrt(max(float(v @ (data_mass @ v)), 0.0))


def correlation(space: SlabSpace, a: np.ndarray, b: np.ndarray) -> float:
    """|(a, b)_{omega_T}| / (||a|| ||b||)."""
    mass = assemble_data_mass(space)
    na, nb = data_norm(space, a, mass), data_norm(space, b, mass)
    if na == 0.0 or nb == 0.0:
        return float("nan")
    return abs(float(a @ (mass @ b))) / (na * nb)


def make_noise(spec: NoiseSpec, space: SlabSpace, u_exact: Callable, h: float,
               mode_u1: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Noise coefficients on the u1 field, supported on omega_T dofs.

    smooth:     Pi_h(u cos(2 pi x))
    worst_mode: the u1 component of the smallest eigenpair
    """
    if spec.kind == "none":
        return np.zeros(space.global_dof_count)

    if spec.kind == "smooth":
        shape = interpolate(space, lambda t, x: u_exact(t, x) * np.cos(2.0 * np.pi * x))
    else:
        if mode_u1 is None:
            raise UsageError("worst_mode noise needs the eigenmode of the level")
        shape = np.array(mode_u1, dtype=float)
        # eigenvectors carry an arbitrary sign
        i = int(np.argmax(np.abs(shape)))
        if shape[i] < 0.0:
            shape = -shape

    shape = np.where(omega_dofs(space), shape, 0.0)
    norm = data_norm(space, shape)
    if not np.isfinite(norm) or norm <= 1e-300:
        raise NoiseError(f"{spec.kind} noise shape vanishes on omega_T")

    logger.debug("%s noise scaled from %.3e to h^theta = %.3e", spec.kind, norm, h ** spec.theta)
    return shape * (h ** spec.theta / norm)
