"""
measures.py

Region-restricted L2 error norms and convergence rates.

Responsibilities:
- Subdivision quadrature of the space-time cylinder with indicator
  masking for the curved super-level sets of psi
- Error norms of a field against an exact solution on several regions
- EOC between consecutive levels and least-squares order fits
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from pytools.convergence import EOCRecorder, estimate_order_of_convergence

from ucwave.services.errors import UsageError
from ucwave.services.geometry import Region, region_contains
from ucwave.services.mesh import SpaceTimeMesh
from ucwave.services.reference import gauss_legendre

logger = logging.getLogger(__name__)

# Gauss points per direction on every subcell
SUBCELL_POINTS = 3


@dataclass(frozen=True, eq=False)
class SubdivisionQuadrature:
    """
    Every space-time cell split into n_sub x n_sub subcells with a 3 x 3
    Gauss rule on each. Points are interior to their slab.
    """

    mesh: SpaceTimeMesh
    n_sub: int
    t: np.ndarray
    x: np.ndarray
    w: np.ndarray
    slab: np.ndarray

    @classmethod
    def build(cls, mesh: SpaceTimeMesh, n_sub: int = 4) -> "SubdivisionQuadrature":
        if n_sub < 1:
            raise UsageError(f"n_sub must be at least 1, got {n_sub}")
        s, w = gauss_legendre(SUBCELL_POINTS)
        # local points of the subdivided unit interval
        local = ((np.arange(n_sub)[:, None] + s[None, :]) / n_sub).ravel()
        local_w = np.tile(w / n_sub, n_sub)

        t = (mesh.slabs[:, :1] + mesh.h_t * local[None, :]).ravel()
        wt = np.tile(mesh.h_t * local_w, mesh.N)
        x = (mesh.spatial_nodes[:-1, None] + mesh.h_x * local[None, :]).ravel()
        wx = np.tile(mesh.h_x * local_w, mesh.n_x)

        tt, xx = np.meshgrid(t, x, indexing="ij")
        slab = np.repeat(np.arange(mesh.N), local.size)
        return cls(
            mesh=mesh,
            n_sub=n_sub,
            t=tt.ravel(),
            x=xx.ravel(),
            w=np.outer(wt, wx).ravel(),
            slab=np.repeat(slab, x.size),
        )

    def mask(self, region: Region) -> np.ndarray:
        return region_contains(self.mesh.params, region, self.t, self.x)

    def measure(self, region: Region) -> float:
        return float(np.sum(self.w[self.mask(region)]))


def _values(f: Callable, t: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.broadcast_to(np.asarray(f(t, x), dtype=float), t.shape)


def error_norms(u_exact: Callable, field: Callable, regions: dict[str, Region],
                quad: SubdivisionQuadrature) -> dict[str, float]:
    """
    ||u_exact - field||_{L2(region)} for several named regions.

    The field is evaluated once; regions only change the mask.
    """
    diff2 = (_values(u_exact, quad.t, quad.x) - _values(field, quad.t, quad.x)) ** 2
    weighted = quad.w * diff2
    return {name: math.sqrt(float(np.sum(weighted[quad.mask(region)])))
            for name, region in regions.items()}


def error_norm(u_exact: Callable, field: Callable, region: Region,
               quad: SubdivisionQuadrature) -> float:
    return error_norms(u_exact, field, {"region": region}, quad)["region"]


def norms_by_slab(field: Callable, region: Region, quad: SubdivisionQuadrature) -> list[float]:
    """L2(region) norm of a field restricted to each time slab."""
    weighted = quad.w * _values(field, quad.t, quad.x) ** 2 * quad.mask(region)
    sums = np.bincount(quad.slab, weights=weighted, minlength=quad.mesh.N)
    return [math.sqrt(float(v)) for v in sums]


def eoc(errors: Sequence[Optional[float]], hs: Sequence[float]) -> list[Optional[float]]:
    """
    rate_i = log(e_i / e_{i+1}) / log(h_i / h_{i+1}).

    Pairs with a missing or non-positive error have no rate (None).
    """
    if len(errors) != len(hs) or len(hs) < 2:
        raise UsageError("eoc needs at least two levels with one error each")
    if any(b >= a for a, b in zip(hs, hs[1:])):
        raise UsageError("mesh sizes must be strictly decreasing")

    rates = []
    for (e0, e1), (h0, h1) in zip(zip(errors, errors[1:]), zip(hs, hs[1:])):
        if e0 is None or e1 is None or e0 <= 0.0 or e1 <= 0.0:
            rates.append(None)
        else:
            rates.append(math.log(e0 / e1) / math.log(h0 / h1))
    return rates


def fit_slope(hs: Sequence[float], errors: Sequence[Optional[float]], last: int = 3) -> float:
    """
    Least-squares slope of log(error) against log(h) over the finest levels.
    """
    pairs = [(h, e) for h, e in zip(hs, errors) if e is not None and e > 0.0][-last:]
    if len(pairs) < 2:
        return float("nan")
    h, e = np.array(pairs).T
    _, order = estimate_order_of_convergence(h, e)
    return float(order)


def eoc_table(hs: Sequence[float], errors: Sequence[Optional[float]], label: str) -> str:
    """Pretty-printed convergence table of one error column."""
    recorder = EOCRecorder()
    for h, e in zip(hs, errors):
        if e is not None and e > 0.0:
            recorder.add_data_point(h, e)
    if len(recorder.history) < 2:
        return f"{label}: not enough levels"
    return recorder.pretty_print(abscissa_label="h", error_label=label)
