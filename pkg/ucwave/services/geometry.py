"""
geometry.py

Carleman-weight geometry of the unique continuation problem (d = 1).

Responsibilities:
- Derive rho_0, rho_1, rho, delta and T from a GeometryConfig
- Evaluate the weight psi(t, x) = |x - y|^2 - (1 - eps) t^2
- Membership predicates for the data set, the super-level sets of psi
  (B, B_kappa, their complement) and the boundary set Gamma
- Runtime verification of the pseudoconvexity conditions

In one space dimension Omega = (-R, 0), omega = (-R, -r) and the weight
centre is y = beta. All objects here are immutable.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from ucwave.services.config import GeometryConfig
from ucwave.services.errors import ConfigurationError, UsageError

logger = logging.getLogger(__name__)

# Relative slack accepted when an explicit T is compared to its lower bound
T_SLACK = 1e-12


@dataclass(frozen=True)
class WeightParams:
    r: float
    R: float
    beta: float
    eps: float
    rho0: float
    rho1: float
    rho: float
    delta: float
    T: float
    time_interval: str = "symmetric"

    @property
    def y(self) -> float:
        return self.beta

    @property
    def t_start(self) -> float:
        return -self.T if self.time_interval == "symmetric" else 0.0

    @property
    def t_end(self) -> float:
        return self.T

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start

    @property
    def cylinder_measure(self) -> float:
        return self.duration * self.R

    @property
    def boundary_points(self) -> tuple[float, float]:
        return (-self.R, 0.0)


def minimal_T(rho1: float, rho: float, eps: float) -> float:
    """
    Smallest admissible final time sqrt((rho_1 - rho) / (1 - eps)).
    """
    return math.sqrt((rho1 - rho) / (1.0 - eps))


def derive_params(cfg: GeometryConfig) -> WeightParams:
    """
    Derive the weight parameters from the geometry block of the config.

    rho is placed at rho_0 + rho_fraction * (rho_1 - rho_0); an explicit T
    is validated against the lower bound of the Hoelder-stability setting.
    """
    rho0 = cfg.r ** 2 + cfg.beta ** 2
    rho1 = (cfg.r + cfg.beta) ** 2
    rho = rho0 + cfg.rho_fraction * (rho1 - rho0)
    T_min = minimal_T(rho1, rho, cfg.eps)

    if cfg.T is None:
        T = T_min
    else:
        if cfg.T < T_min * (1.0 - T_SLACK):
            raise ConfigurationError(
                f"T = {cfg.T} violates T >= sqrt((rho_1 - rho) / (1 - eps)) = {T_min:.6g}"
            )
        T = float(cfg.T)

    return WeightParams(
        r=cfg.r,
        R=cfg.R,
        beta=cfg.beta,
        eps=cfg.eps,
        rho0=rho0,
        rho1=rho1,
        rho=rho,
        delta=cfg.delta_fraction * rho,
        T=T,
        time_interval=cfg.time_interval,
    )


def psi(p: WeightParams, t, x):
    """
    Weight psi(t, x) = (x - y)^2 - (1 - eps) t^2, vectorised.
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    return (x - p.y) ** 2 - (1.0 - p.eps) * t ** 2


def grad_psi(p: WeightParams, t, x) -> tuple[np.ndarray, np.ndarray]:
    """
    (d_t psi, d_x psi) at the given points.
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    return -2.0 * (1.0 - p.eps) * t, 2.0 * (x - p.y)


def hessian_psi(p: WeightParams) -> np.ndarray:
    """
    Constant space-time Hessian of psi, ordered (t, x).
    """
    return 2.0 * np.diag([-(1.0 - p.eps), 1.0])


class RegionKind(str, Enum):
    CYLINDER = "Q"
    DATA = "omega_T"
    SUBLEVEL = "sublevel"
    B = "B"
    B_KAPPA = "B_kappa"
    COMPLEMENT_B = "Q_minus_B"
    GAMMA = "Gamma"


@dataclass(frozen=True)
class Region:
    kind: RegionKind
    # level s for SUBLEVEL, kappa for B_KAPPA
    level: Optional[float] = None

    @classmethod
    def cylinder(cls) -> "Region":
        return cls(RegionKind.CYLINDER)

    @classmethod
    def data(cls) -> "Region":
        return cls(RegionKind.DATA)

    @classmethod
    def sublevel(cls, s: float) -> "Region":
        return cls(RegionKind.SUBLEVEL, s)

    @classmethod
    def B(cls) -> "Region":
        return cls(RegionKind.B)

    @classmethod
    def B_kappa(cls, kappa: float) -> "Region":
        if not 0.0 < kappa <= 1.0:
            raise UsageError(f"kappa must lie in (0, 1], got {kappa}")
        return cls(RegionKind.B_KAPPA, kappa)

    @classmethod
    def complement_B(cls) -> "Region":
        return cls(RegionKind.COMPLEMENT_B)

    @classmethod
    def gamma(cls) -> "Region":
        return cls(RegionKind.GAMMA)

    @property
    def label(self) -> str:
        if self.kind is RegionKind.B_KAPPA:
            return f"B_{self.level:g}"
        if self.kind is RegionKind.SUBLEVEL:
            return f"sublevel_{self.level:g}"
        return self.kind.value


def region_contains(p: WeightParams, reg: Region, t, x):
    """
    Pointwise membership of (t, x) in a region, vectorised.

    Super-level sets use the strict inequality psi > s.
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    t, x = np.broadcast_arrays(t, x)

    if reg.kind is RegionKind.CYLINDER:
        return np.ones(t.shape, dtype=bool)
    if reg.kind is RegionKind.DATA:
        return x < -p.r
    if reg.kind is RegionKind.SUBLEVEL:
        return psi(p, t, x) > reg.level
    if reg.kind is RegionKind.B:
        return psi(p, t, x) > p.rho
    if reg.kind is RegionKind.B_KAPPA:
        return psi(p, t, x) > reg.level * p.rho
    if reg.kind is RegionKind.COMPLEMENT_B:
        return ~(psi(p, t, x) > p.rho)
    if reg.kind is RegionKind.GAMMA:
        out = np.zeros(t.shape, dtype=bool)
        for x_b in p.boundary_points:
            on_point = np.isclose(x, x_b, rtol=0.0, atol=1e-14)
            d = _distance_to_omega(p.r, x_b)
            out |= on_point & (d <= p.T / 2.0 - np.abs(t - p.T / 2.0))
        return out

    raise UsageError(f"unknown region kind {reg.kind!r}")


def _distance_to_omega(r: float, x_b: float) -> float:
    # omega = (-R, -r); points left of -r touch its closure
    return max(0.0, x_b + r)


def gamma_contains(cfg: GeometryConfig, T: float, t, x_b: float):
    """
    Membership of (t, x_b) in Gamma = {dist(x_b, omega) <= T/2 - |t - T/2|}.

    Gamma is only defined on the forward interval [0, T].
    """
    if cfg.time_interval != "forward":
        raise UsageError("Gamma is defined on the forward interval [0, T] only")
    if not (math.isclose(x_b, -cfg.R, abs_tol=1e-14) or math.isclose(x_b, 0.0, abs_tol=1e-14)):
        raise UsageError(f"x_b = {x_b} is not a boundary point of (-R, 0)")

    t = np.asarray(t, dtype=float)
    d = _distance_to_omega(cfg.r, x_b)
    return d <= T / 2.0 - np.abs(t - T / 2.0)


def gamma_intervals(p: WeightParams) -> dict[float, Optional[tuple[float, float]]]:
    """
    Exact time slices of Gamma at both boundary points (None if empty).
    """
    if p.time_interval != "forward":
        raise UsageError("Gamma is defined on the forward interval [0, T] only")

    slices = {}
    for x_b in p.boundary_points:
        d = _distance_to_omega(p.r, x_b)
        slices[x_b] = (d, p.T - d) if d <= p.T / 2.0 else None
    return slices


@dataclass(frozen=True)
class CheckReport:
    passed: bool
    samples: int
    hessian_constant: float
    hessian_error: float
    worst_margin: float
    offending_point: Optional[tuple[float, float]] = None
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "samples": self.samples,
            "hessian_constant": self.hessian_constant,
            "hessian_error": self.hessian_error,
            "worst_margin": self.worst_margin,
            "offending_point": self.offending_point,
            "message": self.message,
        }


def _sample_sublevel(p: WeightParams, level: float, count: int, rng) -> np.ndarray:
    """
    Rejection-sample `count` points of Q with psi > level.
    """
    accepted = []
    found = 0
    for _ in range(200):
        t = rng.uniform(p.t_start, p.t_end, size=4 * count)
        x = rng.uniform(-p.R, 0.0, size=4 * count)
        keep = psi(p, t, x) > level
        accepted.append(np.column_stack((t[keep], x[keep])))
        found += int(keep.sum())
        if found >= count:
            break
    points = np.concatenate(accepted)
    return points[:count]


def check_pseudoconvexity(p: WeightParams, sample_count: int, rng_seed: int) -> CheckReport:
    """
    Verify the two pseudoconvexity properties of psi on Q~ = mho(delta).

    (i)  Hess psi(X, X) = 2 a^2 eps > 0 for null vectors X = (a, theta),
         |theta| = |a| != 0, checked against the analytic constant.
    (ii) |grad_x psi|^2 - |d_t psi|^2 > 0 at sampled points of Q~.
    """
    if sample_count < 1:
        raise UsageError("sample_count must be at least 1")

    rng = np.random.default_rng(rng_seed)

    # (i) null vectors
    a = rng.uniform(0.1, 2.0, size=sample_count) * rng.choice([-1.0, 1.0], size=sample_count)
    theta = a * rng.choice([-1.0, 1.0], size=sample_count)
    X = np.column_stack((a, theta))
    form = np.einsum("ni,ij,nj->n", X, hessian_psi(p), X)
    expected = 2.0 * a ** 2 * p.eps
    hessian_error = float(np.max(np.abs(form - expected) / (2.0 * a ** 2)))

    if hessian_error > 1e-13:
        return CheckReport(False, sample_count, 2.0 * p.eps, hessian_error, float("nan"),
                           message="Hessian form deviates from 2 a^2 eps")
    if np.min(form) <= 0.0:
        i = int(np.argmin(form))
        return CheckReport(False, sample_count, 2.0 * p.eps, hessian_error, float(form[i]),
                           offending_point=(float(a[i]), float(theta[i])),
                           message="Hessian form vanishes on null vectors (degenerate weight)")

    # (ii) non-characteristic level sets on Q~
    points = _sample_sublevel(p, p.delta, sample_count, rng)
    if points.shape[0] == 0:
        return CheckReport(False, 0, 2.0 * p.eps, hessian_error, float("nan"),
                           message="Q~ = mho(delta) contains no sampled point")

    dt, dx = grad_psi(p, points[:, 0], points[:, 1])
    margin = dx ** 2 - dt ** 2
    i = int(np.argmin(margin))
    worst = float(margin[i])
    if worst <= 0.0:
        return CheckReport(False, points.shape[0], 2.0 * p.eps, hessian_error, worst,
                           offending_point=(float(points[i, 0]), float(points[i, 1])),
                           message="level set of psi is characteristic at a sampled point")

    logger.info("pseudoconvexity check passed on %d samples, worst margin %.3e",
                points.shape[0], worst)
    return CheckReport(True, points.shape[0], 2.0 * p.eps, hessian_error, worst)
