"""
solutions.py

Manufactured solutions of the 1D wave equation, all finite sums of the
separated modes phi_m(t, x) = cos(m pi t / 4) cos(m pi x / 4).
"""

import math
from dataclasses import dataclass

import numpy as np

from ucwave.services.config import ExperimentOptions
from ucwave.services.errors import UsageError
from ucwave.services.geometry import WeightParams
from ucwave.services.spaces import FourierMode


# derivative i of cos(a s) is a^i * sign * trig(a s)
_DERIVATIVE_PATTERN = ((1.0, "cos"), (-1.0, "sin"), (-1.0, "cos"), (1.0, "sin"))


def _antiderivative(kind: str, w: float, s: float) -> float:
    if w == 0.0:
        return s if kind == "cos" else 0.0
    return math.sin(w * s) / w if kind == "cos" else -math.cos(w * s) / w


def _trig_product_integral(kind: str, a: float, b: float, lo: float, hi: float) -> float:
    """
    int_lo^hi trig(a s) trig(b s) ds for trig = cos or sin, by product-to-sum.
    """
    def prim(s):
        diff = _antiderivative("cos", a - b, s)
        total = _antiderivative("cos", a + b, s)
        return 0.5 * (diff + total) if kind == "cos" else 0.5 * (diff - total)

    return prim(hi) - prim(lo)


@dataclass(frozen=True)
class ManufacturedSolution:
    """
    u(t, x) = sum_m c_m phi_m(t, x); every term solves the wave equation.
    """

    id: str
    terms: tuple[tuple[float, int], ...]

    @property
    def modes(self) -> list[tuple[float, FourierMode]]:
        return [(c, FourierMode(m)) for c, m in self.terms]

    def __call__(self, t, x):
        return sum(c * phi(t, x) for c, phi in self.modes)

    def dt(self, t, x):
        return sum(c * phi.dt(t, x) for c, phi in self.modes)

    def wave_residual(self, t, x):
        """Pointwise d_tt u - d_xx u."""
        return sum(c * (phi.dtt(t, x) - phi.dxx(t, x)) for c, phi in self.modes)

    def h3_norm(self, p: WeightParams) -> float:
        """
        Closed-form H^3(Q) norm over Q = (t_start, t_end) x (-R, 0).
        """
        total = 0.0
        for order in range(4):
            for i in range(order + 1):
                j = order - i
                kind_t = _DERIVATIVE_PATTERN[i][1]
                kind_x = _DERIVATIVE_PATTERN[j][1]
                for c1, phi1 in self.modes:
                    for c2, phi2 in self.modes:
                        a, b = phi1.frequency, phi2.frequency
                        total += (c1 * c2 * (a * b) ** order
                                  * _trig_product_integral(kind_t, a, b, p.t_start, p.t_end)
                                  * _trig_product_integral(kind_x, a, b, -p.R, 0.0))
        return math.sqrt(total)

    def to_dict(self) -> dict:
        return {"id": self.id, "terms": [{"coefficient": c, "mode": m} for c, m in self.terms]}


def reference() -> ManufacturedSolution:
    # 5 cos(pi t / 2) cos(pi x / 2)
    return ManufacturedSolution("reference", ((5.0, 2),))


def fourier(m: int, amplitude: float = 5.0) -> ManufacturedSolution:
    return ManufacturedSolution(f"fourier_{m}", ((amplitude, m),))


def perturbed(eta: float) -> ManufacturedSolution:
    return ManufacturedSolution(f"perturbed_{eta:g}", ((5.0, 2), (eta, 3)))


def zero() -> ManufacturedSolution:
    return ManufacturedSolution("zero", ())


def build_solution(options: ExperimentOptions) -> ManufacturedSolution:
    """
    Select the manufactured solution named in the experiment options.
    """
    if options.solution == "reference":
        return reference()
    if options.solution == "fourier":
        return fourier(options.mode)
    if options.solution == "perturbed":
        return perturbed(options.eta)
    raise UsageError(f"unknown solution {options.solution!r}")


def sample_residual(solution: ManufacturedSolution, p: WeightParams, count: int, seed: int = 0) -> float:
    """Largest |d_tt u - d_xx u| over random points of Q."""
    rng = np.random.default_rng(seed)
    t = rng.uniform(p.t_start, p.t_end, count)
    x = rng.uniform(-p.R, 0.0, count)
    residual = solution.wave_residual(t, x)
    return float(np.max(np.abs(residual))) if np.ndim(residual) else abs(float(residual))
