"""
spaces.py

Finite element spaces W_h^{k,q} = dG(q) in time (x) CG(k) in space.

Responsibilities:
- Dof numbering of scalar slab fields and of pairs (u1, u2)
- Spatial and temporal element matrices in tensor-product form
- Pointwise evaluation with one-sided limits at slab interfaces
- The nodal interpolant Pi_h and the lifting operator L_h
- The finite dimensional trace space V_M on Sigma and the (A1) check

Dof layout of a scalar field: slab n, time node i, spatial node a
  index = (n * (q + 1) + i) * n_space + a
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from ucwave.services.errors import AssemblyError, UsageError
from ucwave.services.geometry import Region, WeightParams, gamma_intervals, region_contains
from ucwave.services.mesh import SpaceTimeMesh
from ucwave.services.reference import gauss_legendre, lagrange_basis, reference_matrix

logger = logging.getLogger(__name__)

# Tolerance used to snap points onto slab interfaces and cell facets
SNAP = 1e-12


class SlabSpace:
    """
    Scalar tensor-product space on a SpaceTimeMesh.

    Functions are continuous in space within every slab and discontinuous
    across slab interfaces. Time nodes are Gauss-Lobatto points per slab.
    """

    def __init__(self, mesh: SpaceTimeMesh, k: int, q: int):
        if k < 1 or q < 0:
            raise AssemblyError(f"require k >= 1 and q >= 0, got k={k}, q={q}")
        self.mesh = mesh
        self.k = k
        self.q = q
        self.space_basis = lagrange_basis(k)
        self.time_basis = lagrange_basis(q)

    @property
    def n_space(self) -> int:
        return self.k * self.mesh.n_x + 1

    @property
    def n_time(self) -> int:
        return self.q + 1

    @property
    def dofs_per_slab(self) -> int:
        return self.n_time * self.n_space

    @property
    def global_dof_count(self) -> int:
        return self.mesh.N * self.dofs_per_slab

    @property
    def node_coords(self) -> np.ndarray:
        """Spatial node coordinates, in dof order."""
        m = self.mesh
        x = np.empty(self.n_space)
        for c in range(m.n_x):
            x[c * self.k: (c + 1) * self.k + 1] = m.spatial_nodes[c] + m.h_x * self.space_basis.nodes
        return x

    @property
    def time_coords(self) -> np.ndarray:
        """Time node coordinates of all slabs, shape (N, q + 1)."""
        m = self.mesh
        return m.slabs[:, :1] + m.h_t * self.time_basis.nodes[None, :]

    def slab_dofs(self, n: int) -> slice:
        return slice(n * self.dofs_per_slab, (n + 1) * self.dofs_per_slab)

    def cell_dofs(self, c: int) -> np.ndarray:
        return np.arange(c * self.k, c * self.k + self.k + 1)

    def same_mesh(self, other: "SlabSpace") -> bool:
        return self.mesh is other.mesh

    def locate(self, t, x, side: str = "right"):
        """
        Slab index, local time, cell index and local coordinate of points.

        side selects the one-sided limit at slab interfaces.
        """
        m = self.mesh
        s = (np.asarray(t, dtype=float) - m.params.t_start) / m.h_t
        if side == "left":
            n = np.ceil(s - SNAP).astype(int) - 1
        elif side == "right":
            n = np.floor(s + SNAP).astype(int)
        else:
            raise UsageError(f"side must be 'left' or 'right', got {side!r}")
        n = np.clip(n, 0, m.N - 1)
        tau = np.clip(s - n, 0.0, 1.0)

        xi_global = (np.asarray(x, dtype=float) + m.params.R) / m.h_x
        c = np.clip(np.floor(xi_global + SNAP).astype(int), 0, m.n_x - 1)
        xi = np.clip(xi_global - c, 0.0, 1.0)
        return n, tau, c, xi

    def tabulate(self, t, x, dt: int = 0, dx: int = 0, side: str = "right") -> sp.csr_matrix:
        """
        Evaluation matrix E with (E @ w)[p] = d_t^dt d_x^dx w(t_p, x_p).

        Shape (n_points, global_dof_count).
        """
        t, x = np.broadcast_arrays(np.atleast_1d(np.asarray(t, dtype=float)),
                                   np.atleast_1d(np.asarray(x, dtype=float)))
        t = t.ravel()
        x = x.ravel()
        n, tau, c, xi = self.locate(t, x, side)

        phi_t = self.time_basis.values(tau, dt) / self.mesh.h_t ** dt
        phi_x = self.space_basis.values(xi, dx) / self.mesh.h_x ** dx

        rows = np.repeat(np.arange(t.size), self.n_time * (self.k + 1))
        time_part = (n * self.n_time)[:, None] + np.arange(self.n_time)[None, :]
        space_part = (c * self.k)[:, None] + np.arange(self.k + 1)[None, :]
        cols = (time_part[:, :, None] * self.n_space + space_part[:, None, :]).ravel()
        vals = (phi_t[:, :, None] * phi_x[:, None, :]).ravel()
        return sp.csr_matrix((vals, (rows, cols)), shape=(t.size, self.global_dof_count))


@dataclass(frozen=True, eq=False)
class FieldPair:
    u1: np.ndarray
    u2: np.ndarray

    def check(self, space: SlabSpace) -> None:
        n = space.global_dof_count
        if self.u1.shape != (n,) or self.u2.shape != (n,):
            raise AssemblyError(f"field pair does not conform to a space with {n} dofs")

    def stacked(self) -> np.ndarray:
        return np.concatenate((self.u1, self.u2))


# --------------------------------------------------
# Element matrices
# --------------------------------------------------
def spatial_matrix(mesh: SpaceTimeMesh, test_k: int, trial_k: int,
                   test_der: int = 0, trial_der: int = 0,
                   cells: Optional[Sequence[int]] = None) -> sp.csr_matrix:
    """
    Global 1D matrix int phi_b^(test_der) chi_a^(trial_der) dx over cells.
    """
    if cells is None:
        cells = range(mesh.n_x)
    local = reference_matrix(test_k, test_der, trial_k, trial_der)
    local = local * mesh.h_x ** (1 - test_der - trial_der)

    rows, cols, vals = [], [], []
    for c in cells:
        r = c * test_k + np.arange(test_k + 1)
        s = c * trial_k + np.arange(trial_k + 1)
        rows.append(np.repeat(r, trial_k + 1))
        cols.append(np.tile(s, test_k + 1))
        vals.append(local.ravel())
    shape = (test_k * mesh.n_x + 1, trial_k * mesh.n_x + 1)
    if not rows:
        return sp.csr_matrix(shape)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape
    )


def time_matrix(h_t: float, test_q: int, trial_q: int,
                test_der: int = 0, trial_der: int = 0) -> np.ndarray:
    """
    Slab matrix int_{I_n} psi_i^(test_der) phi_j^(trial_der) dt.
    """
    return reference_matrix(test_q, test_der, trial_q, trial_der) * h_t ** (1 - test_der - trial_der)


def point_values(mesh: SpaceTimeMesh, k: int, x: float, derivative: int = 0,
                 cell: Optional[int] = None) -> np.ndarray:
    """
    Values of all spatial basis functions (or a derivative) at one point.

    cell selects the element used for the evaluation, which matters for
    derivatives at nodes.
    """
    if cell is None:
        cell = int(np.clip(np.floor((x + mesh.params.R) / mesh.h_x + SNAP), 0, mesh.n_x - 1))
    xi = (x - mesh.spatial_nodes[cell]) / mesh.h_x
    local = lagrange_basis(k).values(np.array([xi]), derivative)[0] / mesh.h_x ** derivative
    out = np.zeros(k * mesh.n_x + 1)
    out[cell * k: cell * k + k + 1] = local
    return out


def boundary_traces(mesh: SpaceTimeMesh, k: int, derivative: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """
    Basis values (or derivatives) at x = -R and x = 0.
    """
    left = point_values(mesh, k, -mesh.params.R, derivative, cell=0)
    right = point_values(mesh, k, 0.0, derivative, cell=mesh.n_x - 1)
    return left, right


def gradient_jumps(mesh: SpaceTimeMesh, k: int) -> np.ndarray:
    """
    Rows g_F with g_F @ u = [u']_F at every interior facet F.
    """
    rows = []
    for f in mesh.interior_facets:
        x_f = mesh.spatial_nodes[f]
        right = point_values(mesh, k, x_f, 1, cell=f)
        left = point_values(mesh, k, x_f, 1, cell=f - 1)
        rows.append(right - left)
    return np.array(rows).reshape(len(rows), k * mesh.n_x + 1)


# --------------------------------------------------
# Interpolation, evaluation, lifting
# --------------------------------------------------
def interpolate(space: SlabSpace, f: Callable) -> np.ndarray:
    """
    Tensor nodal interpolant Pi_h f (coefficient vector).
    """
    t = space.time_coords.ravel()
    x = space.node_coords
    tt, xx = np.meshgrid(t, x, indexing="ij")
    return np.asarray(f(tt, xx), dtype=float).ravel()


def eval_field(space: SlabSpace, w: np.ndarray, t, x, side: str = "right") -> np.ndarray:
    """
    Value of the field with coefficients w at (t, x).

    At t = t_n, side = "left" returns lim_{s -> t_n^-} and "right" the
    limit from above.
    """
    return space.tabulate(t, x, side=side) @ w


class LiftedField:
    """
    Evaluator of L_h w(t) = w(t) - [w^n] theta_n(t) on I_n, n >= 1.

    theta_n(t) = (t_{n+1} - t) / (t_{n+1} - t_n); on I_0 the field is kept.
    The result is continuous across every slab interface.
    """

    def __init__(self, space: SlabSpace, w: np.ndarray):
        self.space = space
        self.w = w

    def jump(self, n: np.ndarray, x: np.ndarray) -> np.ndarray:
        t_n = self.space.mesh.slabs[n, 0]
        upper = eval_field(self.space, self.w, t_n, x, side="right")
        lower = eval_field(self.space, self.w, t_n, x, side="left")
        return upper - lower

    def __call__(self, t, x, side: str = "right") -> np.ndarray:
        t, x = np.broadcast_arrays(np.atleast_1d(np.asarray(t, dtype=float)),
                                   np.atleast_1d(np.asarray(x, dtype=float)))
        t = t.ravel()
        x = x.ravel()
        n, tau, _, _ = self.space.locate(t, x, side)
        value = eval_field(self.space, self.w, t, x, side=side)

        lifted = n >= 1
        if np.any(lifted):
            theta = 1.0 - tau[lifted]
            value[lifted] -= self.jump(n[lifted], x[lifted]) * theta
        return value


def lift(space: SlabSpace, w: np.ndarray) -> LiftedField:
    return LiftedField(space, w)


def theta_norms(h_t: float) -> tuple[float, float]:
    """
    ||theta_n||_{L2(I_n)} and ||theta_n'||_{L2(I_n)} by Gauss quadrature.
    """
    s, w = gauss_legendre(4)
    theta = 1.0 - s
    norm = math.sqrt(h_t * np.sum(w * theta ** 2))
    deriv_norm = math.sqrt(h_t * np.sum(w * (1.0 / h_t) ** 2))
    return norm, deriv_norm


# --------------------------------------------------
# Finite dimensional trace space
# --------------------------------------------------
@dataclass(frozen=True)
class FourierMode:
    """
    phi_m(t, x) = cos(m pi t / 4) cos(m pi x / 4), a solution of the 1D
    wave equation for every mode index m.
    """

    m: int

    @property
    def frequency(self) -> float:
        return self.m * math.pi / 4.0

    def __call__(self, t, x):
        a = self.frequency
        return np.cos(a * np.asarray(t)) * np.cos(a * np.asarray(x))

    def dt(self, t, x):
        a = self.frequency
        return -a * np.sin(a * np.asarray(t)) * np.cos(a * np.asarray(x))

    def dtt(self, t, x):
        return -self.frequency ** 2 * self(t, x)

    def dxx(self, t, x):
        return -self.frequency ** 2 * self(t, x)


# Panels per boundary point for the trace-space quadrature
TRACE_PANELS = 32


class TraceSpace:
    """
    V_M = span{phi_1, ..., phi_M} restricted to Sigma = I_T x {-R, 0}.

    Holds a composite Gauss rule on Sigma and the Gram matrices of the
    basis in L2(Sigma) and, on the forward interval, in L2(Gamma).
    """

    def __init__(self, params: WeightParams, functions: Sequence[Callable],
                 labels: Optional[Sequence[str]] = None, n_gauss: Optional[int] = None):
        self.params = params
        self.functions = tuple(functions)
        self.labels = tuple(labels) if labels is not None else tuple(f"f{i}" for i in range(len(functions)))
        self.n_gauss = n_gauss or 2 * len(self.functions) + 4

        self.t_quad, self.x_quad, self.w_quad = self._sigma_rule()
        self.phi_quad = self.values(self.t_quad, self.x_quad)
        self.gram_sigma = self._gram(np.ones_like(self.w_quad, dtype=bool))
        if params.time_interval == "forward":
            mask = region_contains(params, Region.gamma(), self.t_quad, self.x_quad)
            self.gram_gamma = self._gram(mask)
        else:
            self.gram_gamma = None

    @classmethod
    def from_functions(cls, params: WeightParams, functions: Sequence[Callable],
                       labels: Optional[Sequence[str]] = None) -> "TraceSpace":
        return cls(params, functions, labels)

    @property
    def M(self) -> int:
        return len(self.functions)

    def values(self, t, x) -> np.ndarray:
        """Basis values, shape (M, n_points)."""
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        if not self.functions:
            return np.zeros((0,) + np.broadcast(t, x).shape)
        return np.array([np.broadcast_to(f(t, x), np.broadcast(t, x).shape) for f in self.functions])

    def _sigma_rule(self):
        p = self.params
        breaks = np.linspace(p.t_start, p.t_end, TRACE_PANELS + 1)
        slices = gamma_intervals(p) if p.time_interval == "forward" else {}

        s, w = gauss_legendre(self.n_gauss)
        ts, xs, ws = [], [], []
        for x_b in p.boundary_points:
            edges = breaks
            interval = slices.get(x_b)
            if interval is not None:
                edges = np.unique(np.concatenate((breaks, interval)))
            lengths = np.diff(edges)
            ts.append((edges[:-1, None] + lengths[:, None] * s[None, :]).ravel())
            ws.append((lengths[:, None] * w[None, :]).ravel())
            xs.append(np.full(ts[-1].size, x_b))
        return np.concatenate(ts), np.concatenate(xs), np.concatenate(ws)

    def _gram(self, mask: np.ndarray) -> np.ndarray:
        weighted = self.phi_quad * (self.w_quad * mask)[None, :]
        return weighted @ self.phi_quad.T

    def gamma_gram(self, gamma: Callable) -> np.ndarray:
        """Gram matrix on the part of Sigma selected by a predicate."""
        return self._gram(np.asarray(gamma(self.t_quad, self.x_quad), dtype=bool))


def build_trace_space(params: WeightParams, M: int, family: str = "fourier_modes",
                      modes: Optional[Sequence[int]] = None) -> TraceSpace:
    """
    Trace space spanned by the Fourier modes 1..M (or an explicit list).
    """
    if family != "fourier_modes":
        raise UsageError(f"unknown trace space family {family!r}")
    if modes is None:
        if M < 1:
            raise UsageError(f"require M >= 1, got {M}")
        modes = range(1, M + 1)
    functions = [FourierMode(m) for m in modes]
    return TraceSpace(params, functions, labels=[f"phi_{m}" for m in modes])


@dataclass(frozen=True)
class A1Result:
    holds: bool
    margin: float

    def to_dict(self) -> dict:
        return {"holds": self.holds, "margin": self.margin}


def check_A1(ts: TraceSpace, gamma: Optional[Callable] = None, tol: float = 1e-10) -> A1Result:
    """
    Assumption (A1): no nonzero element of V_M vanishes on Gamma.

    The margin is the smallest generalized eigenvalue of (gram_Gamma,
    gram_Sigma), i.e. min ||phi||^2_Gamma / ||phi||^2_Sigma over V_M. It is
    independent of the chosen basis.
    """
    if ts.M == 0:
        return A1Result(True, math.inf)

    if gamma is not None:
        g_gamma = ts.gamma_gram(gamma)
    elif ts.gram_gamma is not None:
        g_gamma = ts.gram_gamma
    else:
        raise UsageError("(A1) is checked on the forward interval [0, T] only")

    g_sigma = ts.gram_sigma
    # normalise first; eigh on the raw pencil is sensitive to basis scaling
    d = 1.0 / np.sqrt(np.diag(g_sigma))
    g_sigma = d[:, None] * g_sigma * d[None, :]
    g_gamma = d[:, None] * g_gamma * d[None, :]
    try:
        margin = float(scipy.linalg.eigh(g_gamma, g_sigma, eigvals_only=True)[0])
    except np.linalg.LinAlgError:
        # basis dependent on Sigma: the Gamma restriction cannot be injective
        margin = 0.0

    holds = margin > tol
    logger.info("(A1) check on M=%d: margin %.3e (%s)", ts.M, margin, "holds" if holds else "fails")
    return A1Result(holds, margin)
