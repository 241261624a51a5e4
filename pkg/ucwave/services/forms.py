"""
forms.py

Bilinear forms of the stabilized primal-dual method and the assembled
saddle-point system.

Responsibilities:
- The weak wave operator A[(u1, u2), (y1, y2)] with the Sigma flux term
- Primal stabilizers S_h = J + G + I_0 + Tikhonov, the slab jump term and
  the dual stabilizer S*
- The augmented trace-multiplier coupling (u1 - mu, w1 - eta)_Sigma with
  the broken-in-time jump penalty on mu
- The block-tridiagonal SaddleSystem in slab-interleaved ordering and the
  triple norm

All form matrices are first built per field (global index of SlabSpace)
and then scattered into the saddle ordering through SaddleLayout.
Conventions for h: slab interface terms use h_t, spatial terms use h_x.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, ClassVar, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from ucwave.services.config import FormsConfig, SpaceConfig
from ucwave.services.errors import AssemblyError, ConfigurationError
from ucwave.services.reference import endpoint_values, gauss_legendre
from ucwave.services.spaces import (
    SlabSpace,
    TraceSpace,
    boundary_traces,
    gradient_jumps,
    spatial_matrix,
    time_matrix,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StabilizationWeights:
    """
    Weights of the terms of the Lagrangian.

    c_primal scales J + G + I_0 as a group, c_data the fit on omega_T and
    c_trace the multiplier coupling on Sigma. With every weight at 1 the
    forms are the unit-constant ones; FormsConfig carries the tuned
    defaults.
    """

    gamma: float
    s: int
    c_J: float = 1.0
    c_G: float = 1.0
    c_I0: float = 1.0
    c_jump1: float = 1.0
    c_jump2: float = 1.0
    c_dual_sigma: float = 1.0
    c_primal: float = 1.0
    c_data: float = 1.0
    c_trace: float = 1.0

    def __post_init__(self):
        if self.gamma < 0.0:
            raise ConfigurationError(f"require gamma >= 0, got {self.gamma}")
        for name in ("c_J", "c_G", "c_I0", "c_jump1", "c_jump2", "c_dual_sigma",
                     "c_primal", "c_data", "c_trace"):
            if getattr(self, name) <= 0.0:
                raise ConfigurationError(f"penalty constant {name} must be positive")

    @classmethod
    def from_config(cls, forms: FormsConfig, space: SpaceConfig) -> "StabilizationWeights":
        return cls(
            gamma=forms.gamma,
            s=min(space.q, space.k),
            c_J=forms.c_J,
            c_G=forms.c_G,
            c_I0=forms.c_I0,
            c_jump1=forms.c_jump1,
            c_jump2=forms.c_jump2,
            c_dual_sigma=forms.c_dual_sigma,
            c_primal=forms.c_primal,
            c_data=forms.c_data,
            c_trace=forms.c_trace,
        )

    def with_gamma(self, gamma: float) -> "StabilizationWeights":
        return replace(self, gamma=gamma)


# --------------------------------------------------
# Helpers
# --------------------------------------------------
def _per_slab(space: SlabSpace, time_block, space_block) -> sp.csr_matrix:
    # block diagonal over slabs: I_N (x) T (x) X
    return sp.kron(sp.identity(space.mesh.N, format="csr"),
                   sp.kron(time_block, space_block), format="csr")


def _interface_coupling(N: int, e_start: np.ndarray, e_end: np.ndarray) -> sp.csr_matrix:
    """
    Slab-level matrix of ([v^n], [w^n]) summed over the interfaces t_1..t_{N-1}.

    [v^n] = e_start . v_n - e_end . v_{n-1} on the time coefficients.
    """
    if N < 2:
        size = N * e_start.size
        return sp.csr_matrix((size, size))
    upper_slab = sp.diags(np.r_[0.0, np.ones(N - 1)], format="csr")
    lower_slab = sp.diags(np.r_[np.ones(N - 1), 0.0], format="csr")
    below = sp.diags(np.ones(N - 1), -1, format="csr")
    return (sp.kron(upper_slab, np.outer(e_start, e_start))
            + sp.kron(lower_slab, np.outer(e_end, e_end))
            - sp.kron(below, np.outer(e_start, e_end))
            - sp.kron(below.T, np.outer(e_end, e_start))).tocsr()


def _check_spaces(space: SlabSpace, dual_space: SlabSpace) -> None:
    if not space.same_mesh(dual_space):
        raise AssemblyError("primal and dual spaces must share one mesh")


def boundary_mass(space: SlabSpace) -> sp.csr_matrix:
    """
    Spatial matrix of u(-R) w(-R) + u(0) w(0).
    """
    left, right = boundary_traces(space.mesh, space.k)
    return sp.csr_matrix(np.outer(left, left) + np.outer(right, right))


# --------------------------------------------------
# Wave operator
# --------------------------------------------------
def assemble_A(primal: SlabSpace, dual: SlabSpace) -> sp.csr_matrix:
    """
    Rows (y1, y2), columns (u1, u2) of

      (d_t u2, y1) + (u1', y1') - (u1' n, y1)_Sigma + (d_t u1 - u2, y2)

    slab by slab. The outward normal is -1 at x = -R and +1 at x = 0.
    """
    _check_spaces(primal, dual)
    mesh = primal.mesh
    Mt = time_matrix(mesh.h_t, dual.q, primal.q)
    D = time_matrix(mesh.h_t, dual.q, primal.q, 0, 1)

    Mx = spatial_matrix(mesh, dual.k, primal.k)
    Kx = spatial_matrix(mesh, dual.k, primal.k, 1, 1)
    y_left, y_right = boundary_traces(mesh, dual.k)
    du_left, du_right = boundary_traces(mesh, primal.k, derivative=1)
    Fx = sp.csr_matrix(np.outer(y_left, du_left) - np.outer(y_right, du_right))

    return sp.bmat([
        [_per_slab(primal, Mt, Kx + Fx), _per_slab(primal, D, Mx)],
        [_per_slab(primal, D, Mx), -_per_slab(primal, Mt, Mx)],
    ], format="csr")


# --------------------------------------------------
# Primal stabilization
# --------------------------------------------------
def assemble_primal_stab(space: SlabSpace, weights: StabilizationWeights,
                         trace: Optional[TraceSpace] = None) -> sp.csr_matrix:
    """
    S_h on (u1, u2) x (w1, w2): J + G + I_0 + Tikhonov.

    The trace term is realised through the multiplier mu in assemble_saddle
    and is not part of this matrix.
    """
    if weights.gamma == 0.0 and trace is None:
        raise ConfigurationError(
            "gamma = 0 requires a finite dimensional trace space: without it the "
            "stabilization does not define a norm"
        )

    mesh = space.mesh
    h = mesh.h_x
    Mt = time_matrix(mesh.h_t, space.q, space.q)
    D = time_matrix(mesh.h_t, space.q, space.q, 0, 1)
    DD = time_matrix(mesh.h_t, space.q, space.q, 1, 1)

    Mx = spatial_matrix(mesh, space.k, space.k)
    # C[b, a] = int phi_b'' phi_a, elementwise
    Cx = spatial_matrix(mesh, space.k, space.k, 2, 0)
    Hx = spatial_matrix(mesh, space.k, space.k, 2, 2)
    g = gradient_jumps(mesh, space.k)
    Jx = sp.csr_matrix(h * g.T @ g)

    c_J = weights.c_primal * weights.c_J
    c_G = weights.c_primal * weights.c_G
    c_I0 = weights.c_primal * weights.c_I0

    # (w1, u1)
    s11 = (c_J * _per_slab(space, Mt, Jx)
           + c_G * h ** 2 * _per_slab(space, Mt, Hx)
           + c_I0 * _per_slab(space, DD, Mx)
           + tikhonov_stab(space, weights))
    # (w1, u2)
    s12 = (-c_G * h ** 2 * _per_slab(space, D, Cx)
           - c_I0 * _per_slab(space, D.T, Mx))
    # (w2, u2)
    s22 = (c_G * h ** 2 * _per_slab(space, DD, Mx)
           + c_I0 * _per_slab(space, Mt, Mx))

    return sp.bmat([[s11, s12], [s12.T, s22]], format="csr")


def tikhonov_stab(space: SlabSpace, weights: StabilizationWeights) -> sp.csr_matrix:
    """gamma h^{2s} (u1, w1)_Q, not scaled by c_primal."""
    mesh = space.mesh
    Mt = time_matrix(mesh.h_t, space.q, space.q)
    Mx = spatial_matrix(mesh, space.k, space.k)
    return weights.gamma * mesh.h_x ** (2 * weights.s) * _per_slab(space, Mt, Mx)


def assemble_jump_stab(space: SlabSpace, weights: StabilizationWeights) -> sp.csr_matrix:
    """
    I_1 + I_2 on slab interfaces, with h = h_t:

      I_1 = h^-1 ([u1], [w1])_Omega + h ([u1'], [w1'])_Omega
      I_2 = h^-1 ([u2], [w2])_Omega
    """
    mesh = space.mesh
    h = mesh.h_t
    e_start, e_end = endpoint_values(space.q)
    coupling = _interface_coupling(mesh.N, e_start, e_end)

    Mx = spatial_matrix(mesh, space.k, space.k)
    Kx = spatial_matrix(mesh, space.k, space.k, 1, 1)
    X1 = weights.c_jump1 * (Mx / h + h * Kx)
    X2 = weights.c_jump2 * Mx / h
    return sp.block_diag((sp.kron(coupling, X1), sp.kron(coupling, X2)), format="csr")


def assemble_dual_stab(dual_space: SlabSpace, weights: StabilizationWeights) -> sp.csr_matrix:
    """
    S* on (z1, z2) x (y1, y2):

      (y1, z1) + (y1', z1') + h^-1 (y1, z1)_Sigma + (y2, z2)
    """
    mesh = dual_space.mesh
    Mt = time_matrix(mesh.h_t, dual_space.q, dual_space.q)
    Mx = spatial_matrix(mesh, dual_space.k, dual_space.k)
    Kx = spatial_matrix(mesh, dual_space.k, dual_space.k, 1, 1)
    Bx = boundary_mass(dual_space)

    s11 = _per_slab(dual_space, Mt, Mx + Kx + weights.c_dual_sigma / mesh.h_x * Bx)
    s22 = _per_slab(dual_space, Mt, Mx)
    return sp.block_diag((s11, s22), format="csr")


def assemble_data_mass(space: SlabSpace) -> sp.csr_matrix:
    """(u1, w1)_{omega_T}."""
    mesh = space.mesh
    Mt = time_matrix(mesh.h_t, space.q, space.q)
    Mw = spatial_matrix(mesh, space.k, space.k, cells=mesh.omega_cells)
    return _per_slab(space, Mt, Mw)


def load_vector(space: SlabSpace, f: Callable, cells: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    (f, w1) over the given cells and all slabs by tensor Gauss quadrature.
    """
    mesh = space.mesh
    if cells is None:
        cells = range(mesh.n_x)
    cells = np.asarray(list(cells), dtype=int)
    if cells.size == 0:
        return np.zeros(space.global_dof_count)

    s, ws = gauss_legendre(max(space.k, space.q) + 4)
    t = (mesh.slabs[:, :1] + mesh.h_t * s[None, :]).ravel()
    x = (mesh.spatial_nodes[cells][:, None] + mesh.h_x * s[None, :]).ravel()
    wt = np.tile(ws * mesh.h_t, mesh.N)
    wx = np.tile(ws * mesh.h_x, cells.size)

    tt, xx = np.meshgrid(t, x, indexing="ij")
    weights = np.outer(wt, wx).ravel()
    values = np.asarray(f(tt, xx), dtype=float).ravel()
    E = space.tabulate(tt.ravel(), xx.ravel())
    return E.T @ (weights * values)


# --------------------------------------------------
# Trace multiplier
# --------------------------------------------------
def assemble_trace_coupling(space: SlabSpace, trace: TraceSpace):
    """
    Blocks of (u1 - mu, w1 - eta)_Sigma + h_t^-1 sum_n ([mu^n], [eta^n])_dOmega.

    mu lives in the broken-in-time space: on every slab its own M
    coefficients in the basis of the trace space.
    Returns (UU, U_mu, mu_mu) on the u1 field and the multiplier.
    """
    mesh = space.mesh
    M = trace.M
    Mt = time_matrix(mesh.h_t, space.q, space.q)
    uu = _per_slab(space, Mt, boundary_mass(space))

    s, ws = gauss_legendre(space.q + M + 6)
    left, right = boundary_traces(mesh, space.k)
    u_mu = sp.lil_matrix((space.global_dof_count, mesh.N * M))
    gram = np.zeros((mesh.N * M, mesh.N * M))
    for n, (t0, _) in enumerate(mesh.slabs):
        t = t0 + mesh.h_t * s
        w = mesh.h_t * ws
        phi_t = space.time_basis.values(s)
        rows = space.slab_dofs(n)
        cols = slice(n * M, (n + 1) * M)
        block = np.zeros((space.dofs_per_slab, M))
        for x_b, trace_values in zip(mesh.params.boundary_points, (left, right)):
            mu_values = trace.values(t, np.full_like(t, x_b))
            # int phi_i(t) phi_m(t, x_b) dt, then scattered to the boundary node
            time_part = phi_t.T @ (w[:, None] * mu_values.T)
            block += np.kron(time_part, trace_values[:, None])
            gram[cols, cols] += mu_values @ (w[:, None] * mu_values.T)
        u_mu[rows, cols] = -block

    # time-jump penalty on the multiplier
    for t_n in mesh.slab_interfaces:
        n = int(round((t_n - mesh.params.t_start) / mesh.h_t))
        P = np.zeros((M, M))
        for x_b in mesh.params.boundary_points:
            v = trace.values(np.array([t_n]), np.array([x_b]))[:, 0]
            P += np.outer(v, v) / mesh.h_t
        cur = slice(n * M, (n + 1) * M)
        prev = slice((n - 1) * M, n * M)
        gram[cur, cur] += P
        gram[prev, prev] += P
        gram[cur, prev] -= P
        gram[prev, cur] -= P

    return uu, u_mu.tocsr(), sp.csr_matrix(gram)


def weighted_trace_coupling(space: SlabSpace, trace: TraceSpace, weights: StabilizationWeights):
    uu, u_mu, mu_mu = assemble_trace_coupling(space, trace)
    c = weights.c_trace
    return c * uu, c * u_mu, c * mu_mu


def trace_gram_per_slab(space: SlabSpace, trace: TraceSpace) -> sp.csr_matrix:
    """Block diagonal Sigma-Gram of the multiplier, without jump terms."""
    mesh = space.mesh
    s, ws = gauss_legendre(space.q + trace.M + 6)
    blocks = []
    for t0, _ in mesh.slabs:
        t = t0 + mesh.h_t * s
        g = np.zeros((trace.M, trace.M))
        for x_b in mesh.params.boundary_points:
            v = trace.values(t, np.full_like(t, x_b))
            g += v @ (mesh.h_t * ws[:, None] * v.T)
        blocks.append(g)
    return sp.block_diag(blocks, format="csr")


# --------------------------------------------------
# Saddle system
# --------------------------------------------------
@dataclass(frozen=True)
class SaddleLayout:
    """
    Unknowns of slab n are stored contiguously as [u1 | u2 | mu | z1 | z2].
    """

    FIELDS: ClassVar[tuple[str, ...]] = ("u1", "u2", "mu", "z1", "z2")

    N: int
    n_primal: int
    n_mu: int
    n_dual: int

    def size(self, field: str) -> int:
        return {"u1": self.n_primal, "u2": self.n_primal, "mu": self.n_mu,
                "z1": self.n_dual, "z2": self.n_dual}[field]

    @property
    def slab_size(self) -> int:
        return 2 * self.n_primal + self.n_mu + 2 * self.n_dual

    @property
    def total(self) -> int:
        return self.N * self.slab_size

    def offset(self, field: str) -> int:
        out = 0
        for name in self.FIELDS:
            if name == field:
                return out
            out += self.size(name)
        raise AssemblyError(f"unknown field {field!r}")

    def indices(self, field: str) -> np.ndarray:
        """Saddle positions of the field's global dofs, in field order."""
        size = self.size(field)
        slab = np.arange(self.N)[:, None] * self.slab_size + self.offset(field)
        return (slab + np.arange(size)[None, :]).ravel()

    def selector(self, *fields: str) -> sp.csr_matrix:
        """Scatter matrix from the concatenated fields into the saddle vector."""
        rows = np.concatenate([self.indices(f) for f in fields])
        return sp.csr_matrix((np.ones(rows.size), (rows, np.arange(rows.size))),
                             shape=(self.total, rows.size))

    def extract(self, x: np.ndarray, field: str) -> np.ndarray:
        return x[self.indices(field)]

    def assemble_vector(self, **fields: np.ndarray) -> np.ndarray:
        out = np.zeros(self.total)
        for name, values in fields.items():
            out[self.indices(name)] = values
        return out


@dataclass(frozen=True, eq=False)
class SaddleSystem:
    """
    Symmetric block-tridiagonal matrix over slabs plus a right-hand side.

    diag[n] is the block of slab n, upper[n] couples slab n to slab n + 1;
    the lower couplings are the transposes.
    """

    diag: tuple
    upper: tuple
    rhs: np.ndarray
    layout: Optional[SaddleLayout] = None

    def __post_init__(self):
        if len(self.upper) != max(len(self.diag) - 1, 0):
            raise AssemblyError("need exactly one coupling block per slab interface")
        for n, U in enumerate(self.upper):
            if U.shape != (self.diag[n].shape[0], self.diag[n + 1].shape[0]):
                raise AssemblyError(f"coupling block {n} has shape {U.shape}")
        if self.rhs.shape != (self.size,):
            raise AssemblyError(f"rhs of length {self.rhs.shape} for a system of size {self.size}")

    @classmethod
    def from_sparse(cls, K, sizes: Sequence[int], rhs: np.ndarray,
                    layout: Optional[SaddleLayout] = None, tol: float = 1e-12) -> "SaddleSystem":
        """
        Split a global matrix into slab blocks, checking the block-tridiagonal
        pattern and the symmetry of the off-diagonal couplings.
        """
        K = sp.csr_matrix(K)
        bounds = np.concatenate(([0], np.cumsum(sizes)))
        coo = K.tocoo()
        slab_of = np.searchsorted(bounds, np.arange(K.shape[0]), side="right") - 1
        far = np.abs(slab_of[coo.row] - slab_of[coo.col]) > 1
        if np.any(far & (np.abs(coo.data) > 0.0)):
            raise AssemblyError("matrix couples slabs that are not neighbours")

        diag = tuple(K[bounds[n]:bounds[n + 1], bounds[n]:bounds[n + 1]].tocsr()
                     for n in range(len(sizes)))
        upper = tuple(K[bounds[n]:bounds[n + 1], bounds[n + 1]:bounds[n + 2]].tocsr()
                      for n in range(len(sizes) - 1))
        scale = max(abs(K).max(), 1.0) if K.nnz else 1.0
        for n, U in enumerate(upper):
            diff = K[bounds[n + 1]:bounds[n + 2], bounds[n]:bounds[n + 1]] - U.T
            if diff.nnz and abs(diff).max() > tol * scale:
                raise AssemblyError(f"coupling of slabs {n} and {n + 1} is not symmetric")
        return cls(diag, upper, np.asarray(rhs, dtype=float), layout)

    @property
    def N(self) -> int:
        return len(self.diag)

    @property
    def sizes(self) -> list[int]:
        return [D.shape[0] for D in self.diag]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.sizes)))

    @property
    def size(self) -> int:
        return int(sum(self.sizes))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        o = self.offsets
        y = np.zeros_like(x, dtype=float)
        for n, D in enumerate(self.diag):
            y[o[n]:o[n + 1]] += D @ x[o[n]:o[n + 1]]
        for n, U in enumerate(self.upper):
            y[o[n]:o[n + 1]] += U @ x[o[n + 1]:o[n + 2]]
            y[o[n + 1]:o[n + 2]] += U.T @ x[o[n]:o[n + 1]]
        return y

    def to_sparse(self) -> sp.csr_matrix:
        N = self.N
        blocks = [[None] * N for _ in range(N)]
        for n, D in enumerate(self.diag):
            blocks[n][n] = D
        for n, U in enumerate(self.upper):
            blocks[n][n + 1] = U
            blocks[n + 1][n] = U.T
        return sp.bmat(blocks, format="csr")

    def with_rhs(self, rhs: np.ndarray) -> "SaddleSystem":
        return replace(self, rhs=np.asarray(rhs, dtype=float))

    def norm1(self) -> float:
        return float(abs(self.to_sparse()).sum(axis=0).max())

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        scale = max(max((abs(D).max() for D in self.diag if D.nnz), default=0.0), 1.0)
        for D in self.diag:
            diff = D - D.T
            if diff.nnz and abs(diff).max() > tol * scale:
                return False
        return True


def _primal_operator(space: SlabSpace, weights: StabilizationWeights,
                     trace: Optional[TraceSpace]) -> sp.csr_matrix:
    # S_h + jumps + weighted data term on the pair (u1, u2)
    data = weights.c_data * assemble_data_mass(space)
    zero = sp.csr_matrix(data.shape)
    return (assemble_primal_stab(space, weights, trace)
            + assemble_jump_stab(space, weights)
            + sp.bmat([[data, zero], [zero, zero]], format="csr")).tocsr()


def saddle_layout(space: SlabSpace, dual_space: SlabSpace,
                  trace: Optional[TraceSpace] = None) -> SaddleLayout:
    return SaddleLayout(
        N=space.mesh.N,
        n_primal=space.dofs_per_slab,
        n_mu=trace.M if trace is not None else 0,
        n_dual=dual_space.dofs_per_slab,
    )


def assemble_saddle(space: SlabSpace, dual_space: SlabSpace, weights: StabilizationWeights,
                    trace: Optional[TraceSpace] = None, data: Optional[Callable] = None,
                    noise: Optional[np.ndarray] = None) -> SaddleSystem:
    """
    Full system for (U_h, mu_h, Z_h):

      [ P     A^T ] [U, mu]   [ c_data (u_omega, w1)_{omega_T} ]
      [ A    -S*  ] [  Z  ] = [               0                ]

    P = S_h + I_jump + c_data (u1, w1)_{omega_T}, plus c_trace times the
    trace coupling. data is the exact data evaluator on omega_T, noise a u1
    coefficient vector added to the data.
    """
    _check_spaces(space, dual_space)
    if trace is not None:
        p, q = trace.params, space.mesh.params
        if p.time_interval != q.time_interval or not math.isclose(p.T, q.T, rel_tol=1e-12):
            raise AssemblyError("trace space and mesh describe different cylinders")
    if noise is not None and noise.shape != (space.global_dof_count,):
        raise AssemblyError(f"noise vector of length {noise.shape} for {space.global_dof_count} dofs")

    layout = saddle_layout(space, dual_space, trace)
    S_u = layout.selector("u1", "u2")
    S_z = layout.selector("z1", "z2")

    A = assemble_A(space, dual_space)
    K = (S_u @ _primal_operator(space, weights, trace) @ S_u.T
         + S_z @ A @ S_u.T
         + S_u @ A.T @ S_z.T
         - S_z @ assemble_dual_stab(dual_space, weights) @ S_z.T)

    if trace is not None:
        uu, u_mu, mu_mu = weighted_trace_coupling(space, trace, weights)
        S_1 = layout.selector("u1")
        S_mu = layout.selector("mu")
        K = K + (S_1 @ uu @ S_1.T + S_1 @ u_mu @ S_mu.T
                 + S_mu @ u_mu.T @ S_1.T + S_mu @ mu_mu @ S_mu.T)

    f = np.zeros(space.global_dof_count)
    if data is not None:
        f += weights.c_data * load_vector(space, data, space.mesh.omega_cells)
    if noise is not None:
        f += weights.c_data * (assemble_data_mass(space) @ noise)
    rhs = layout.assemble_vector(u1=f)

    system = SaddleSystem.from_sparse(K, [layout.slab_size] * layout.N, rhs, layout)
    logger.debug("saddle system: N=%d, slab size %d, nnz %d", layout.N, layout.slab_size, K.nnz)
    return system


def assemble_mass(space: SlabSpace, dual_space: SlabSpace,
                  trace: Optional[TraceSpace] = None) -> sp.csr_matrix:
    """
    Block-diagonal pencil mass in saddle ordering: L2 masses of u1, u2, z1,
    z2 and the Sigma-Gram of mu.
    """
    layout = saddle_layout(space, dual_space, trace)
    mesh = space.mesh
    Mu = _per_slab(space, time_matrix(mesh.h_t, space.q, space.q),
                   spatial_matrix(mesh, space.k, space.k))
    Mz = _per_slab(dual_space, time_matrix(mesh.h_t, dual_space.q, dual_space.q),
                   spatial_matrix(mesh, dual_space.k, dual_space.k))
    out = sp.csr_matrix((layout.total, layout.total))
    for field, block in (("u1", Mu), ("u2", Mu), ("z1", Mz), ("z2", Mz)):
        S = layout.selector(field)
        out = out + S @ block @ S.T
    if trace is not None:
        S = layout.selector("mu")
        out = out + S @ trace_gram_per_slab(space, trace) @ S.T
    return out.tocsr()


def triple_norm(space: SlabSpace, dual_space: SlabSpace, weights: StabilizationWeights,
                trace: Optional[TraceSpace], U, Z, mu: Optional[np.ndarray] = None) -> float:
    """
    |||(U, Z)|||^2 = |U|^2_S + |U|^2_jump + c_data ||u1||^2_{omega_T} + ||Z||^2_{S*}

    With a trace space the multiplier terms c_trace ||u1 - mu||^2_Sigma and
    the mu jump penalty are included.
    """
    u = U.stacked()
    z = Z.stacked()
    value = u @ (_primal_operator(space, weights, trace) @ u)
    value += z @ (assemble_dual_stab(dual_space, weights) @ z)
    if trace is not None:
        if mu is None:
            mu = np.zeros(space.mesh.N * trace.M)
        uu, u_mu, mu_mu = weighted_trace_coupling(space, trace, weights)
        value += U.u1 @ (uu @ U.u1) + 2.0 * U.u1 @ (u_mu @ mu) + mu @ (mu_mu @ mu)
    return math.sqrt(max(float(value), 0.0))
