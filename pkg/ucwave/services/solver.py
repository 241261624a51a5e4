"""
solver.py

Direct solution of the block-tridiagonal saddle system and the smallest
generalized eigenpair of the pencil (K, M).

Responsibilities:
- Block-Thomas elimination over slabs with Bunch-Kaufman factors of the
  Schur complements
- Linear solves with a residual post-check and iterative refinement
- Shift-invert Lanczos (ARPACK) for the eigenvalue of smallest magnitude

Elimination order is the slab index; every Schur complement
  S_n = D_n - U_{n-1}^T S_{n-1}^{-1} U_{n-1}
is a dense symmetric indefinite matrix of one slab's size.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh, onenormest

from ucwave.services.errors import (
    EigenConvergenceError,
    FactorizationError,
    SolverQualityError,
    UsageError,
)
from ucwave.services.forms import SaddleSystem

logger = logging.getLogger(__name__)

# Residual targets of solve()
RESIDUAL_TARGET = 1e-9
RESIDUAL_LIMIT = 1e-6
# Relative shift tried when the unshifted pencil cannot be factorized
FALLBACK_SHIFT = 1e-12


class _LDLFactor:
    """
    Symmetric indefinite factor P S P^T = L D L^T of one dense block.
    """

    def __init__(self, S: np.ndarray):
        lu, d, perm = scipy.linalg.ldl(S, lower=True)
        self.size = S.shape[0]
        self.perm = perm
        self.lower = lu[perm]
        # D has 1x1 and 2x2 pivots, stored as a tridiagonal band
        n = self.size
        self.band = np.zeros((3, n))
        self.band[1] = np.diag(d)
        if n > 1:
            self.band[0, 1:] = np.diag(d, 1)
            self.band[2, :-1] = np.diag(d, -1)

    def solve(self, b: np.ndarray) -> np.ndarray:
        y = scipy.linalg.solve_triangular(self.lower, b[self.perm], lower=True, unit_diagonal=True)
        w = scipy.linalg.solve_banded((1, 1), self.band, y)
        v = scipy.linalg.solve_triangular(self.lower, w, lower=True, trans="T", unit_diagonal=True)
        x = np.empty_like(v)
        x[self.perm] = v
        return x

    def condition(self, S: np.ndarray) -> float:
        """1-norm condition estimate ||S||_1 ||S^-1||_1."""
        inverse = LinearOperator(
            (self.size, self.size),
            matvec=self.solve, rmatvec=self.solve,
            matmat=self.solve, rmatmat=self.solve,
            dtype=float,
        )
        return float(np.abs(S).sum(axis=0).max() * onenormest(inverse))


@dataclass(frozen=True, eq=False)
class BlockTriFactorization:
    system: SaddleSystem
    factors: tuple
    shift: float = 0.0
    mass: Optional[sp.csr_matrix] = None
    condition_estimates: tuple = ()

    def operator(self, x: np.ndarray) -> np.ndarray:
        """Product with the factorized matrix K - shift * M."""
        y = self.system.matvec(x)
        if self.shift:
            y = y - self.shift * (self.mass @ x)
        return y

    def sweep(self, b: np.ndarray) -> np.ndarray:
        """One forward elimination and back substitution, no checks."""
        o = self.system.offsets
        upper = self.system.upper
        N = self.system.N

        y = [b[o[n]:o[n + 1]].astype(float, copy=True) for n in range(N)]
        for n in range(1, N):
            y[n] = y[n] - upper[n - 1].T @ self.factors[n - 1].solve(y[n - 1])

        x = [None] * N
        x[N - 1] = self.factors[N - 1].solve(y[N - 1])
        for n in range(N - 2, -1, -1):
            x[n] = self.factors[n].solve(y[n] - upper[n] @ x[n + 1])
        return np.concatenate(x)


def _mass_block(mass: sp.csr_matrix, o: np.ndarray, n: int) -> np.ndarray:
    return mass[o[n]:o[n + 1], o[n]:o[n + 1]].toarray()


def factorize(sys: SaddleSystem, shift: float = 0.0,
              mass: Optional[sp.csr_matrix] = None) -> BlockTriFactorization:
    """
    Block-Thomas factorization of K - shift * M.

    Raises FactorizationError naming the first slab whose Schur complement
    is numerically singular.
    """
    if shift and mass is None:
        raise UsageError("a shifted factorization needs the mass matrix")

    o = sys.offsets
    limit = 1.0 / np.finfo(float).eps
    factors, conds = [], []
    previous = None
    for n in range(sys.N):
        S = sys.diag[n].toarray()
        if shift:
            S -= shift * _mass_block(mass, o, n)
        if previous is not None:
            U = sys.upper[n - 1].toarray()
            S -= U.T @ previous.solve(U)
            # symmetrise rounding in the Schur update
            S = 0.5 * (S + S.T)

        try:
            factor = _LDLFactor(S)
            cond = factor.condition(S)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise FactorizationError(f"singular Schur complement in slab {n}: {exc}", slab=n) from exc
        if not np.isfinite(cond) or cond > limit:
            raise FactorizationError(
                f"Schur complement of slab {n} is numerically singular (cond ~ {cond:.2e})", slab=n
            )
        factors.append(factor)
        conds.append(cond)
        previous = factor

    logger.debug("factorized %d slabs, max condition estimate %.2e", sys.N, max(conds))
    return BlockTriFactorization(sys, tuple(factors), shift, mass, tuple(conds))


def _relative_residual(fact: BlockTriFactorization, x: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    if x.ndim == 1:
        r = b - fact.operator(x)
        scale = np.linalg.norm(b)
        return r, float(np.linalg.norm(r) / scale) if scale > 0 else 0.0
    r = np.column_stack([b[:, j] - fact.operator(x[:, j]) for j in range(b.shape[1])])
    scale = np.linalg.norm(b, axis=0)
    scale[scale == 0.0] = 1.0
    return r, float(np.max(np.linalg.norm(r, axis=0) / scale))


def solve(fact: BlockTriFactorization, rhs: np.ndarray, refine_steps: int = 1) -> np.ndarray:
    """
    Solve with the factorization; rhs may be a vector or a matrix of columns.

    Relative residuals above 1e-9 trigger iterative refinement; above 1e-6
    after refinement the solve is rejected.
    """
    b = np.asarray(rhs, dtype=float)
    if b.shape[0] != fact.system.size:
        raise UsageError(f"rhs of length {b.shape[0]} for a system of size {fact.system.size}")

    x = fact.sweep(b)
    r, rel = _relative_residual(fact, x, b)
    steps = 0
    while rel > RESIDUAL_TARGET and steps < refine_steps:
        x = x + fact.sweep(r)
        r, rel = _relative_residual(fact, x, b)
        steps += 1

    if rel > RESIDUAL_LIMIT:
        raise SolverQualityError(f"relative residual {rel:.2e} after {steps} refinement steps", residual=rel)
    if rel > RESIDUAL_TARGET:
        logger.warning("solve accepted with relative residual %.2e", rel)
    return x


@dataclass(frozen=True)
class EigenResult:
    lam: float
    mode: np.ndarray
    residual: float
    iterations: int

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "residual": self.residual, "iterations": self.iterations}


def _eigen_residual(sys: SaddleSystem, mass, lam: float, x: np.ndarray) -> float:
    mx = mass @ x
    return float(np.linalg.norm(sys.matvec(x) - lam * mx) / np.sqrt(x @ mx))


def smallest_eigenpair(sys: SaddleSystem, mass, tol: float = 1e-8, max_iter: int = 200,
                       block_size: int = 6, seed: int = 0) -> EigenResult:
    """
    Eigenpair of K x = lambda M x with the smallest |lambda|.

    K is symmetric indefinite, M symmetric positive definite. Runs
    shift-invert Lanczos around 0 with the block-Thomas factorization as
    the inverse; falls back to a tiny positive shift when K itself is
    singular. Small pencils are solved densely.
    """
    mass = sp.csr_matrix(mass)
    n = sys.size

    if n <= 2 * block_size + 1:
        theta, vectors = scipy.linalg.eigh(sys.to_sparse().toarray(), mass.toarray())
        i = int(np.argmin(np.abs(theta)))
        x = vectors[:, i]
        x = x / np.sqrt(x @ (mass @ x))
        return EigenResult(float(theta[i]), x, _eigen_residual(sys, mass, float(theta[i]), x), 1)

    try:
        fact = factorize(sys)
    except FactorizationError as exc:
        shift = FALLBACK_SHIFT * sys.norm1()
        logger.warning("%s; retrying with shift %.2e", exc, shift)
        fact = factorize(sys, shift=shift, mass=mass)

    applications = [0]

    def apply_inverse(v):
        applications[0] += 1
        return fact.sweep(np.ravel(v))

    inverse = LinearOperator((n, n), matvec=apply_inverse, dtype=float)
    v0 = np.random.default_rng(seed).standard_normal(n)
    k = min(block_size, n - 2)
    try:
        theta, vectors = eigsh(sys.to_sparse(), k=k, M=mass, sigma=fact.shift, which="LM",
                               OPinv=inverse, v0=v0, maxiter=max_iter)
    except ArpackNoConvergence as exc:
        if exc.eigenvalues.size == 0:
            raise EigenConvergenceError(
                f"no eigenvalue converged in {max_iter} iterations",
                rayleigh_quotient=float("nan"), residual=float("inf"),
            ) from exc
        theta, vectors = exc.eigenvalues, exc.eigenvectors

    i = int(np.argmin(np.abs(theta)))
    x = vectors[:, i]
    x = x / np.sqrt(x @ (mass @ x))
    lam = float(theta[i])
    # Rayleigh quotient refresh
    lam = float(x @ sys.matvec(x))
    residual = _eigen_residual(sys, mass, lam, x)
    if residual > tol:
        raise EigenConvergenceError(
            f"eigen residual {residual:.2e} above tolerance {tol:.1e}",
            rayleigh_quotient=lam, residual=residual,
        )

    logger.info("smallest eigenvalue %.4e (residual %.2e)", lam, residual)
    return EigenResult(lam, x, residual, applications[0])
