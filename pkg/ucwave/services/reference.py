"""
reference.py

Reference-interval building blocks shared by spaces and forms.

Responsibilities:
- Gauss-Legendre and Gauss-Lobatto rules on [0, 1]
- Nodal Lagrange bases on Gauss-Lobatto points and their derivatives
- Reference element matrices int_0^1 phi_i^(a) phi_j^(b), cached

Everything here is pure; the caches only avoid recomputation.
"""

import logging

import numpy as np
from numpy.polynomial import legendre, polynomial

logger = logging.getLogger(__name__)


# Cached reference data (small and immutable once built)
RULE_CACHE = {}
BASIS_CACHE = {}
MATRIX_CACHE = {}


def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """
    n-point Gauss-Legendre rule on [0, 1], exact up to degree 2n - 1.
    """
    key = ("gl", n)
    if key not in RULE_CACHE:
        x, w = legendre.leggauss(n)
        RULE_CACHE[key] = (0.5 * (x + 1.0), 0.5 * w)
    return RULE_CACHE[key]


def gauss_lobatto_nodes(degree: int) -> np.ndarray:
    """
    degree + 1 Gauss-Lobatto points on [0, 1].

    Degree 0 uses the midpoint so that a piecewise constant is still nodal.
    """
    key = ("gll", degree)
    if key not in RULE_CACHE:
        if degree == 0:
            nodes = np.array([0.5])
        elif degree == 1:
            nodes = np.array([0.0, 1.0])
        else:
            interior = legendre.Legendre.basis(degree).deriv().roots()
            nodes = 0.5 * (np.concatenate(([-1.0], np.sort(interior.real), [1.0])) + 1.0)
        RULE_CACHE[key] = nodes
    return RULE_CACHE[key]


class LagrangeBasis:
    """
    Nodal Lagrange basis of a given degree on [0, 1].

    Basis polynomials are stored as monomial coefficients; the degrees used
    in this package are small enough for the Vandermonde inverse to be exact
    to rounding.
    """

    def __init__(self, degree: int):
        self.degree = degree
        self.nodes = gauss_lobatto_nodes(degree)
        vander = np.vander(self.nodes, degree + 1, increasing=True)
        # column i holds the coefficients of phi_i
        self.coefficients = np.linalg.inv(vander)

    def values(self, xi, derivative: int = 0) -> np.ndarray:
        """
        Evaluate all basis functions (or a derivative) at points xi.

        Returns an array of shape (len(xi), degree + 1).
        """
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        out = np.empty((xi.size, self.degree + 1))
        for i in range(self.degree + 1):
            coeffs = self.coefficients[:, i]
            if derivative:
                coeffs = polynomial.polyder(coeffs, derivative)
            out[:, i] = polynomial.polyval(xi, coeffs)
        return out


def lagrange_basis(degree: int) -> LagrangeBasis:
    """
    Return the cached nodal basis of the given degree.
    """
    if degree in BASIS_CACHE:
        logger.debug("CACHE HIT: lagrange basis degree %d", degree)
        return BASIS_CACHE[degree]

    logger.debug("CACHE MISS: lagrange basis degree %d", degree)
    BASIS_CACHE[degree] = LagrangeBasis(degree)
    return BASIS_CACHE[degree]


def reference_matrix(test_degree: int, test_derivative: int,
                     trial_degree: int, trial_derivative: int) -> np.ndarray:
    """
    Reference matrix  M[i, j] = int_0^1 phi_i^(a)(s) chi_j^(b)(s) ds.

    phi are the test basis functions, chi the trial ones. No scaling with
    the physical element length is applied here.
    """
    key = (test_degree, test_derivative, trial_degree, trial_derivative)
    if key in MATRIX_CACHE:
        return MATRIX_CACHE[key]

    # integrand degree is at most test_degree + trial_degree
    xi, w = gauss_legendre((test_degree + trial_degree) // 2 + 2)
    test = lagrange_basis(test_degree).values(xi, test_derivative)
    trial = lagrange_basis(trial_degree).values(xi, trial_derivative)
    MATRIX_CACHE[key] = test.T @ (w[:, None] * trial)
    return MATRIX_CACHE[key]


def endpoint_values(degree: int, derivative: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """
    Basis values (or derivatives) at s = 0 and s = 1.
    """
    basis = lagrange_basis(degree)
    both = basis.values(np.array([0.0, 1.0]), derivative)
    return both[0], both[1]
