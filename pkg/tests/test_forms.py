import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from ucwave.services.errors import AssemblyError, ConfigurationError
from ucwave.services.forms import (
    SaddleSystem,
    StabilizationWeights,
    assemble_A,
    assemble_data_mass,
    assemble_dual_stab,
    assemble_jump_stab,
    assemble_primal_stab,
    assemble_saddle,
    assemble_trace_coupling,
    tikhonov_stab,
    triple_norm,
)
from ucwave.services.mesh import build_mesh
from ucwave.services.solutions import reference
from ucwave.services.spaces import FieldPair, SlabSpace, build_trace_space, interpolate

GAUSS = 6


def _tensor_rule(mesh, cells=None):
    """Tensor Gauss points of every (slab, cell), independent of the assembly code."""
    s, w = np.polynomial.legendre.leggauss(GAUSS)
    s, w = 0.5 * (s + 1.0), 0.5 * w
    cells = range(mesh.n_x) if cells is None else cells
    t = (mesh.slabs[:, :1] + mesh.h_t * s).ravel()
    wt = np.tile(mesh.h_t * w, mesh.N)
    x = np.concatenate([mesh.spatial_nodes[c] + mesh.h_x * s for c in cells])
    wx = np.tile(mesh.h_x * w, len(cells))
    tt, xx = np.meshgrid(t, x, indexing="ij")
    return tt.ravel(), xx.ravel(), np.outer(wt, wx).ravel(), t, wt


def _gram(E, w, F):
    return (E.T @ sp.diags(w) @ F).toarray()


def _close(assembled, oracle, tol=1e-12):
    assembled = assembled.toarray() if sp.issparse(assembled) else assembled
    scale = max(np.abs(oracle).max(), 1.0)
    assert np.abs(assembled - oracle).max() <= tol * scale


@pytest.fixture
def oracle_space(single_slab_mesh):
    return SlabSpace(single_slab_mesh, 2, 2)


def test_A_matches_quadrature_oracle(oracle_space):
    space = oracle_space
    mesh = space.mesh
    t, x, w, t1, wt = _tensor_rule(mesh)
    E = space.tabulate(t, x)
    Ex = space.tabulate(t, x, dx=1)
    Et = space.tabulate(t, x, dt=1)

    flux = np.zeros((space.global_dof_count,) * 2)
    for x_b, normal in ((-mesh.params.R, -1.0), (0.0, 1.0)):
        Eb = space.tabulate(t1, np.full_like(t1, x_b))
        Ebx = space.tabulate(t1, np.full_like(t1, x_b), dx=1)
        flux -= normal * _gram(Eb, wt, Ebx)

    oracle = np.block([
        [_gram(Ex, w, Ex) + flux, _gram(E, w, Et)],
        [_gram(E, w, Et), -_gram(E, w, E)],
    ])
    _close(assemble_A(space, space), oracle)


def test_primal_stab_matches_quadrature_oracle(oracle_space):
    space = oracle_space
    mesh = space.mesh
    h = mesh.h_x
    weights = StabilizationWeights(gamma=0.3, s=2, c_J=1.5, c_G=0.7, c_I0=1.1)
    t, x, w, t1, wt = _tensor_rule(mesh)
    E = space.tabulate(t, x)
    Et = space.tabulate(t, x, dt=1)
    Exx = space.tabulate(t, x, dx=2)

    # gradient jumps; the left derivative is recovered exactly for quadratics
    delta = 1e-6 * h
    J = np.zeros((space.global_dof_count,) * 2)
    for f in mesh.interior_facets:
        x_f = mesh.spatial_nodes[f]
        right = space.tabulate(t1, np.full_like(t1, x_f), dx=1)
        x_l = np.full_like(t1, x_f - delta)
        left = space.tabulate(t1, x_l, dx=1) + delta * space.tabulate(t1, x_l, dx=2)
        J += h * _gram(right - left, wt, right - left)

    G1, G2 = -h * Exx, h * Et
    I1, I2 = -Et, E
    s11 = (weights.c_J * J + weights.c_G * _gram(G1, w, G1) + weights.c_I0 * _gram(I1, w, I1)
           + weights.gamma * h ** 4 * _gram(E, w, E))
    s12 = weights.c_G * _gram(G1, w, G2) + weights.c_I0 * _gram(I1, w, I2)
    s22 = weights.c_G * _gram(G2, w, G2) + weights.c_I0 * _gram(I2, w, I2)
    oracle = np.block([[s11, s12], [s12.T, s22]])
    _close(assemble_primal_stab(space, weights), oracle, tol=1e-11)


def test_dual_stab_and_data_mass_match_quadrature_oracle(oracle_space):
    space = oracle_space
    mesh = space.mesh
    weights = StabilizationWeights(gamma=1e-2, s=2, c_dual_sigma=2.0)
    t, x, w, t1, wt = _tensor_rule(mesh)
    E = space.tabulate(t, x)
    Ex = space.tabulate(t, x, dx=1)

    sigma = sum(_gram(Eb, wt, Eb) for Eb in
                (space.tabulate(t1, np.full_like(t1, x_b)) for x_b in (-mesh.params.R, 0.0)))
    s11 = _gram(E, w, E) + _gram(Ex, w, Ex) + weights.c_dual_sigma / mesh.h_x * sigma
    zero = np.zeros_like(s11)
    _close(assemble_dual_stab(space, weights), np.block([[s11, zero], [zero, _gram(E, w, E)]]))

    t, x, w, _, _ = _tensor_rule(mesh, cells=mesh.omega_cells)
    E = space.tabulate(t, x)
    _close(assemble_data_mass(space), _gram(E, w, E))


def test_multiplier_elimination_matches_projection(single_slab_mesh):
    # one slab, M = 1: eliminating mu leaves ||u - Q_M u||^2_Sigma
    space = SlabSpace(single_slab_mesh, 1, 1)
    mesh = space.mesh
    trace = build_trace_space(mesh.params, 1)
    uu, u_mu, mu_mu = assemble_trace_coupling(space, trace)
    schur = uu.toarray() - u_mu.toarray() @ np.linalg.solve(mu_mu.toarray(), u_mu.T.toarray())

    s, wq = np.polynomial.legendre.leggauss(20)
    t = mesh.slabs[0, 0] + mesh.h_t * 0.5 * (s + 1.0)
    wt = 0.5 * mesh.h_t * wq
    projected = np.zeros_like(schur)
    b = np.zeros(space.global_dof_count)
    gram = 0.0
    for x_b in mesh.params.boundary_points:
        Eb = space.tabulate(t, np.full_like(t, x_b)).toarray()
        phi = trace.values(t, np.full_like(t, x_b))[0]
        projected += Eb.T @ (wt[:, None] * Eb)
        b += Eb.T @ (wt * phi)
        gram += float(phi @ (wt * phi))
    projected -= np.outer(b, b) / gram

    assert np.abs(schur - projected).max() <= 1e-10 * np.abs(projected).max()


def test_primal_stab_is_psd(small_space, weights):
    S = assemble_primal_stab(small_space, weights).toarray()
    eigs = np.linalg.eigvalsh(S)
    assert eigs.min() >= -1e-12 * eigs.max()


def test_primal_stab_of_constant(small_space, weights, params):
    c = 3.0
    u1 = np.full(small_space.global_dof_count, c)
    u = np.concatenate((u1, np.zeros_like(u1)))
    S = assemble_primal_stab(small_space, weights)
    h = small_space.mesh.h_x
    expected = weights.gamma * h ** (2 * weights.s) * c ** 2 * params.cylinder_measure
    assert u @ (S @ u) == pytest.approx(expected, rel=1e-12)


def test_tikhonov_term_scales_with_h(params):
    values = []
    for n_x in (8, 16):
        space = SlabSpace(build_mesh(params, n_x, n_x), 1, 1)
        T_h = tikhonov_stab(space, StabilizationWeights(gamma=1.0, s=1))
        u1 = np.ones(space.global_dof_count)
        values.append(u1 @ (T_h @ u1))
        assert values[-1] == pytest.approx(space.mesh.h_x ** 2 * params.cylinder_measure, rel=1e-12)
    assert values[1] / values[0] == pytest.approx(0.25, rel=1e-12)


def test_tikhonov_is_the_only_gamma_dependence(small_space):
    base = StabilizationWeights(gamma=1.0, s=1)
    diff = assemble_primal_stab(small_space, base.with_gamma(2.0)) - assemble_primal_stab(small_space, base)
    n = small_space.global_dof_count
    T_h = tikhonov_stab(small_space, base).toarray()
    oracle = np.block([[T_h, np.zeros((n, n))], [np.zeros((n, n)), np.zeros((n, n))]])
    _close(diff, oracle, tol=1e-8)


def test_primal_weight_scales_J_G_I0_only(small_space):
    unit = StabilizationWeights(gamma=0.5, s=1)
    scaled = StabilizationWeights(gamma=0.5, s=1, c_primal=1e-3)
    n = small_space.global_dof_count
    T_h = tikhonov_stab(small_space, unit)
    tikhonov = sp.bmat([[T_h, None], [None, sp.csr_matrix((n, n))]])
    expected = 1e-3 * (assemble_primal_stab(small_space, unit) - tikhonov) + tikhonov
    _close(assemble_primal_stab(small_space, scaled), expected.toarray(), tol=1e-10)


def test_data_weight_scales_the_fit(small_space):
    data = reference()
    plain = assemble_saddle(small_space, small_space, StabilizationWeights(gamma=1e-2, s=1), data=data)
    heavy = assemble_saddle(small_space, small_space,
                            StabilizationWeights(gamma=1e-2, s=1, c_data=1e4), data=data)
    assert np.allclose(heavy.rhs, 1e4 * plain.rhs, rtol=1e-12, atol=0.0)

    layout = plain.layout
    S_1 = layout.selector("u1")
    fit = (S_1.T @ (heavy.to_sparse() - plain.to_sparse()) @ S_1).toarray()
    _close(fit, (1e4 - 1.0) * assemble_data_mass(small_space).toarray(), tol=1e-10)


def test_wave_operator_is_consistent(params):
    # sup_Y A[Pi_h U, Y] / ||Y||_{S*} for the exact pair U = (u, d_t u)
    u = reference()
    weights = StabilizationWeights(gamma=1e-2, s=2)
    sups = []
    for n_x in (8, 16):
        space = SlabSpace(build_mesh(params, n_x, n_x), 2, 2)
        U = np.concatenate((interpolate(space, u), interpolate(space, u.dt)))
        r = assemble_A(space, space) @ U
        S = assemble_dual_stab(space, weights).tocsc()
        sups.append(float(np.sqrt(r @ spsolve(S, r))))
    rate = np.log(sups[0] / sups[1]) / np.log(2.0)
    assert sups[1] < sups[0]
    assert rate >= 1.7


def test_gradient_jump_of_hat(small_space, weights):
    # |x + 1/2| is reproduced exactly and has a gradient jump of 2 at x = -1/2
    space = small_space
    mesh = space.mesh
    u1 = interpolate(space, lambda t, x: np.abs(x + 0.5))
    u = np.concatenate((u1, np.zeros_like(u1)))
    S = assemble_primal_stab(space, weights)

    jump = weights.c_J * mesh.h_x * 4.0 * mesh.params.duration
    tikhonov = weights.gamma * mesh.h_x ** 2 * mesh.params.duration / 12.0
    assert u @ (S @ u) == pytest.approx(jump + tikhonov, rel=1e-10)


def test_gamma_zero_without_trace_is_rejected(small_space):
    with pytest.raises(ConfigurationError):
        assemble_primal_stab(small_space, StabilizationWeights(gamma=0.0, s=1))


def test_negative_penalty_rejected():
    with pytest.raises(ConfigurationError):
        StabilizationWeights(gamma=1.0, s=1, c_J=-1.0)


def test_jump_vanishes_on_continuous_fields(small_space, weights):
    u1 = interpolate(small_space, lambda t, x: np.cos(t) * x)
    u = np.concatenate((u1, u1))
    assert abs(u @ (assemble_jump_stab(small_space, weights) @ u)) <= 1e-12


def test_unit_jump(two_slab_space, weights):
    space = two_slab_space
    u1 = np.zeros(space.global_dof_count)
    u1[space.slab_dofs(1)] = 1.0
    u = np.concatenate((u1, np.zeros_like(u1)))
    mesh = space.mesh
    value = u @ (assemble_jump_stab(space, weights) @ u)
    assert value == pytest.approx(mesh.params.R / mesh.h_t, rel=1e-12)


def test_jump_touches_only_interface_dofs(small_space, weights):
    space = small_space
    J = assemble_jump_stab(space, weights).tocsr()
    rows = set(np.flatnonzero(np.diff(J.indptr)))

    allowed = set()
    for n in range(space.mesh.N):
        for i in ([0] if n > 0 else []) + ([space.q] if n < space.mesh.N - 1 else []):
            start = n * space.dofs_per_slab + i * space.n_space
            for field in (0, space.global_dof_count):
                allowed.update(range(field + start, field + start + space.n_space))
    assert rows <= allowed


def test_dual_stab_is_spd(two_slab_space, weights):
    S = assemble_dual_stab(two_slab_space, weights).toarray()
    assert np.linalg.eigvalsh(S).min() > 0.0


def test_dual_stab_of_constant(two_slab_space, weights):
    space = two_slab_space
    p = space.mesh.params
    z = np.concatenate((np.full(space.global_dof_count, 2.0), np.zeros(space.global_dof_count)))
    expected = 4.0 * (p.cylinder_measure + 2.0 * p.duration / space.mesh.h_x)
    assert z @ (assemble_dual_stab(space, weights) @ z) == pytest.approx(expected, rel=1e-12)


def _random_pair(rng, space):
    n = space.global_dof_count
    return FieldPair(rng.standard_normal(n), rng.standard_normal(n))


@pytest.mark.parametrize("with_trace", [False, True])
@pytest.mark.parametrize("scales", [{}, {"c_primal": 1e-3, "c_data": 1e4, "c_trace": 1e4}])
def test_norm_identity(small_space, params, with_trace, scales):
    weights = StabilizationWeights(gamma=1e-2, s=1, **scales)
    trace = build_trace_space(params, 2) if with_trace else None
    system = assemble_saddle(small_space, small_space, weights, trace)
    layout = system.layout
    K = system.to_sparse()
    rng = np.random.default_rng(11)

    for _ in range(100):
        U, Z = _random_pair(rng, small_space), _random_pair(rng, small_space)
        mu = rng.standard_normal(layout.N * layout.n_mu) if with_trace else None
        fields = dict(u1=U.u1, u2=U.u2, z1=Z.u1, z2=Z.u2)
        if with_trace:
            fields["mu"] = mu
        x = layout.assemble_vector(**fields)
        y = layout.assemble_vector(**{**fields, "z1": -Z.u1, "z2": -Z.u2})
        expected = triple_norm(small_space, small_space, weights, trace, U, Z, mu) ** 2
        assert x @ (K @ y) == pytest.approx(expected, rel=1e-10)


def test_triple_norm_is_a_norm(small_space, weights):
    system = assemble_saddle(small_space, small_space, weights)
    layout = system.layout
    flip = layout.assemble_vector(
        u1=np.ones(layout.N * layout.n_primal), u2=np.ones(layout.N * layout.n_primal),
        z1=-np.ones(layout.N * layout.n_dual), z2=-np.ones(layout.N * layout.n_dual),
    )
    KJ = system.to_sparse().toarray() * flip[None, :]
    gram = 0.5 * (KJ + KJ.T)
    assert np.linalg.eigvalsh(gram).min() > 0.0


def test_saddle_is_symmetric_block_tridiagonal(small_space, weights, params):
    system = assemble_saddle(small_space, small_space, weights, build_trace_space(params, 3))
    K = system.to_sparse()
    assert abs(K - K.T).max() <= 1e-12 * abs(K).max()
    assert system.is_symmetric()

    size = system.layout.slab_size
    coo = K.tocoo()
    assert np.all(np.abs(coo.row // size - coo.col // size) <= 1)


def test_saddle_rejects_far_coupling():
    K = sp.lil_matrix((3, 3))
    K[0, 2] = K[2, 0] = 1.0
    with pytest.raises(AssemblyError):
        SaddleSystem.from_sparse(K, [1, 1, 1], np.zeros(3))


def test_saddle_rejects_foreign_mesh(small_space, weights, params):
    other = SlabSpace(build_mesh(params, 8, 4), 1, 1)
    with pytest.raises(AssemblyError):
        assemble_saddle(small_space, other, weights)
