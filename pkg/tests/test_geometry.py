import dataclasses
import math
import time

import numpy as np
import pytest

from ucwave.services.config import GeometryConfig
from ucwave.services.errors import ConfigurationError, UsageError
from ucwave.services.geometry import (
    Region,
    check_pseudoconvexity,
    derive_params,
    gamma_contains,
    gamma_intervals,
    grad_psi,
    psi,
    region_contains,
)


def test_derived_parameters(params):
    assert abs(params.T - 0.843) < 1e-3
    assert params.rho0 == pytest.approx(0.8125, abs=1e-14)
    assert params.rho1 == pytest.approx(1.5625, abs=1e-14)
    assert params.rho == pytest.approx(0.8875, abs=1e-14)
    assert params.delta == pytest.approx(0.08875, abs=1e-14)


def test_rho_at_lower_end():
    p = derive_params(GeometryConfig(r=0.5, R=1.0, beta=0.5, eps=0.05, rho_fraction=0.0))
    assert p.rho == pytest.approx(0.5)
    assert p.rho == p.rho0


def test_explicit_T_below_bound_is_rejected():
    with pytest.raises(ConfigurationError, match="sqrt"):
        derive_params(GeometryConfig(T=0.5))


def test_explicit_T_at_bound_accepted(params):
    p = derive_params(GeometryConfig(T=params.T))
    assert p.T == params.T


def test_monotone_in_rho_fraction():
    fractions = [0.0, 0.1, 0.3, 0.6, 0.9]
    derived = [derive_params(GeometryConfig(rho_fraction=f)) for f in fractions]
    for a, b in zip(derived, derived[1:]):
        assert b.rho > a.rho
        assert b.T < a.T


@pytest.mark.parametrize("t, x, expected", [
    (0.0, 0.0, 0.25),
    (0.0, -0.75, 1.5625),
    (1.0, -0.5, 0.05),
])
def test_psi_values(params, t, x, expected):
    assert psi(params, t, x) == pytest.approx(expected, abs=1e-14)


def test_region_B_membership(params):
    assert region_contains(params, Region.B(), 0.0, -0.9)
    assert not region_contains(params, Region.B(), 0.0, -0.2)

    edge = params.beta - math.sqrt(params.rho)
    assert edge == pytest.approx(-0.442, abs=1e-3)
    assert region_contains(params, Region.B(), 0.0, edge - 1e-9)
    assert not region_contains(params, Region.B(), 0.0, edge + 1e-9)


def test_B_kappa_one_is_B(params):
    rng = np.random.default_rng(1)
    t = rng.uniform(-params.T, params.T, 5000)
    x = rng.uniform(-params.R, 0.0, 5000)
    assert np.array_equal(region_contains(params, Region.B(), t, x),
                          region_contains(params, Region.B_kappa(1.0), t, x))


def test_B_kappa_nested(params):
    t, x = np.meshgrid(np.linspace(-params.T, params.T, 201), np.linspace(-params.R, 0.0, 201))
    kappas = [1.0, 0.75, 0.5, 0.25]
    masks = [region_contains(params, Region.B_kappa(k), t, x) for k in kappas]
    for larger_kappa, smaller_kappa in zip(masks, masks[1:]):
        assert np.all(smaller_kappa[larger_kappa])


def test_kappa_out_of_range():
    with pytest.raises(UsageError):
        Region.B_kappa(0.0)


def test_data_set_meets_B_but_B_is_not_everything(params):
    t, x = np.meshgrid(np.linspace(-params.T, params.T, 101), np.linspace(-params.R, 0.0, 101))
    in_B = region_contains(params, Region.B(), t, x)
    in_data = region_contains(params, Region.data(), t, x)
    assert np.any(in_B & in_data)
    assert not np.all(in_B)


def test_pseudoconvexity_passes_quickly(params):
    start = time.perf_counter()
    report = check_pseudoconvexity(params, 10_000, rng_seed=0)
    elapsed = time.perf_counter() - start

    assert report.passed
    assert report.hessian_error <= 1e-13
    assert report.hessian_constant == pytest.approx(2 * params.eps)
    assert elapsed < 1.0


def test_pseudoconvexity_fails_without_eps(params):
    degenerate = dataclasses.replace(params, eps=0.0)
    report = check_pseudoconvexity(degenerate, 100, rng_seed=0)
    assert not report.passed
    assert report.offending_point is not None


def test_pseudoconvexity_for_random_configs():
    rng = np.random.default_rng(7)
    for _ in range(20):
        R = rng.uniform(0.5, 2.0)
        cfg = GeometryConfig(
            R=R,
            r=rng.uniform(0.1, 0.9) * R,
            beta=rng.uniform(0.1, 1.0),
            eps=rng.uniform(0.01, 0.9),
            rho_fraction=rng.uniform(0.0, 0.9),
            delta_fraction=rng.uniform(0.05, 0.9),
        )
        assert check_pseudoconvexity(derive_params(cfg), 500, rng_seed=3).passed


def test_non_characteristic_margin_by_hand(params):
    dt, dx = grad_psi(params, 0.5, -0.9)
    assert dx ** 2 - dt ** 2 == pytest.approx(4 * (1.96 - 0.9025 * 0.25))
    assert dx ** 2 - dt ** 2 > 0.0


def test_gamma_membership():
    cfg = GeometryConfig(time_interval="forward")
    T = derive_params(cfg).T
    t = np.linspace(0.0, T, 11)
    assert np.all(gamma_contains(cfg, T, t, -1.0))
    assert not gamma_contains(cfg, 0.843, 0.843 / 2, 0.0)
    assert gamma_contains(GeometryConfig(time_interval="forward", T=2.0), 2.0, 1.0, 0.0)


def test_gamma_needs_forward_interval(geometry_cfg, params):
    with pytest.raises(UsageError):
        gamma_contains(geometry_cfg, params.T, 0.1, -1.0)


def test_gamma_slices(forward_params):
    slices = gamma_intervals(forward_params)
    assert slices[-1.0] == (0.0, 2.0)
    assert slices[0.0] == pytest.approx((0.75, 1.25))
