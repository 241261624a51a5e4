import logging

import numpy as np
import pytest

from ucwave.clients.run_store import RunStore
from ucwave.services.config import ExperimentConfig
from ucwave.services.errors import AssumptionError, UsageError
from ucwave.services.experiments import (
    ExperimentReport,
    LevelResult,
    _worker_count,
    check_geometry,
    level_sizes,
    run_CM_study,
    run_convergence,
    run_noise_study,
    run_region_sweep,
    run_trace_experiment,
    run_worst_mode_study,
)
from ucwave.services.geometry import derive_params
from ucwave.services.spaces import FourierMode, TraceSpace

logger = logging.getLogger(__name__)


def test_level_sizes():
    cfg = ExperimentConfig().with_updates(mesh={"n_x": 8, "levels": 3})
    assert level_sizes(cfg) == [(8, 8), (16, 16), (32, 32)]


def test_failed_level_has_no_rates():
    report = ExperimentReport(kind="convergence", config={}, columns=["err_B"])
    report.levels = [
        LevelResult(0, 8, 8, 0.125, errors={"err_B": 1e-2}),
        LevelResult(1, 16, 16, 0.0625, failed="singular Schur complement in slab 3"),
        LevelResult(2, 32, 32, 0.03125, errors={"err_B": 6.25e-4}),
    ]
    report.compute_rates()
    assert report.eoc["err_B"] == [None, None]
    assert report.table_rows()[1]["err_B"] is None


def test_check_geometry_report():
    report = check_geometry(ExperimentConfig())
    assert report.diagnostics["pseudoconvexity"]["passed"]
    assert abs(report.diagnostics["params"]["T"] - 0.843) < 1e-3
    assert "A1" not in report.diagnostics


def test_check_geometry_on_forward_interval():
    cfg = ExperimentConfig().with_updates(geometry={"time_interval": "forward", "T": 2.0})
    report = check_geometry(cfg)
    assert report.diagnostics["A1"]["holds"]
    assert report.diagnostics["gamma_slices"]["0.0"] == pytest.approx((0.75, 1.25))


def test_convergence_plumbing(quick_cfg):
    report = run_convergence(quick_cfg)
    assert [lv.failed for lv in report.levels] == [None, None]
    assert {"err_omega", "err_B", "err_QminusB", "err_Q", "err_B_raw", "err_interp"} <= set(report.columns)
    assert len(report.eoc["err_B"]) == 1
    for lv in report.levels:
        assert lv.diagnostics["fits_better_than_zero"]
        assert lv.errors["err_B"] <= lv.errors["err_Q"]


def test_reports_are_deterministic(quick_cfg, tmp_path):
    for name in ("a", "b"):
        RunStore(tmp_path / name).write_report(run_convergence(quick_cfg))
    assert (tmp_path / "a" / "table.csv").read_bytes() == (tmp_path / "b" / "table.csv").read_bytes()
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_gamma_sweep_adds_sub_reports(quick_cfg):
    cfg = quick_cfg.with_updates(experiment={"gammas": [1e-1, 1e-3]})
    report = run_convergence(cfg)
    assert sorted(report.sub_reports) == ["gamma=0.001", "gamma=0.1"]


def test_trace_experiment_refuses_space_violating_A1():
    cfg = ExperimentConfig().with_updates(geometry={"time_interval": "forward", "T": 1.0})
    params = derive_params(cfg.geometry)
    adversarial = TraceSpace.from_functions(params, [FourierMode(1), _vanishing_on_left])
    with pytest.raises(AssumptionError, match="A1"):
        run_trace_experiment(cfg, trace_space=adversarial)


def _vanishing_on_left(t, x):
    # zero on x = -1, the only part of Gamma when T = 1
    return np.cos(np.pi * t / 4.0) * np.sin(np.pi * (x + 1.0) / 4.0)


def test_data_misfit_decays_at_interpolation_rate(quick_cfg):
    report = run_convergence(quick_cfg)
    misfit = report.column("err_omega_raw")
    interp = report.column("err_interp")
    assert report.finest_eoc("err_omega_raw") >= 1.6
    for fit, best in zip(misfit, interp):
        assert fit <= best


def test_unit_kappa_reproduces_B(quick_cfg):
    sweep = run_region_sweep(quick_cfg, kappas=[1.0])
    plain = run_convergence(quick_cfg)
    assert sweep.column("err_B_1") == pytest.approx(plain.column("err_B"), rel=1e-12)
    assert sweep.column("err_B") == pytest.approx(plain.column("err_B"), rel=1e-12)


def test_CM_study_refuses_space_violating_A1():
    # for T = 1 Gamma lies on x = -1 only, where phi_2 vanishes
    cfg = ExperimentConfig().with_updates(geometry={"time_interval": "forward", "T": 1.0})
    with pytest.raises(AssumptionError, match="A1"):
        run_CM_study(cfg, M_list=[2])


@pytest.mark.parametrize("cap, expected", [("", None), ("1", 1), (" 2 ", 2), ("64", 5)])
def test_worker_count(monkeypatch, cap, expected):
    monkeypatch.setenv("UCWAVE_THREADS", cap)
    count = _worker_count(5)
    if expected is None:
        assert 1 <= count <= 5
    else:
        assert count == expected


@pytest.mark.parametrize("cap", ["zero", "0", "-1", "2.5"])
def test_worker_count_rejects_bad_cap(monkeypatch, cap):
    monkeypatch.setenv("UCWAVE_THREADS", cap)
    with pytest.raises(UsageError, match="UCWAVE_THREADS"):
        _worker_count(4)


# --------------------------------------------------
# Full studies
# --------------------------------------------------
@pytest.fixture(scope="module")
def convergence_report():
    return run_convergence(ExperimentConfig())


@pytest.mark.slow
def test_clean_data_converges_in_B(convergence_report):
    rate = convergence_report.finest_eoc("err_B")
    logger.info("finest EOC in B: %.3f", rate)
    assert rate >= 1.6


@pytest.mark.slow
def test_complement_converges_slowly(convergence_report):
    errors = convergence_report.column("err_QminusB")
    assert all(b < a for a, b in zip(errors, errors[1:]))
    assert convergence_report.finest_eoc("err_QminusB") <= 0.7


@pytest.mark.slow
def test_rates_decline_with_kappa():
    report = run_region_sweep(ExperimentConfig())
    rates = [report.finest_eoc(f"err_B_{kappa:g}") for kappa in (1.0, 0.75, 0.5, 0.25)]
    logger.info("finest EOC along kappa: %s", rates)
    for larger, smaller in zip(rates, rates[1:]):
        assert smaller <= larger + 0.2


@pytest.mark.slow
def test_noise_slopes_follow_theta():
    report = run_noise_study(ExperimentConfig())
    for theta in (1.0, 1.5, 2.0):
        assert report.fits[f"slope_B_theta={theta:g}"] == pytest.approx(theta, abs=0.3)


@pytest.mark.slow
def test_worst_mode_noise_reduces_the_rate():
    report = run_worst_mode_study(ExperimentConfig())
    for eig in report.diagnostics["eigen"]:
        assert eig["residual"] <= 1e-8
    finest = report.levels[-1].diagnostics["mode_mass"]
    assert finest["ratio_omega_QminusB"] < 0.2
    assert report.fits["alpha_hat"] < report.fits["alpha_hat_smooth"]


@pytest.mark.slow
def test_trace_space_recovers_everywhere():
    report = run_trace_experiment(ExperimentConfig(), M=2)
    assert report.diagnostics["A1"]["holds"]
    assert report.finest_eoc("err_QminusB") >= 1.5


@pytest.mark.slow
def test_wrong_trace_space_spoils_convergence():
    report = run_trace_experiment(ExperimentConfig(), M=1)
    assert report.finest_eoc("err_QminusB") <= 0.5


@pytest.mark.slow
def test_perturbed_solution_plateaus():
    # quadratics reach the eta level within four refinements
    eta = 1e-3
    cfg = ExperimentConfig().with_updates(space={"k": 2, "q": 2})
    report = run_trace_experiment(cfg, M=2, eta=eta)
    rates = report.eoc["err_Q"]
    assert any(rate is not None and rate < 0.5 for rate in rates)
    assert 0.1 * eta <= report.column("err_Q")[-1] <= 10.0 * eta


@pytest.mark.slow
def test_CM_constants_grow_with_M():
    report = run_CM_study(ExperimentConfig())
    rows = report.cm_table
    assert [row["M"] for row in rows] == [2, 3, 4, 5, 6]
    for row in rows:
        assert row["C_M"] >= row["C_M_opt"] / 1.5
    constants = [row["C_M"] for row in rows]
    assert all(b > a for a, b in zip(constants, constants[1:]))
