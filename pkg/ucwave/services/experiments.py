"""
experiments.py

Convergence drivers for the unique continuation method.

Responsibilities:
- Solve one refinement level (mesh, spaces, assembly, solve) and measure
  region errors of the lifted and the raw primal field
- Convergence, region (B_kappa) sweep, smooth-noise and worst-mode studies
- Finite dimensional trace experiments, the C_M constants and the
  geometry report behind `ucwave check-geometry`

Levels are independent and run on a thread pool capped by the
UCWAVE_THREADS environment variable. A level that fails numerically is
kept in the report with its error message and left out of every rate.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ucwave.services.config import ExperimentConfig
from ucwave.services.errors import AssemblyError, AssumptionError, NumericalError, UsageError
from ucwave.services.forms import (
    SaddleLayout,
    SaddleSystem,
    StabilizationWeights,
    assemble_mass,
    assemble_saddle,
)
from ucwave.services.geometry import (
    Region,
    WeightParams,
    check_pseudoconvexity,
    derive_params,
    gamma_intervals,
)
from ucwave.services.measures import (
    SubdivisionQuadrature,
    eoc,
    eoc_table,
    error_norms,
    fit_slope,
    norms_by_slab,
)
from ucwave.services.mesh import SpaceTimeMesh, build_mesh
from ucwave.services.noise import NoiseSpec, correlation, data_norm, make_noise
from ucwave.services.solutions import ManufacturedSolution, build_solution, fourier, perturbed
from ucwave.services.solver import factorize, smallest_eigenpair, solve
from ucwave.services.spaces import (
    SlabSpace,
    TraceSpace,
    build_trace_space,
    check_A1,
    eval_field,
    interpolate,
    lift,
)

logger = logging.getLogger(__name__)

# Samples used by the pseudoconvexity check of check-geometry
GEOMETRY_SAMPLES = 10_000
# Final time of the trace experiments when none is configured
TRACE_FINAL_TIME = 2.0


# --------------------------------------------------
# Report types
# --------------------------------------------------
@dataclass
class LevelResult:
    level: int
    n_x: int
    N: int
    h: float
    errors: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    failed: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "n_x": self.n_x,
            "N": self.N,
            "h": self.h,
            "errors": self.errors,
            "diagnostics": self.diagnostics,
            "failed": self.failed,
        }


@dataclass
class ExperimentReport:
    kind: str
    config: dict
    solution: Optional[dict] = None
    columns: list = field(default_factory=list)
    levels: list = field(default_factory=list)
    eoc: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    cm_table: list = field(default_factory=list)
    sub_reports: dict = field(default_factory=dict)

    @property
    def hs(self) -> list[float]:
        return [lv.h for lv in self.levels]

    def column(self, name: str) -> list[Optional[float]]:
        return [None if lv.failed else lv.errors.get(name) for lv in self.levels]

    def finest_eoc(self, name: str) -> Optional[float]:
        rates = self.eoc.get(name) or []
        return rates[-1] if rates else None

    def compute_rates(self) -> None:
        if len(self.levels) < 2:
            return
        for name in self.columns:
            self.eoc[name] = eoc(self.column(name), self.hs)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "solution": self.solution,
            "config": self.config,
            "columns": self.columns,
            "levels": [lv.to_dict() for lv in self.levels],
            "eoc": self.eoc,
            "fits": self.fits,
            "diagnostics": self.diagnostics,
            "cm_table": self.cm_table,
            "sub_reports": {name: sub.to_dict() for name, sub in self.sub_reports.items()},
        }

    def table_rows(self) -> list[dict]:
        """
        Flat rows for table.csv: level, h, error columns, then eoc_<column>
        against the previous level.
        """
        if self.cm_table:
            return [dict(row) for row in self.cm_table]
        if self.sub_reports and not self.levels:
            rows = []
            for name, sub in self.sub_reports.items():
                rows.extend({"series": name, **row} for row in sub.table_rows())
            return rows

        rows = []
        for i, lv in enumerate(self.levels):
            row = {"level": lv.level, "h": lv.h}
            for name in self.columns:
                row[name] = None if lv.failed else lv.errors.get(name)
            for name in self.columns:
                rates = self.eoc.get(name)
                row[f"eoc_{name}"] = rates[i - 1] if rates and i > 0 else None
            rows.append(row)
        return rows


# --------------------------------------------------
# One level
# --------------------------------------------------
@dataclass(frozen=True, eq=False)
class LevelSolution:
    mesh: SpaceTimeMesh
    space: SlabSpace
    dual_space: SlabSpace
    system: SaddleSystem
    x: np.ndarray
    noise: np.ndarray
    trace: Optional[TraceSpace] = None

    @property
    def layout(self) -> SaddleLayout:
        return self.system.layout

    @property
    def u1(self) -> np.ndarray:
        return self.layout.extract(self.x, "u1")

    @property
    def u2(self) -> np.ndarray:
        return self.layout.extract(self.x, "u2")

    @property
    def z(self) -> tuple[np.ndarray, np.ndarray]:
        return self.layout.extract(self.x, "z1"), self.layout.extract(self.x, "z2")


def _worker_count(jobs: int) -> int:
    cap = os.environ.get("UCWAVE_THREADS", "").strip()
    if not cap:
        limit = os.cpu_count() or 1
    else:
        try:
            limit = int(cap)
        except ValueError:
            raise UsageError(f"UCWAVE_THREADS must be a positive integer, got {cap!r}") from None
        if limit < 1:
            raise UsageError(f"UCWAVE_THREADS must be a positive integer, got {cap!r}")
    return max(1, min(jobs, limit))


def _map_levels(fn: Callable, items: Sequence) -> list:
    workers = _worker_count(len(items))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def level_sizes(cfg: ExperimentConfig) -> list[tuple[int, int]]:
    n_x, N = cfg.mesh.n_x, cfg.mesh.n_slabs
    return [(n_x * 2 ** level, N * 2 ** level) for level in range(cfg.mesh.levels)]


def build_level(cfg: ExperimentConfig, n_x: int, N: int):
    params = derive_params(cfg.geometry)
    mesh = build_mesh(params, n_x, N)
    space = SlabSpace(mesh, cfg.space.k, cfg.space.q)
    dual_space = SlabSpace(mesh, cfg.space.dual_k, cfg.space.dual_q)
    return params, mesh, space, dual_space


def configured_trace(cfg: ExperimentConfig, params: WeightParams) -> Optional[TraceSpace]:
    if not cfg.forms.use_trace_space:
        return None
    ts = cfg.space.trace_space
    return build_trace_space(params, ts.M, ts.family)


def solve_level(cfg: ExperimentConfig, n_x: int, N: int, solution: ManufacturedSolution,
                noise_spec: Optional[NoiseSpec] = None,
                trace: Optional[TraceSpace] = None,
                mode_u1: Optional[np.ndarray] = None) -> LevelSolution:
    """
    Assemble and solve one level with data u + delta_u on omega_T.
    """
    params, mesh, space, dual_space = build_level(cfg, n_x, N)
    if trace is None:
        trace = configured_trace(cfg, params)
    weights = StabilizationWeights.from_config(cfg.forms, cfg.space)

    noise_spec = noise_spec or NoiseSpec()
    noise = make_noise(noise_spec, space, solution, mesh.h, mode_u1)

    system = assemble_saddle(space, dual_space, weights, trace, data=solution,
                             noise=noise if noise_spec.kind != "none" else None)
    x = solve(factorize(system), system.rhs, cfg.solver.refine_steps)
    return LevelSolution(mesh, space, dual_space, system, x, noise, trace)


def region_set(kappas: Sequence[float] = ()) -> dict[str, Region]:
    regions = {"err_omega": Region.data(), "err_B": Region.B()}
    for kappa in kappas:
        regions[f"err_B_{kappa:g}"] = Region.B_kappa(kappa)
    regions["err_QminusB"] = Region.complement_B()
    regions["err_Q"] = Region.cylinder()
    return regions


def measure_level(sol: LevelSolution, solution: ManufacturedSolution,
                  regions: dict[str, Region], n_sub: int) -> tuple[dict, dict]:
    """
    Region errors of L_h u1 (plain column names) and of the raw u1
    (suffix _raw), the interpolation error and the data-fit check.
    """
    quad = SubdivisionQuadrature.build(sol.mesh, n_sub)
    u1 = sol.u1

    errors = error_norms(solution, lift(sol.space, u1), regions, quad)
    raw = error_norms(solution, lambda t, x: eval_field(sol.space, u1, t, x), regions, quad)
    errors.update({f"{name}_raw": value for name, value in raw.items()})

    best = interpolate(sol.space, solution)
    errors["err_interp"] = error_norms(
        solution, lambda t, x: eval_field(sol.space, best, t, x), {"Q": Region.cylinder()}, quad
    )["Q"]

    # ||u1 - (u + du)||_{omega_T} against ||u + du||_{omega_T}
    data = {"omega": Region.data()}
    misfit = error_norms(solution, lambda t, x: eval_field(sol.space, u1 - sol.noise, t, x), data, quad)["omega"]
    size = error_norms(solution, lambda t, x: eval_field(sol.space, -sol.noise, t, x), data, quad)["omega"]
    diagnostics = {
        "data_misfit": misfit,
        "data_norm": size,
        "fits_better_than_zero": bool(misfit <= size * (1.0 + 1e-8)),
        "noise_norm": data_norm(sol.space, sol.noise),
        "h_t": sol.mesh.h_t,
    }
    return errors, diagnostics


def _run_level(level: int, n_x: int, N: int, R: float,
               body: Callable[[int, int], tuple[dict, dict]]) -> LevelResult:
    result = LevelResult(level=level, n_x=n_x, N=N, h=R / n_x)
    try:
        errors, diagnostics = body(n_x, N)
    except (NumericalError, AssemblyError) as exc:
        logger.error("level %d (n_x=%d, N=%d) failed: %s", level, n_x, N, exc)
        result.failed = str(exc)
        return result
    result.errors = errors
    result.diagnostics = diagnostics
    logger.info("level %d (n_x=%d, N=%d) done", level, n_x, N)
    return result


def _levels(cfg: ExperimentConfig, body: Callable[[int, int], tuple[dict, dict]]) -> list[LevelResult]:
    R = cfg.geometry.R
    return _map_levels(lambda item: _run_level(item[0], *item[1], R, body),
                       list(enumerate(level_sizes(cfg))))


def _log_rates(report: ExperimentReport, names: Sequence[str]) -> None:
    for name in names:
        if name in report.columns:
            logger.info("%s\n%s", name, eoc_table(report.hs, report.column(name), name))


# --------------------------------------------------
# Drivers
# --------------------------------------------------
def _convergence(cfg: ExperimentConfig, kind: str, kappas: Sequence[float] = (),
                 noise_spec: Optional[NoiseSpec] = None) -> ExperimentReport:
    solution = build_solution(cfg.experiment)
    regions = region_set(kappas)
    noise_spec = noise_spec or NoiseSpec.from_config(cfg.noise)
    if noise_spec.kind == "worst_mode":
        return _worst_mode_convergence(cfg, solution, regions, noise_spec, kind)

    def body(n_x, N):
        sol = solve_level(cfg, n_x, N, solution, noise_spec)
        return measure_level(sol, solution, regions, cfg.experiment.n_sub)

    report = ExperimentReport(kind=kind, config=cfg.model_dump(), solution=solution.to_dict())
    report.levels = _levels(cfg, body)
    report.columns = list(regions) + [f"{name}_raw" for name in regions] + ["err_interp"]
    report.compute_rates()
    report.fits["slope_B"] = fit_slope(report.hs, report.column("err_B"))
    report.diagnostics["noise"] = {"kind": noise_spec.kind, "theta": noise_spec.theta}
    _log_rates(report, ("err_B", "err_QminusB"))
    return report


def run_convergence(cfg: ExperimentConfig) -> ExperimentReport:
    """
    Errors in omega_T, B, Q minus B and Q over uniform refinements.

    A list of gamma values in the experiment options adds one sub-report
    per value.
    """
    report = _convergence(cfg, "convergence")
    for gamma in cfg.experiment.gammas or []:
        sub_cfg = cfg.with_updates(forms={"gamma": gamma})
        report.sub_reports[f"gamma={gamma:g}"] = _convergence(sub_cfg, "convergence")
    return report


def run_region_sweep(cfg: ExperimentConfig, kappas: Optional[Sequence[float]] = None) -> ExperimentReport:
    """Convergence table with one B_kappa column per kappa."""
    kappas = list(kappas if kappas is not None else cfg.experiment.kappas)
    for kappa in kappas:
        if not 0.0 < kappa <= 1.0:
            raise UsageError(f"kappa values must lie in (0, 1], got {kappa}")
    report = _convergence(cfg, "region-sweep", kappas)
    report.diagnostics["kappas"] = kappas
    _log_rates(report, [f"err_B_{kappa:g}" for kappa in kappas])
    return report


def run_noise_study(cfg: ExperimentConfig, thetas: Optional[Sequence[float]] = None) -> ExperimentReport:
    """
    Smooth noise of size h^theta for every theta; the fitted slope of the
    B-error is expected near theta.
    """
    thetas = list(thetas if thetas is not None else cfg.experiment.thetas)
    report = ExperimentReport(kind="noise", config=cfg.model_dump())
    for theta in thetas:
        spec = NoiseSpec("smooth", theta, cfg.noise.seed)
        sub = _convergence(cfg, "noise", noise_spec=spec)
        report.sub_reports[f"theta={theta:g}"] = sub
        report.fits[f"slope_B_theta={theta:g}"] = sub.fits["slope_B"]
    return report


def _eigen_level(cfg: ExperimentConfig, n_x: int, N: int, trace: Optional[TraceSpace] = None):
    params, mesh, space, dual_space = build_level(cfg, n_x, N)
    if trace is None:
        trace = configured_trace(cfg, params)
    weights = StabilizationWeights.from_config(cfg.forms, cfg.space)
    system = assemble_saddle(space, dual_space, weights, trace)
    mass = assemble_mass(space, dual_space, trace)
    result = smallest_eigenpair(system, mass, cfg.solver.eig_tol, cfg.solver.eig_max_iter,
                                cfg.solver.eig_block, seed=cfg.noise.seed)
    return space, system.layout, result


def _mode_distribution(space: SlabSpace, mode_u1: np.ndarray, n_sub: int) -> dict:
    """Mass of the mode's u1 component on omega_T, B and Q minus B, also per slab."""
    quad = SubdivisionQuadrature.build(space.mesh, n_sub)

    def field_fn(t, x):
        return eval_field(space, mode_u1, t, x)

    regions = {"omega": Region.data(), "B": Region.B(), "QminusB": Region.complement_B()}
    totals = error_norms(lambda t, x: 0.0, field_fn, regions, quad)
    per_slab = {name: norms_by_slab(field_fn, region, quad) for name, region in regions.items()}
    ratio = totals["omega"] / totals["QminusB"] if totals["QminusB"] > 0 else float("inf")
    return {"totals": totals, "per_slab": per_slab, "ratio_omega_QminusB": ratio}


def _worst_mode_convergence(cfg, solution, regions, noise_spec, kind) -> ExperimentReport:
    smooth_spec = NoiseSpec("smooth", noise_spec.theta, noise_spec.seed)

    def body(n_x, N):
        space, layout, eig = _eigen_level(cfg, n_x, N)
        mode_u1 = layout.extract(eig.mode, "u1")
        worst = solve_level(cfg, n_x, N, solution, noise_spec, mode_u1=mode_u1)
        errors, diagnostics = measure_level(worst, solution, regions, cfg.experiment.n_sub)

        smooth = solve_level(cfg, n_x, N, solution, smooth_spec)
        smooth_errors, _ = measure_level(smooth, solution, regions, cfg.experiment.n_sub)
        errors["err_B_smooth"] = smooth_errors["err_B"]

        diagnostics["eigen"] = eig.to_dict()
        diagnostics["mode_mass"] = _mode_distribution(space, mode_u1, cfg.experiment.n_sub)
        diagnostics["noise_correlation"] = correlation(worst.space, worst.noise, smooth.noise)
        return errors, diagnostics

    report = ExperimentReport(kind=kind, config=cfg.model_dump(), solution=solution.to_dict())
    report.levels = _levels(cfg, body)
    report.columns = list(regions) + [f"{name}_raw" for name in regions] + ["err_interp", "err_B_smooth"]
    report.compute_rates()

    s = min(cfg.space.q, cfg.space.k)
    report.fits["slope_B"] = fit_slope(report.hs, report.column("err_B"))
    report.fits["slope_B_smooth"] = fit_slope(report.hs, report.column("err_B_smooth"))
    report.fits["alpha_hat"] = report.fits["slope_B"] / s if s else float("nan")
    report.fits["alpha_hat_smooth"] = report.fits["slope_B_smooth"] / s if s else float("nan")
    report.diagnostics["noise"] = {"kind": "worst_mode", "theta": noise_spec.theta}
    report.diagnostics["eigen"] = [lv.diagnostics.get("eigen") for lv in report.levels]
    _log_rates(report, ("err_B", "err_B_smooth"))
    return report


def run_worst_mode_study(cfg: ExperimentConfig) -> ExperimentReport:
    """
    Worst-case noise from the smallest eigenpair of the stabilized pencil,
    compared with smooth noise of the same size.

    theta defaults to 2 unless the noise block selects worst_mode noise
    with its own theta.
    """
    theta = cfg.noise.theta if cfg.noise.kind == "worst_mode" else 2.0
    spec = NoiseSpec("worst_mode", theta, cfg.noise.seed)
    return _convergence(cfg, "worst-mode", noise_spec=spec)


def _trace_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Forward interval, T = 2 unless configured, gamma = 0, multiplier on."""
    if cfg.geometry.time_interval == "forward" and cfg.geometry.T is not None:
        T = cfg.geometry.T
    else:
        T = TRACE_FINAL_TIME
        logger.info("trace experiment runs on the forward interval [0, %g]", T)
    return cfg.with_updates(geometry={"time_interval": "forward", "T": T},
                            forms={"gamma": 0.0, "use_trace_space": True})


def run_trace_experiment(cfg: ExperimentConfig, M: Optional[int] = None, eta: Optional[float] = None,
                         trace_space: Optional[TraceSpace] = None) -> ExperimentReport:
    """
    Recovery with a finite dimensional trace space V_M and gamma = 0.

    The exact solution is 5 phi_2, or 5 phi_2 + eta phi_3 for eta > 0.
    Refuses to run when (A1) fails for the trace space.
    """
    cfg = _trace_config(cfg)
    params = derive_params(cfg.geometry)
    M = M if M is not None else cfg.space.trace_space.M
    eta = eta if eta is not None else 0.0
    solution = perturbed(eta) if eta > 0.0 else fourier(2)
    if trace_space is None:
        trace_space = build_trace_space(params, M, cfg.space.trace_space.family)

    a1 = check_A1(trace_space)
    if not a1.holds:
        raise AssumptionError(
            f"assumption (A1) fails for the trace space (margin {a1.margin:.2e}): "
            "an element of V_M vanishes on Gamma"
        )

    regions = region_set()
    h3 = solution.h3_norm(params)

    def body(n_x, N):
        sol = solve_level(cfg, n_x, N, solution, trace=trace_space)
        errors, diagnostics = measure_level(sol, solution, regions, cfg.experiment.n_sub)
        h = params.R / n_x
        diagnostics["C"] = errors["err_Q"] / (h ** 3 * h3)
        return errors, diagnostics

    report = ExperimentReport(kind="trace", config=cfg.model_dump(), solution=solution.to_dict())
    report.levels = _levels(cfg, body)
    report.columns = list(regions) + [f"{name}_raw" for name in regions] + ["err_interp"]
    report.compute_rates()
    report.fits["slope_B"] = fit_slope(report.hs, report.column("err_B"))
    report.fits["slope_QminusB"] = fit_slope(report.hs, report.column("err_QminusB"))
    report.diagnostics.update({"M": trace_space.M, "eta": eta, "A1": a1.to_dict(), "h3_norm": h3})
    _log_rates(report, ("err_B", "err_QminusB"))
    return report


def run_CM_study(cfg: ExperimentConfig, M_list: Optional[Sequence[int]] = None) -> ExperimentReport:
    """
    C_M = ||u_M - u1|| / (h^3 ||u_M||_{H^3}) for u_M = 5 phi_M, solved once
    with the full V_M and once with the minimal span{phi_M}.

    Runs at h = T / 8 with k = q = 2. Refuses to run when (A1) fails for
    any of the trace spaces.
    """
    cfg = _trace_config(cfg).with_updates(space={"k": 2, "q": 2, "k_star": None, "q_star": None})
    params = derive_params(cfg.geometry)
    M_list = list(M_list if M_list is not None else cfg.experiment.M_list)
    N = 8
    n_x = int(round(params.R / (params.duration / N)))
    n_x = max(n_x, 2)
    h = params.R / n_x
    cylinder = {"Q": Region.cylinder()}

    spaces = {}
    for M in M_list:
        for label, modes in (("C_M", list(range(1, M + 1))), ("C_M_opt", [M])):
            ts = build_trace_space(params, len(modes), modes=modes)
            a1 = check_A1(ts)
            if not a1.holds:
                raise AssumptionError(
                    f"assumption (A1) fails for the {label} trace space of M={M} "
                    f"(margin {a1.margin:.2e}): an element of V_M vanishes on Gamma"
                )
            spaces[M, label] = ts

    def constants(M: int) -> dict:
        solution = fourier(M)
        h3 = solution.h3_norm(params)
        row = {"M": M, "h": h, "h3_norm": h3}
        for label in ("C_M", "C_M_opt"):
            ts = spaces[M, label]
            try:
                sol = solve_level(cfg, n_x, N, solution, trace=ts)
            except NumericalError as exc:
                logger.error("M=%d (%s) failed: %s", M, label, exc)
                row[label] = None
                continue
            quad = SubdivisionQuadrature.build(sol.mesh, cfg.experiment.n_sub)
            err = error_norms(solution, lift(sol.space, sol.u1), cylinder, quad)["Q"]
            row[f"err_{label}"] = err
            row[label] = err / (h ** 3 * h3)
        return row

    report = ExperimentReport(kind="cm-study", config=cfg.model_dump())
    report.cm_table = _map_levels(constants, M_list)
    report.diagnostics["n_x"] = n_x
    report.diagnostics["N"] = N
    for row in report.cm_table:
        logger.info("M=%d: C_M=%s, C_M_opt=%s", row["M"], row.get("C_M"), row.get("C_M_opt"))
    return report


def check_geometry(cfg: ExperimentConfig) -> ExperimentReport:
    """
    Derived weight parameters, pseudoconvexity check, Gamma slices and the
    (A1) margin of the configured trace space (forward interval only).
    """
    params = derive_params(cfg.geometry)
    check = check_pseudoconvexity(params, GEOMETRY_SAMPLES, cfg.noise.seed)
    diagnostics = {
        "params": {
            "r": params.r, "R": params.R, "beta": params.beta, "eps": params.eps,
            "rho0": params.rho0, "rho1": params.rho1, "rho": params.rho,
            "delta": params.delta, "T": params.T, "time_interval": params.time_interval,
        },
        "B_boundary_at_t0": params.beta - math.sqrt(params.rho),
        "pseudoconvexity": check.to_dict(),
    }
    failed = [] if check.passed else ["pseudoconvexity"]
    if params.time_interval == "forward":
        diagnostics["gamma_slices"] = {str(k): v for k, v in gamma_intervals(params).items()}
        ts = cfg.space.trace_space
        a1 = check_A1(build_trace_space(params, ts.M, ts.family))
        diagnostics["A1"] = a1.to_dict()
        if not a1.holds:
            failed.append("A1")
    diagnostics["failed_checks"] = failed
    return ExperimentReport(kind="check-geometry", config=cfg.model_dump(), diagnostics=diagnostics)
