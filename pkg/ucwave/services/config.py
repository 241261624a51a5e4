"""
config.py

Typed configuration for every experiment.

Responsibilities:
- Describe the JSON experiment config as pydantic models
- Validate the parameter relations that do not depend on derived values
- Provide the reference parameter set as defaults

Relations that need derived quantities (e.g. the lower bound on T) are
checked where those quantities are computed, in geometry.derive_params.
"""

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Frozen(BaseModel):
    # Configs are shared between worker threads, never mutate them
    model_config = ConfigDict(frozen=True, extra="forbid")


class GeometryConfig(_Frozen):
    """
    Carleman-weight geometry in one space dimension.

    Omega = (-R, 0), omega = (-R, -r), weight centre y = beta.
    T = None selects the minimal admissible final time.
    """

    r: float = 0.75
    R: float = 1.0
    beta: float = 0.5
    eps: float = 0.05
    rho_fraction: float = 0.1
    delta_fraction: float = 0.1
    T: Optional[float] = None
    time_interval: Literal["symmetric", "forward"] = "symmetric"
    dim: Literal[1] = 1

    @model_validator(mode="after")
    def _check_relations(self):
        if not 0.0 < self.r < self.R:
            raise ValueError(f"require 0 < r < R, got r={self.r}, R={self.R}")
        if self.beta <= 0.0:
            raise ValueError(f"require beta > 0, got {self.beta}")
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"require eps in (0, 1), got {self.eps}")
        if not 0.0 <= self.rho_fraction < 1.0:
            raise ValueError(f"require rho_fraction in [0, 1), got {self.rho_fraction}")
        if not 0.0 < self.delta_fraction < 1.0:
            raise ValueError(f"require delta_fraction in (0, 1), got {self.delta_fraction}")
        if self.T is not None and self.T <= 0.0:
            raise ValueError(f"require T > 0, got {self.T}")
        return self

    @property
    def T_mode(self) -> str:
        return "minimal" if self.T is None else "explicit"


class MeshConfig(_Frozen):
    n_x: int = Field(8, ge=2)
    # None couples the slab count to the spatial resolution
    N: Optional[int] = Field(None, ge=1)
    levels: int = Field(4, ge=1)

    @property
    def n_slabs(self) -> int:
        return self.N if self.N is not None else self.n_x


class TraceSpaceConfig(_Frozen):
    family: Literal["fourier_modes"] = "fourier_modes"
    M: int = Field(2, ge=1)


class SpaceConfig(_Frozen):
    k: int = Field(1, ge=1)
    q: int = Field(1, ge=0)
    k_star: Optional[int] = Field(None, ge=1)
    q_star: Optional[int] = Field(None, ge=0)
    trace_space: TraceSpaceConfig = TraceSpaceConfig()

    @property
    def dual_k(self) -> int:
        return self.k if self.k_star is None else self.k_star

    @property
    def dual_q(self) -> int:
        return self.q if self.q_star is None else self.q_star


class FormsConfig(_Frozen):
    gamma: float = Field(1e-2, ge=0.0)
    c_J: float = Field(1.0, gt=0.0)
    c_G: float = Field(1.0, gt=0.0)
    c_I0: float = Field(1.0, gt=0.0)
    c_jump1: float = Field(1.0, gt=0.0)
    c_jump2: float = Field(1.0, gt=0.0)
    c_dual_sigma: float = Field(1.0, gt=0.0)
    # J + G + I_0 as a group, the omega_T fit and the Sigma trace coupling
    c_primal: float = Field(1e-3, gt=0.0)
    c_data: float = Field(1e4, gt=0.0)
    c_trace: float = Field(1e4, gt=0.0)
    use_trace_space: bool = False


class SolverConfig(_Frozen):
    refine_steps: int = Field(1, ge=0)
    eig_tol: float = Field(1e-8, gt=0.0)
    eig_max_iter: int = Field(200, ge=1)
    eig_block: int = Field(6, ge=1)


class NoiseConfig(_Frozen):
    kind: Literal["none", "smooth", "worst_mode"] = "none"
    theta: float = Field(1.0, ge=1.0, le=2.0)
    seed: int = 0


class ExperimentOptions(_Frozen):
    solution: Literal["reference", "fourier", "perturbed"] = "reference"
    # mode index of the "fourier" solution 5 * phi_m
    mode: int = Field(2, ge=1)
    kappas: list[float] = [1.0, 0.75, 0.5, 0.25]
    thetas: list[float] = [1.0, 1.5, 2.0]
    gammas: Optional[list[float]] = None
    n_sub: int = Field(4, ge=1)
    eta: float = Field(1e-3, ge=0.0)
    M_list: list[int] = [2, 3, 4, 5, 6]

    @model_validator(mode="after")
    def _check_lists(self):
        for kappa in self.kappas:
            if not 0.0 < kappa <= 1.0:
                raise ValueError(f"kappa values must lie in (0, 1], got {kappa}")
        for theta in self.thetas:
            if not 1.0 <= theta <= 2.0:
                raise ValueError(f"theta values must lie in [1, 2], got {theta}")
        return self


class ExperimentConfig(_Frozen):
    """
    Root of the JSON experiment config.

    Every block is optional; missing blocks take the reference parameters.
    """

    geometry: GeometryConfig = GeometryConfig()
    mesh: MeshConfig = MeshConfig()
    space: SpaceConfig = SpaceConfig()
    forms: FormsConfig = FormsConfig()
    solver: SolverConfig = SolverConfig()
    noise: NoiseConfig = NoiseConfig()
    experiment: ExperimentOptions = ExperimentOptions()

    def with_updates(self, **blocks) -> "ExperimentConfig":
        """
        Return a copy with whole blocks partially updated.

        Example: cfg.with_updates(forms={"gamma": 0.0})
        """
        update = {}
        for name, values in blocks.items():
            current = getattr(self, name)
            update[name] = current.model_copy(update=values)
        # model_copy skips validation, re-validate the merged tree
        return ExperimentConfig.model_validate(
            {**self.model_dump(), **{k: v.model_dump() for k, v in update.items()}}
        )
