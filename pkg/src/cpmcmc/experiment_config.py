"""
The JSON experiment configuration read by the cpm command line.

{
  "seed": 1, "jobs": 1, "n_iters": 100000, "burn_in": 1000, "out_dir": "out",
  "subset_fraction": 0.25,
  "model": {"kind": "gaussian_re", "theta": 0.5, "prior_sd": 100},
  "data": {"T": 1024, "path": null},
  "plan": {"alpha": 0.5, "beta": 0.59, "psi": 0.574, "rounding": "ceil"},
  "sampler": {"kind": "cpm", "proposal": "rw", "step_scale": 1.0,
              "ar_coefficient": 0.0, "rho": null, "N": null},
  "tune": {"target_kappa": 1.4, "pilot_particles": 20, "beta_grid": [...],
           "ct_iters": 10000, "calibration_samples": 20000},
  "table": {"T_values": null, "measure_iters": 1000, "if_iters": 20000}
}

Model kinds are gaussian_re, linear_gaussian_ssm ({"k", "theta", "prior_bound"}) and
heston ({"mu", "upsilon", "omega", "chi", "substeps", "delta_obs"}). Only "seed" is
required. Every other field defaults per model kind, see the *_PLAN presets in config.
"""

from __future__ import annotations

import dataclasses
import json
import math
from typing import Any, Dict, List, Mapping, Optional, Set, Tuple

from cpmcmc.config import (
    DEFAULT_BETA_GRID,
    DEFAULT_BURN_IN,
    DEFAULT_CALIBRATION_SAMPLES,
    DEFAULT_CT_ITERS,
    DEFAULT_HESTON_DELTA_OBS,
    DEFAULT_HESTON_SUBSTEPS,
    DEFAULT_HESTON_T,
    DEFAULT_HESTON_THETA,
    DEFAULT_IF_ITERS_TABLE,
    DEFAULT_MEASURE_ITERS,
    DEFAULT_N_ITERS_RE,
    DEFAULT_N_ITERS_SSM,
    DEFAULT_PILOT_PARTICLES,
    DEFAULT_RE_PRIOR_SD,
    DEFAULT_RE_THETA,
    DEFAULT_SSM_THETA,
    DEFAULT_SUBSET_FRACTION,
    DEFAULT_TARGET_KAPPA,
    FALLBACK_PLAN,
    HESTON_PLAN,
    MAX_DESK_T_RE,
    MAX_DESK_T_SSM,
    RE_SCALING_BETA,
    RE_SCALING_PSI,
    SSM_K2_PLAN,
    SSM_K3_PLAN,
)
from cpmcmc.errors import ConfigError, ParameterError
from cpmcmc.models import (
    GaussianREModel,
    HestonEulerModel,
    LinearGaussianSSM,
    StatisticalModel,
)
from cpmcmc.outputs import config_hash
from cpmcmc.tuning import ROUNDINGS, ScalingPlan

MODEL_KINDS = ("gaussian_re", "linear_gaussian_ssm", "heston")
SAMPLER_KINDS = ("cpm", "pm", "mh")
PROPOSALS = ("rw", "ar")

_MISSING = object()


class _Section:
    """Typed reads from one JSON object, reporting violations by dotted field path"""

    def __init__(self, data: Any, path: str) -> None:
        if not isinstance(data, dict):
            raise ConfigError(path or "<root>", "expected a JSON object")
        self._data = data
        self._path = path
        self._read: Set[str] = set()

    def _field_path(self, name: str) -> str:
        return f"{self._path}.{name}" if self._path else name

    def _get(self, name: str, default: Any) -> Any:
        self._read.add(name)
        value = self._data.get(name, default)
        if value is _MISSING:
            raise ConfigError(self._field_path(name), "required field is missing")
        return value

    def section(self, name: str) -> _Section:
        return _Section(self._get(name, {}), self._field_path(name))

    def integer(
        self, name: str, default: Any = _MISSING, minimum: Optional[int] = None
    ) -> int:
        value = self._get(name, default)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(
                self._field_path(name), f"expected an integer, got {value!r}"
            )
        if minimum is not None and value < minimum:
            raise ConfigError(
                self._field_path(name), f"must be at least {minimum}, got {value}"
            )
        return value

    def optional_integer(
        self, name: str, minimum: Optional[int] = None
    ) -> Optional[int]:
        if self._data.get(name) is None:
            self._read.add(name)
            return None
        return self.integer(name, minimum=minimum)

    def real(
        self,
        name: str,
        default: Any = _MISSING,
        low: Optional[float] = None,
        high: Optional[float] = None,
        exclusive: bool = False,
    ) -> float:
        value = self._get(name, default)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(
                self._field_path(name), f"expected a number, got {value!r}"
            )
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(self._field_path(name), "must be finite")
        too_low = low is not None and (value <= low if exclusive else value < low)
        too_high = high is not None and (value >= high if exclusive else value > high)
        if too_low or too_high:
            bounds = "({}, {})" if exclusive else "[{}, {}]"
            raise ConfigError(
                self._field_path(name),
                f"must lie in {bounds.format(low, high)}, got {value}",
            )
        return value

    def optional_real(
        self, name: str, low: Optional[float] = None, high: Optional[float] = None
    ) -> Optional[float]:
        if self._data.get(name) is None:
            self._read.add(name)
            return None
        return self.real(name, low=low, high=high)

    def choice(
        self, name: str, choices: Tuple[str, ...], default: Any = _MISSING
    ) -> str:
        value = self._get(name, default)
        if value not in choices:
            raise ConfigError(
                self._field_path(name),
                f"must be one of {', '.join(choices)}, got {value!r}",
            )
        return value

    def optional_string(self, name: str) -> Optional[str]:
        value = self._get(name, None)
        if value is not None and not isinstance(value, str):
            raise ConfigError(
                self._field_path(name), f"expected a string, got {value!r}"
            )
        return value

    def real_list(self, name: str, default: Any = _MISSING) -> Tuple[float, ...]:
        value = self._get(name, default)
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError(self._field_path(name), "expected a non-empty list")
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
                raise ConfigError(
                    f"{self._field_path(name)}[{i}]",
                    f"expected a positive number, got {v!r}",
                )
        return tuple(float(v) for v in value)

    def optional_integer_list(self, name: str) -> Optional[Tuple[int, ...]]:
        value = self._get(name, None)
        if value is None:
            return None
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError(self._field_path(name), "expected a non-empty list")
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(
                    f"{self._field_path(name)}[{i}]",
                    f"expected a positive integer, got {v!r}",
                )
        return tuple(value)

    def check_no_unknown_fields(self) -> None:
        unknown = sorted(set(self._data) - self._read)
        if unknown:
            raise ConfigError(self._field_path(unknown[0]), "unknown field")


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    kind: str
    # gaussian_re and linear_gaussian_ssm
    theta: float = DEFAULT_RE_THETA
    prior_sd: float = DEFAULT_RE_PRIOR_SD
    k: int = 2
    prior_bound: float = 1.0
    # heston
    mu: float = DEFAULT_HESTON_THETA[0]
    upsilon: float = DEFAULT_HESTON_THETA[1]
    omega: float = DEFAULT_HESTON_THETA[2]
    chi: float = DEFAULT_HESTON_THETA[3]
    substeps: int = DEFAULT_HESTON_SUBSTEPS
    delta_obs: float = DEFAULT_HESTON_DELTA_OBS

    @property
    def is_random_effects(self) -> bool:
        return self.kind == "gaussian_re"


@dataclasses.dataclass(frozen=True)
class DataConfig:
    T: int
    # observations are read from here instead of simulated
    path: Optional[str] = None


@dataclasses.dataclass(frozen=True)
class PlanConfig:
    alpha: float
    beta: float
    psi: float
    rounding: str


@dataclasses.dataclass(frozen=True)
class SamplerConfig:
    kind: str = "cpm"
    proposal: str = "rw"
    # multiplies the default random walk covariance
    step_scale: float = 1.0
    ar_coefficient: float = 0.0
    # overrides the plan's rho
    rho: Optional[float] = None
    # overrides the plan's N
    N: Optional[int] = None


@dataclasses.dataclass(frozen=True)
class TuneConfig:
    target_kappa: float = DEFAULT_TARGET_KAPPA
    pilot_particles: int = DEFAULT_PILOT_PARTICLES
    beta_grid: Tuple[float, ...] = DEFAULT_BETA_GRID
    ct_iters: int = DEFAULT_CT_ITERS
    calibration_samples: int = DEFAULT_CALIBRATION_SAMPLES


@dataclasses.dataclass(frozen=True)
class TableConfig:
    # None selects the table preset's values
    T_values: Optional[Tuple[int, ...]] = None
    measure_iters: int = DEFAULT_MEASURE_ITERS
    if_iters: int = DEFAULT_IF_ITERS_TABLE


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    model: ModelConfig
    data: DataConfig
    plan: PlanConfig
    sampler: SamplerConfig
    tune: TuneConfig
    table: TableConfig
    n_iters: int
    burn_in: int
    subset_fraction: float = DEFAULT_SUBSET_FRACTION
    jobs: int = 1
    out_dir: str = "out"

    def scaling_plan(self, T: Optional[int] = None) -> ScalingPlan:
        return ScalingPlan(
            self.data.T if T is None else T,
            self.plan.beta,
            self.plan.psi,
            self.plan.alpha,
            self.plan.rounding,
        )

    def with_overrides(
        self,
        seed: Optional[int] = None,
        jobs: Optional[int] = None,
        out_dir: Optional[str] = None,
    ) -> ExperimentConfig:
        """Applies command line flags, which take precedence over the file"""
        config = self
        if seed is not None:
            if seed < 0:
                raise ConfigError("seed", f"must be non-negative, got {seed}")
            config = dataclasses.replace(config, seed=seed)
        if jobs is not None:
            if jobs < 1:
                raise ConfigError("jobs", f"must be at least 1, got {jobs}")
            config = dataclasses.replace(config, jobs=jobs)
        if out_dir is not None:
            config = dataclasses.replace(config, out_dir=out_dir)
        return config

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """
        Hash of everything that determines the outputs. jobs and out_dir are left out,
        they do not change any result.
        """
        payload = self.to_dict()
        del payload["jobs"]
        del payload["out_dir"]
        return config_hash(payload)


def _model_section(section: _Section) -> ModelConfig:
    kind = section.choice("kind", MODEL_KINDS, "gaussian_re")
    if kind == "gaussian_re":
        config = ModelConfig(
            kind,
            theta=section.real("theta", DEFAULT_RE_THETA),
            prior_sd=section.real(
                "prior_sd", DEFAULT_RE_PRIOR_SD, low=0, exclusive=True
            ),
        )
    elif kind == "linear_gaussian_ssm":
        config = ModelConfig(
            kind,
            theta=section.real("theta", DEFAULT_SSM_THETA),
            k=section.integer("k", 2, minimum=1),
            prior_bound=section.real("prior_bound", 1.0, low=0, exclusive=True),
        )
    else:
        config = ModelConfig(
            kind,
            mu=section.real("mu", DEFAULT_HESTON_THETA[0], low=0, exclusive=True),
            upsilon=section.real(
                "upsilon", DEFAULT_HESTON_THETA[1], low=0, exclusive=True
            ),
            omega=section.real("omega", DEFAULT_HESTON_THETA[2], low=0, exclusive=True),
            chi=section.real(
                "chi", DEFAULT_HESTON_THETA[3], low=-1, high=1, exclusive=True
            ),
            substeps=section.integer("substeps", DEFAULT_HESTON_SUBSTEPS, minimum=1),
            delta_obs=section.real(
                "delta_obs", DEFAULT_HESTON_DELTA_OBS, low=0, exclusive=True
            ),
        )
    section.check_no_unknown_fields()
    return config


def default_plan(model: ModelConfig) -> Tuple[float, float, float, str]:
    """(alpha, beta, psi, rounding) for this model kind"""
    if model.kind == "gaussian_re":
        return 0.5, RE_SCALING_BETA, RE_SCALING_PSI, "ceil"
    elif model.kind == "linear_gaussian_ssm":
        if model.k == 2:
            return SSM_K2_PLAN + ("floor",)
        if model.k == 3:
            return SSM_K3_PLAN + ("floor",)
        return model.k / (model.k + 1.0), FALLBACK_PLAN[0], FALLBACK_PLAN[1], "ceil"
    else:
        return HESTON_PLAN + ("ceil",)


def default_T(model: ModelConfig) -> int:
    if model.kind == "gaussian_re":
        return MAX_DESK_T_RE
    elif model.kind == "linear_gaussian_ssm":
        return MAX_DESK_T_SSM
    else:
        return DEFAULT_HESTON_T


def parse_config(data: Mapping[str, Any]) -> ExperimentConfig:
    """Validates a decoded JSON document, see the module docstring for the schema"""
    root = _Section(dict(data), "")
    seed = root.integer("seed", minimum=0)
    model = _model_section(root.section("model"))

    data_section = root.section("data")
    data_config = DataConfig(
        data_section.integer("T", default_T(model), minimum=2),
        data_section.optional_string("path"),
    )
    data_section.check_no_unknown_fields()

    alpha, beta, psi, rounding = default_plan(model)
    plan_section = root.section("plan")
    plan = PlanConfig(
        plan_section.real("alpha", alpha, low=0, exclusive=True),
        plan_section.real("beta", beta, low=0, exclusive=True),
        plan_section.real("psi", psi, low=0, exclusive=True),
        plan_section.choice("rounding", ROUNDINGS, rounding),
    )
    plan_section.check_no_unknown_fields()

    sampler_section = root.section("sampler")
    sampler = SamplerConfig(
        sampler_section.choice("kind", SAMPLER_KINDS, "cpm"),
        sampler_section.choice("proposal", PROPOSALS, "rw"),
        sampler_section.real("step_scale", 1.0, low=0, exclusive=True),
        sampler_section.real("ar_coefficient", 0.0, low=-1, high=1, exclusive=True),
        sampler_section.optional_real("rho", low=-1, high=1),
        sampler_section.optional_integer("N", minimum=1),
    )
    sampler_section.check_no_unknown_fields()

    tune_section = root.section("tune")
    tune = TuneConfig(
        tune_section.real("target_kappa", DEFAULT_TARGET_KAPPA, low=0, exclusive=True),
        tune_section.integer("pilot_particles", DEFAULT_PILOT_PARTICLES, minimum=1),
        tune_section.real_list("beta_grid", list(DEFAULT_BETA_GRID)),
        tune_section.integer("ct_iters", DEFAULT_CT_ITERS, minimum=100),
        tune_section.integer(
            "calibration_samples", DEFAULT_CALIBRATION_SAMPLES, minimum=100
        ),
    )
    tune_section.check_no_unknown_fields()
    if len(tune.beta_grid) < 3:
        raise ConfigError("tune.beta_grid", "needs at least 3 values")

    table_section = root.section("table")
    table = TableConfig(
        table_section.optional_integer_list("T_values"),
        table_section.integer("measure_iters", DEFAULT_MEASURE_ITERS, minimum=100),
        table_section.integer("if_iters", DEFAULT_IF_ITERS_TABLE, minimum=100),
    )
    table_section.check_no_unknown_fields()

    default_n_iters = (
        DEFAULT_N_ITERS_RE if model.is_random_effects else DEFAULT_N_ITERS_SSM
    )
    config = ExperimentConfig(
        seed,
        model,
        data_config,
        plan,
        sampler,
        tune,
        table,
        root.integer("n_iters", default_n_iters, minimum=1),
        root.integer("burn_in", DEFAULT_BURN_IN, minimum=0),
        root.real("subset_fraction", DEFAULT_SUBSET_FRACTION, low=0, high=1),
        root.integer("jobs", 1, minimum=1),
        root.optional_string("out_dir") or "out",
    )
    root.check_no_unknown_fields()
    if config.subset_fraction == 0:
        raise ConfigError("subset_fraction", "must be positive")
    if config.burn_in >= config.n_iters:
        raise ConfigError(
            "burn_in",
            f"must be less than n_iters={config.n_iters}, got {config.burn_in}",
        )
    return config


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError("<root>", f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError("<root>", f"{path} is not valid JSON: {e}") from e
    return parse_config(data)


def build_model(model: ModelConfig) -> StatisticalModel:
    """Raises ConfigError with the model section's path for invalid parameters"""
    try:
        if model.kind == "gaussian_re":
            return GaussianREModel(model.theta, model.prior_sd)
        elif model.kind == "linear_gaussian_ssm":
            return LinearGaussianSSM(model.k, model.theta, model.prior_bound)
        else:
            return HestonEulerModel(
                model.mu,
                model.upsilon,
                model.omega,
                model.chi,
                model.substeps,
                model.delta_obs,
            )
    except ParameterError as e:
        raise ConfigError("model", str(e)) from e


def config_rows(config: ExperimentConfig) -> List[Tuple[str, Any]]:
    """Flattened (dotted path, value) pairs, for logging the effective config"""
    rows: List[Tuple[str, Any]] = []

    def visit(prefix: str, value: Any) -> None:
        if isinstance(value, dict):
            for key in sorted(value):
                visit(f"{prefix}.{key}" if prefix else key, value[key])
        else:
            rows.append((prefix, value))

    visit("", config.to_dict())
    return rows
