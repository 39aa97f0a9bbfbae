"""TOML experiment configuration with strict key checking.

Every section maps onto a dataclass; unknown sections or keys are errors so a
typo can never silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

import tomli

from .channel import ElementPattern, PatternConfig
from .geometry import ArrayGeometry, CemsGeometry, GlobalConfig
from .structured import GAConfig
from .traffic import TrafficConfig
from .unstructured import AscentConfig

KINDS = ("se_vs_p", "codebook_sweep", "snr_map", "multilane_ecdf", "connectivity",
         "design_unstructured", "design_structured")


@dataclass(frozen=True)
class GeometrySection:
    rows: int = 12
    cols: int = 24
    spacing_m_wavelengths: float = 0.25
    spacing_n_wavelengths: float = 0.25
    curvature_radius_m: float = 2.0
    module_count: int = 1
    centered_columns: bool = False
    element_pattern: str = "isotropic"
    element_pattern_q: float = 1.0

    def build(self, wavelength_m: float, modules: int | None = None) -> CemsGeometry:
        return CemsGeometry(self.rows, self.cols, self.spacing_m_wavelengths * wavelength_m,
                            self.spacing_n_wavelengths * wavelength_m, self.curvature_radius_m,
                            self.module_count if modules is None else modules, self.centered_columns)


@dataclass(frozen=True)
class ArraySection:
    element_count: int = 8
    spacing_wavelengths: float = 0.5
    boresight_azimuth_deg: float = 0.0

    def build(self, wavelength_m: float) -> ArrayGeometry:
        return ArrayGeometry(self.element_count, self.spacing_wavelengths * wavelength_m,
                             (0.0, 0.0, 0.0), math.radians(self.boresight_azimuth_deg))


@dataclass(frozen=True)
class CodebookSection:
    span_theta_i_deg: tuple = (-89.0, 0.0)
    span_theta_o_deg: tuple = (0.0, 89.0)
    oversampling_factor: float = 1.0
    points_per_axis: int = 0
    anchored: bool = False


@dataclass(frozen=True)
class OptimizerSection:
    method: str = "ga"
    objective: str = "se"
    polish: bool = True
    ga: GAConfig = GAConfig()
    ascent: AscentConfig = AscentConfig()

    def __post_init__(self):
        if self.method not in ("ga", "exhaustive", "coordinate_ascent", "elliptope"):
            raise ValueError(f"unknown optimizer method {self.method!r}")
        if self.objective not in ("se", "coverage", "coverage_smoothed"):
            raise ValueError(f"unknown objective {self.objective!r}")


@dataclass(frozen=True)
class ExperimentSection:
    kind: str = "se_vs_p"
    seed: int = 0
    output_dir: str = "out"
    samples: int = 500
    modules: tuple = (1, 2, 4, 6, 8)
    oversampling_factors: tuple = (0.25, 1.0)
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


@dataclass(frozen=True)
class SnrMapSection:
    tx_position_m: tuple = (20.0, 0.0, 2.0)
    cems_position_m: tuple = (0.0, 20.0, 2.0)
    x_range_m: tuple = (-10.0, 60.0)
    y_range_m: tuple = (-10.0, 60.0)
    step_m: float = 0.5
    profile: str = "specular"
    specular_theta_deg: float = 45.0
    modules: int = 2


@dataclass(frozen=True)
class MultilaneSection:
    scenes: int = 1000
    design_scenes: int = 2000
    design_samples: int = 400
    policy: str = "random"
    specular_theta_deg: float = 76.0
    modes: tuple = ("direct", "bare", "specular", "optimized", "cris")
    condition: str = "direct_blocked"

    def __post_init__(self):
        if self.policy not in ("random", "max_power"):
            raise ValueError(f"unknown relay selection policy {self.policy!r}")
        if self.condition not in ("none", "relay_available", "direct_blocked"):
            raise ValueError(f"unknown scene condition {self.condition!r}")
        bad = [m for m in self.modes if m not in ("direct", "bare", "specular", "optimized", "cris")]
        if bad:
            raise ValueError(f"unknown link modes {bad}")


@dataclass(frozen=True)
class ConnectivitySection:
    scenes: int = 100
    penetrations: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    snr_threshold_db: float = 30.0
    modes: tuple = ("direct+relay",)
    profile: str = "optimized"


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = ExperimentSection()
    global_: GlobalConfig = GlobalConfig()
    geometry: GeometrySection = GeometrySection()
    arrays: ArraySection = ArraySection()
    traffic: TrafficConfig = TrafficConfig()
    codebook: CodebookSection = CodebookSection()
    optimizer: OptimizerSection = OptimizerSection()
    snr_map: SnrMapSection = SnrMapSection()
    multilane: MultilaneSection = MultilaneSection()
    connectivity: ConnectivitySection = ConnectivitySection()

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def patterns(self) -> PatternConfig:
        g = self.geometry
        return PatternConfig(cems=ElementPattern(g.element_pattern, g.element_pattern_q))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, experiment=dataclasses.replace(self.experiment, seed=int(seed)))

    def with_output(self, out: str) -> "ExperimentConfig":
        return dataclasses.replace(self, experiment=dataclasses.replace(self.experiment, output_dir=str(out)))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["global"] = d.pop("global_")
        return d

    def hash(self) -> str:
        """Digest of every setting except the output location."""
        d = self.to_dict()
        d["experiment"].pop("output_dir")
        blob = json.dumps(d, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {"experiment": ("experiment", ExperimentSection), "global": ("global_", GlobalConfig),
             "geometry": ("geometry", GeometrySection), "arrays": ("arrays", ArraySection),
             "traffic": ("traffic", TrafficConfig), "codebook": ("codebook", CodebookSection),
             "optimizer": ("optimizer", OptimizerSection), "snr_map": ("snr_map", SnrMapSection),
             "multilane": ("multilane", MultilaneSection),
             "connectivity": ("connectivity", ConnectivitySection)}
_NESTED = {("optimizer", "ga"): GAConfig, ("optimizer", "ascent"): AscentConfig}


class ConfigError(ValueError):
    """Collects every problem found in a configuration."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))


def _coerce(value):
    return tuple(value) if isinstance(value, list) else value


def _build(cls, data: dict, where: str, problems: list, nested=None):
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in data.items():
        if key not in names:
            problems.append(f"unknown key '{where}.{key}'")
            continue
        sub = (nested or {}).get(key)
        if sub is not None:
            if not isinstance(val, dict):
                problems.append(f"'{where}.{key}' must be a table")
                continue
            built = _build(sub, val, f"{where}.{key}", problems)
            if built is not None:
                kwargs[key] = built
        else:
            kwargs[key] = _coerce(val)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"[{where}] {exc}")
        return None


def config_from_dict(data: dict) -> ExperimentConfig:
    problems, kwargs = [], {}
    for section, body in data.items():
        if section not in _SECTIONS:
            problems.append(f"unknown section '[{section}]'")
            continue
        if not isinstance(body, dict):
            problems.append(f"'{section}' must be a table")
            continue
        attr, cls = _SECTIONS[section]
        nested = {k[1]: v for k, v in _NESTED.items() if k[0] == section}
        built = _build(cls, body, section, problems, nested)
        if built is not None:
            kwargs[attr] = built
    if "experiment" not in data or "seed" not in data.get("experiment", {}):
        problems.append("'experiment.seed' is mandatory")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        return config_from_dict(tomli.load(fh))


def csv_header(cfg: ExperimentConfig) -> str:
    return f"# cems-forge v1; config_hash={cfg.hash()}; seed={cfg.seed}"
