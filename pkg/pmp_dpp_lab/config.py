
from __future__ import annotations
from dataclasses import dataclass, field, fields, asdict
from typing import Any, Dict, List, Optional, Tuple
import os

import yaml

from .scenarios import resolve_scenario
from .checks import CHECKS

OUTPUT_ENV = "PMPDPP_OUTPUT_DIR"


class ConfigError(ValueError):
    """Unreadable or invalid experiment config; line/column are 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None,
                 key: Optional[str] = None):
        self.line, self.column, self.key = line, column, key
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


def _default_output_root() -> str:
    return os.environ.get(OUTPUT_ENV, "Outputs")


@dataclass
class ExperimentConfig:
    scenario: str = "lq1"
    params: Dict[str, Any] = field(default_factory=dict)
    steps: int = 100
    paths: int = 20000
    basis_degree: int = 2
    value_steps: Optional[int] = None
    anchor_step: Optional[float] = None
    anchor_box: Optional[float] = None
    control_step: Optional[float] = None
    control_range: Optional[Tuple[float, float]] = None
    seed: int = 0
    sample_times: int = 20
    sample_paths: int = 64
    branches: int = 256
    checks: List[str] = field(default_factory=lambda: ["pmp", "smooth_relations", "superdiff_inclusions",
                                                       "time_inclusion", "value_regularity"])
    output_root: str = field(default_factory=_default_output_root)
    run_name: Optional[str] = None
    tolerance_scale: float = 3.0
    n_jobs: int = 1
    log_to_file: bool = True
    write_trajectories: int = 200

    def validate(self) -> None:
        try:
            resolve_scenario(self.scenario)
        except ValueError as e:
            raise ConfigError(str(e), key="scenario")
        if self.steps < 2:
            raise ConfigError(f"steps must be >= 2, got {self.steps}", key="steps")
        if self.paths < 10:
            raise ConfigError(f"paths must be >= 10, got {self.paths}", key="paths")
        if self.value_steps is not None and self.value_steps < 1:
            raise ConfigError(f"value_steps must be >= 1, got {self.value_steps}", key="value_steps")
        if self.control_range is not None and len(self.control_range) != 2:
            raise ConfigError("control_range must be [lo, hi]", key="control_range")
        unknown = [c for c in self.checks if c not in CHECKS]
        if unknown:
            raise ConfigError(f"unknown checks {unknown}; available: {sorted(CHECKS)}", key="checks")
        if self.tolerance_scale <= 0:
            raise ConfigError("tolerance_scale must be > 0", key="tolerance_scale")

    @property
    def name(self) -> str:
        return self.run_name or f"{self.scenario}-s{self.seed}"

    @property
    def export_dir(self) -> str:
        return os.path.join(self.output_root, self.name)

    def effective(self) -> Dict[str, Any]:
        """Fully resolved mapping (what gets echoed next to the artifacts)."""
        out = asdict(self)
        out["run_name"] = self.name
        if out["control_range"] is not None:
            out["control_range"] = list(out["control_range"])
        return out

    def dump(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.effective(), f, sort_keys=True)


PRESETS: Dict[str, Dict[str, Any]] = {
    "lq1-smoke": {"scenario": "lq1", "steps": 100, "paths": 4000, "value_steps": 100, "anchor_step": 0.01,
                  "run_name": "lq1-smoke"},
    "heat2-smoke": {"scenario": "heat-2", "params": {"profile": "tanh"}, "steps": 50, "paths": 4000,
                    "value_steps": 50, "anchor_step": 0.1, "anchor_box": 2.0,
                    "checks": ["pmp", "time_inclusion", "value_regularity", "transposition"],
                    "run_name": "heat2-smoke"},
    "bang-bang": {"scenario": "bang-bang", "steps": 100, "paths": 200, "value_steps": 100, "anchor_step": 0.01,
                  "checks": ["value_regularity", "dpp"], "run_name": "bang-bang"},
}


def config_from_mapping(data: Optional[Dict[str, Any]]) -> ExperimentConfig:
    data = dict(data or {})
    known = {f.name for f in fields(ExperimentConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'", key=key)
    if data.get("control_range") is not None:
        data["control_range"] = tuple(data["control_range"])
    cfg = ExperimentConfig(**data)
    cfg.validate()
    return cfg


def load_config(source: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Config from a preset name or a YAML file; YAML problems become ConfigError with line/column."""
    if source in PRESETS:
        data = dict(PRESETS[source])
    else:
        try:
            with open(source, encoding="utf-8") as f:
                data = yaml.safe_load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config '{source}': {e}")
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            if mark is not None:
                raise ConfigError(f"malformed config '{source}': {getattr(e, 'problem', e)}",
                                  mark.line + 1, mark.column + 1)
            raise ConfigError(f"malformed config '{source}': {e}")
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"config '{source}' must be a mapping, got {type(data).__name__}")
    data = dict(data or {})
    data.update(overrides or {})
    return config_from_mapping(data)
