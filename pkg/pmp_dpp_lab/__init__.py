
from .config import ExperimentConfig, ConfigError, load_config
from .report import VerificationReport, CheckResult
from .scenarios import build_scenario, list_scenarios
from .runner import run_experiment
