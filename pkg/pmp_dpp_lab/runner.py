
from __future__ import annotations
import os

import numpy as np

from .config import ExperimentConfig
from .logging_setup import setup_logger
from .report import VerificationReport
from .utils import timeit
from .scenarios import build_scenario
from .problem import validate_assumptions
from .regression import RegressionBasis
from .riccati import solve_riccati
from .simulate import LinearFeedback
from .backward import solve_bsde
from .value import compute_value, FieldPolicy
from .checks import CheckContext, build_optimal_record, run_checks, NEEDS_RECORD
from .export import (export_trajectories, export_backward, export_second_adjoint, export_value, export_checks,
                     write_manifest)


def optimal_policy(p, field_):
    """Riccati feedback when the problem carries LQ data with control-free diffusion, else the field's argmin."""
    if p.lq is not None and p.lq.delta == 0.0:
        sol = solve_riccati(p.lq, p.grid)
        return LinearFeedback(lambda t: [[float(sol.gain(t))]]), "riccati"
    return FieldPolicy(field_), "value-field"


@timeit
def run_experiment(cfg: ExperimentConfig) -> VerificationReport:
    """simulate -> adjoints -> value -> checks, writing CSV artifacts, the report and a manifest."""
    cfg.validate()
    os.makedirs(cfg.export_dir, exist_ok=True)
    log_dir = os.path.join(cfg.export_dir, "logs") if cfg.log_to_file else None
    logger = setup_logger(log_dir, verbose_console=True)
    report = VerificationReport(cfg.name, cfg.seed)
    effective = os.path.join(cfg.export_dir, "effective_config.yaml")
    cfg.dump(effective)
    report.add_artifact(effective, "config")
    basis = RegressionBasis(cfg.basis_degree)

    try:
        grid = {"steps": cfg.steps, "seed": cfg.seed, "control_step": cfg.control_step,
                "control_range": cfg.control_range, "box": cfg.anchor_box}
        p = build_scenario(cfg.scenario, cfg.params, **grid)
        report.add_step("Scenario built", {"name": p.name, "dim": p.dim, "noise_dim": p.noise_dim,
                                           "controls": p.controls.size})
    except Exception as e:
        logger.error(f"Scenario build failed: {e}")
        report.add_error("build_scenario", e)
        return _finish(cfg, report, logger)

    try:
        assumptions = validate_assumptions(p, samples=200, seed=cfg.seed)
        report.add_step("Assumptions sampled", {"passed": assumptions.passed,
                                                "failed": [c.name for c in assumptions.failed()]})
    except Exception as e:
        logger.warning(f"Assumption validation failed (continuing): {e}")
        report.add_error("validate_assumptions", e)

    try:
        field_ = compute_value(p, steps=cfg.value_steps or cfg.steps, anchor_step=cfg.anchor_step, basis=basis)
        report.add_step("Value field computed", {"kind": field_.kind, "steps": field_.grid.steps,
                                                 "V(t0, x0)": float(field_.value(field_.grid.t0, p.initial)[0]),
                                                 "extrapolated": field_.extrapolated})
        report.add_artifact(export_value(cfg, field_, logger), "value_field")
    except Exception as e:
        logger.error(f"Value computation failed: {e}")
        report.add_error("compute_value", e)
        return _finish(cfg, report, logger)

    policy, source = optimal_policy(p, field_)
    record = None
    if any(c in NEEDS_RECORD for c in cfg.checks) or cfg.write_trajectories:
        try:
            record = build_optimal_record(p, policy, cfg.paths, basis, stream=0, progress=True)
            report.add_step("Optimal record built", {"policy": source, "paths": cfg.paths,
                                                     "max_symmetry_defect": float(np.max(record.second.symmetry_defect))})
            if cfg.write_trajectories:
                report.add_artifact(export_trajectories(cfg, record.bundle, logger), "trajectories")
            pair = solve_bsde(p, record.bundle, basis=basis)
            report.add_step("Cost BSDE solved", {"Y0": pair.y0, "stderr": pair.y0_stderr})
            report.add_artifact(export_backward(cfg, pair, logger), "backward")
            report.add_artifact(export_second_adjoint(cfg, record.second, logger), "second_adjoint")
        except Exception as e:
            logger.error(f"Forward/backward stage failed: {e}")
            report.add_error("build_optimal_record", e)
            return _finish(cfg, report, logger)

    try:
        ctx = CheckContext(p, record, field_, policy, seed=cfg.seed, sample_times=cfg.sample_times,
                           sample_paths=cfg.sample_paths, tolerance_scale=cfg.tolerance_scale,
                           paths=min(cfg.paths, 4000), branches=cfg.branches, smooth=p.lq is not None, basis=basis)
        report.extend(run_checks(ctx, cfg.checks, n_jobs=cfg.n_jobs))
        report.add_step("Checks run", report.counts())
        report.add_artifact(export_checks(cfg, report, logger), "checks")
    except Exception as e:
        logger.error(f"Checks failed: {e}")
        report.add_error("run_checks", e)

    return _finish(cfg, report, logger)


def _finish(cfg: ExperimentConfig, report: VerificationReport, logger) -> VerificationReport:
    path = os.path.join(cfg.export_dir, "report.json")
    report.to_json(path)
    report.add_artifact(path, "report")
    write_manifest(cfg.export_dir, report.artifacts)
    logger.info("\n" + report.summary_text())
    return report
