
from __future__ import annotations
import json, os
from typing import Dict, List

import pandas as pd

from .utils import make_name, ensure_dir, sha256_file

# runtimes live in report.json
CHECK_COLUMNS = ["name", "status", "margin", "tolerance", "seed"]


def write_frame(cfg, df: pd.DataFrame, stem: str, logger) -> str:
    """CSV under the run directory with a fixed float format so identical runs give identical bytes."""
    out_dir = cfg.export_dir
    ensure_dir(out_dir)
    path = os.path.join(out_dir, f"{make_name(cfg.scenario, cfg.seed, stem)}.csv")
    df.to_csv(path, index=False, float_format="%.12g")
    logger.info(f"Saved {stem}: {path} [{len(df)} rows]")
    return path


def export_trajectories(cfg, bundle, logger) -> str:
    return write_frame(cfg, bundle.to_frame(max_paths=cfg.write_trajectories), "trajectories", logger)


def export_backward(cfg, pair, logger) -> str:
    return write_frame(cfg, pair.diagnostics(), "backward", logger)


def export_second_adjoint(cfg, solution, logger) -> str:
    return write_frame(cfg, solution.diagnostics(), "second_adjoint", logger)


def export_value(cfg, field_, logger) -> str:
    return write_frame(cfg, field_.to_frame(), "value_field", logger)


def export_checks(cfg, report, logger) -> str:
    return write_frame(cfg, report.summary_frame()[CHECK_COLUMNS], "checks", logger)


def write_manifest(out_dir: str, artifacts: List[Dict[str, str]]) -> str:
    """manifest.json: every artifact with kind, file name and SHA-256."""
    entries = []
    for a in artifacts:
        if os.path.exists(a["path"]):
            entries.append({"kind": a["kind"], "file": os.path.relpath(a["path"], out_dir),
                            "sha256": sha256_file(a["path"])})
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"artifacts": entries}, f, indent=2)
    return path
