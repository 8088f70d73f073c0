
from __future__ import annotations
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional
import json, datetime

import numpy as np
import pandas as pd

STATUSES = ("pass", "fail", "inconclusive")


@dataclass
class CheckResult:
    """Outcome of one verification check; `witness` locates the worst point (time, path, control...)."""

    name: str
    status: str
    margin: float
    tolerance: float
    runtime: float = 0.0
    seed: int = 0
    witness: Dict[str, Any] = field(default_factory=dict)
    details: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"status must be one of {STATUSES}, got '{self.status}'")

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    @property
    def failed(self) -> bool:
        return self.status == "fail"


def status_of(ok: bool, inconclusive: bool = False) -> str:
    if inconclusive:
        return "inconclusive"
    return "pass" if ok else "fail"


class VerificationReport:
    def __init__(self, run_name: str = "", seed: int = 0):
        self.run_name = run_name
        self.seed = seed
        self.steps: List[Dict[str, Any]] = []
        self.checks: List[CheckResult] = []
        self.errors: List[Dict[str, str]] = []
        self.artifacts: List[Dict[str, str]] = []

    def add_step(self, name, meta=None):
        self.steps.append({'name': name, 'meta': meta or {}, 'ts': datetime.datetime.now().isoformat()})

    def add_check(self, result: CheckResult):
        self.checks.append(result)
        self.checks.sort(key=lambda c: c.name)

    def extend(self, results):
        for r in results:
            self.add_check(r)

    def add_error(self, where, err):
        self.errors.append({'where': where, 'err': str(err)})

    def add_artifact(self, path, kind):
        self.artifacts.append({'path': path, 'kind': kind})

    def get(self, name: str) -> Optional[CheckResult]:
        return next((c for c in self.checks if c.name == name), None)

    def counts(self) -> Dict[str, int]:
        return {s: sum(c.status == s for c in self.checks) for s in STATUSES}

    def exit_code(self) -> int:
        """0 when no check failed and no stage errored, 1 otherwise."""
        return 1 if self.errors or any(c.failed for c in self.checks) else 0

    def summary_frame(self) -> pd.DataFrame:
        cols = ["name", "status", "margin", "tolerance", "runtime", "seed"]
        return pd.DataFrame([{k: getattr(c, k) for k in cols} for c in self.checks], columns=cols)

    def to_dict(self) -> Dict[str, Any]:
        return {'run_name': self.run_name, 'seed': self.seed, 'steps': self.steps,
                'checks': [asdict(c) for c in self.checks], 'errors': self.errors, 'artifacts': self.artifacts}

    def to_json(self, out_path):
        with open(out_path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, default=_jsonable)

    @classmethod
    def from_json(cls, path) -> "VerificationReport":
        with open(path, encoding='utf-8') as f:
            data = json.load(f)
        rep = cls(data.get('run_name', ''), data.get('seed', 0))
        rep.steps = data.get('steps', [])
        rep.errors = data.get('errors', [])
        rep.artifacts = data.get('artifacts', [])
        rep.checks = sorted((CheckResult(**c) for c in data.get('checks', [])), key=lambda c: c.name)
        return rep

    def summary_text(self):
        counts = self.counts()
        lines = []
        lines.append(f"=== pmp-dpp-lab Run Summary{' (' + self.run_name + ')' if self.run_name else ''} ===")
        lines.append(f"Steps: {len(self.steps)} | Checks: {len(self.checks)} "
                     f"(pass {counts['pass']}, fail {counts['fail']}, inconclusive {counts['inconclusive']}) "
                     f"| Artifacts: {len(self.artifacts)} | Errors: {len(self.errors)}\n")
        for s in self.steps:
            lines.append(f"• {s['ts']} - {s['name']} ({len(s['meta'])} meta)")
        if self.checks:
            lines.append("\nChecks:")
            for c in self.checks:
                lines.append(f"  {c.status.upper():<12} {c.name:<28} margin={c.margin:.4g} tol={c.tolerance:.4g} "
                             f"({c.runtime:.1f}s, seed {c.seed})")
                if c.failed and c.witness:
                    lines.append(f"      witness: {c.witness}")
        if self.artifacts:
            lines.append("\nArtifacts:")
            for a in self.artifacts:
                lines.append(f"  - [{a['kind']}] {a['path']}")
        if self.errors:
            lines.append("\nErrors:")
            for e in self.errors:
                lines.append(f"  - {e['where']}: {e['err']}")
        return "\n".join(lines)


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)
