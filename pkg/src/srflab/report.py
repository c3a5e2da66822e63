"""Check reports and JSON-safe serialisation."""

from __future__ import annotations

import json
import math
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__


@dataclass
class CheckReport:
    """Outcome of one numeric check.

    ``slack >= 0`` means the tested inequality holds; the check passes when
    ``slack >= -tolerance``. ``status`` is ``"inconclusive"`` when the check
    could not be evaluated (counted as not failed) and ``"inapplicable"`` when
    the space does not fit its hypotheses (counted as failed).
    """

    name: str
    slack: float
    location: Any
    tolerance: float
    params: dict = field(default_factory=dict)
    status: str = "ok"
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        if self.status == "inconclusive":
            return True
        if self.status == "inapplicable":
            return False
        return bool(self.slack >= -self.tolerance)

    def to_dict(self) -> dict:
        return jsonable({
            "name": self.name,
            "slack": self.slack,
            "location": self.location,
            "tolerance": self.tolerance,
            "params": self.params,
            "pass": self.passed,
            "status": self.status,
            "details": self.details,
        })


def jsonable(obj):
    """Recursively convert numpy containers and non-finite floats for JSON."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def artifact_version() -> str:
    """Package version, suffixed with ``git describe`` output when available."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(jsonable(payload), indent=2, sort_keys=True) + "\n")
