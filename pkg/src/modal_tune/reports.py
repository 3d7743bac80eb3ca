"""JSON and CSV reports.

Every JSON report is ``{"schema": ..., "result": ..., "metadata": ...}``. The
result part is a deterministic function of the inputs; timings, versions and
timestamps live in ``metadata`` so reports can be compared byte for byte after
dropping it.
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import math
import platform
from pathlib import Path

import numpy as np

from . import __version__
from .optimizer import Step, UpdateResult

SCHEMA_VERSION = 1
STEP_COLUMNS = ("iteration", "phi", "radius", "ratio", "accepted")
SWEEP_COLUMNS = ("delta", "seed", "error", "converged", "message")


def schema_name(kind: str) -> str:
    return f"modal-tune/{kind}/{SCHEMA_VERSION}"


def _clean(value):
    """JSON-safe copy: arrays to lists, non-finite floats to strings."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return value


def _float(v) -> float:
    return float(v)  # float("nan"), float("inf") parse the strings written by _clean


def metadata(**extra) -> dict:
    return {"version": __version__, "python": platform.python_version(),
            "numpy": np.__version__,
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"), **extra}


def dump_report(kind: str, result: dict, meta: dict | None = None) -> str:
    doc = {"schema": schema_name(kind), "result": _clean(result), "metadata": _clean(meta or {})}
    return json.dumps(doc, indent=2) + "\n"


def load_report(text: str, kind: str | None = None) -> dict:
    doc = json.loads(text)
    if kind is not None and doc.get("schema") != schema_name(kind):
        raise ValueError(f"expected schema {schema_name(kind)!r}, got {doc.get('schema')!r}")
    return doc


def write_report(path, kind: str, result: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.write_text(dump_report(kind, result, meta))
    return path


# ---------------------------------------------------------------------------
# UpdateResult

def step_to_dict(step: Step) -> dict:
    return {"iteration": step.iteration, "phi": step.phi, "radius": step.radius,
            "ratio": step.ratio, "accepted": step.accepted, "u": step.u, "x": step.x,
            "frequencies": step.frequencies}


def step_from_dict(doc: dict) -> Step:
    return Step(int(doc["iteration"]), _float(doc["phi"]), _float(doc["radius"]),
                _float(doc["ratio"]), bool(doc["accepted"]), np.array(doc["u"], dtype=float),
                np.array(doc["x"], dtype=float), np.array(doc["frequencies"], dtype=float))


def result_to_dict(result: UpdateResult) -> dict:
    sol = result.solution
    return _clean({
        "method": result.method,
        "names": list(result.names),
        "x_opt": result.x_opt,
        "phi": result.phi,
        "termination": result.termination,
        "gradient_norm": result.gradient_norm,
        "rom_builds": result.rom_builds,
        "full_solves": result.full_solves,
        "accepted": result.accepted,
        "rejected": result.rejected,
        "frequencies": None if sol is None else sol.frequencies,
        "eigen_residuals": None if sol is None else sol.residuals,
        "jacobian": result.jacobian,
        "phi_history": result.phi_history,
        "frequency_history": result.frequency_history,
        "steps": [step_to_dict(s) for s in result.steps],
    })


def result_from_dict(doc: dict) -> UpdateResult:
    """Inverse of :func:`result_to_dict`; the eigenvectors are not stored, so ``solution`` is None."""
    jac = doc.get("jacobian")
    return UpdateResult(
        x_opt=np.array(doc["x_opt"], dtype=float), phi=_float(doc["phi"]),
        termination=doc["termination"], phi_history=[_float(v) for v in doc["phi_history"]],
        frequency_history=[np.array(f, dtype=float) for f in doc["frequency_history"]],
        steps=[step_from_dict(s) for s in doc["steps"]], solution=None,
        jacobian=None if jac is None else np.array(jac, dtype=float),
        gradient_norm=_float(doc["gradient_norm"]), rom_builds=int(doc["rom_builds"]),
        full_solves=int(doc["full_solves"]), method=doc["method"], names=list(doc["names"]))


# ---------------------------------------------------------------------------
# CSV

def step_columns(names, q: int) -> list:
    return (list(STEP_COLUMNS) + [f"u_{n}" for n in names] + [f"x_{n}" for n in names]
            + [f"f{i + 1}_hz" for i in range(q)])


def write_steps_csv(path, result: UpdateResult) -> Path:
    """One row per evaluated point: the start, then every accepted or rejected candidate."""
    q = len(result.steps[0].frequencies) if result.steps else 0
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(step_columns(result.names, q))
        for s in result.steps:
            writer.writerow([s.iteration, repr(float(s.phi)), repr(float(s.radius)),
                             repr(float(s.ratio)), int(s.accepted)]
                            + [repr(float(v)) for v in s.u] + [repr(float(v)) for v in s.x]
                            + [repr(float(v)) for v in s.frequencies])
    return path


def write_sweep_csv(path, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for r in rows:
            writer.writerow([repr(float(r.delta)), r.seed, repr(float(r.error)), int(r.converged),
                             r.message])
    return path


def read_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
