"""Run configuration: one JSON document naming the mesh, target, parameters and options.

Relative paths are resolved against the directory of the config file.

Example::

    {
      "schema": "modal-tune/config/1",
      "mesh": "arch_mesh.json",
      "target": "arch_target.json",
      "parameters": [
        {"name": "E2", "property": "E", "regions": [2], "lower": 1e9, "upper": 9e9}
      ],
      "start": "midpoint",
      "optimizer": {"gtol": 1e-6},
      "noise": {"deltas": [1e-4, 1e-3], "seeds": 10},
      "seed": 0
    }
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .assembly import BindingError, ConstrainedSystem, ParamBinding, ParamSpace, build_system
from .fixtures import ARCH_BINDINGS, ARCH_LOWER, ARCH_UPPER
from .mesh import load_mesh
from .objective import ModalTarget, load_target, normalize_weights, raw_weights
from .optimizer import TrustRegionOptions

CONFIG_SCHEMA = "modal-tune/config/1"
DEFAULT_DELTAS = (1e-4, 1e-3, 1e-2, 1e-1)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseOptions:
    deltas: tuple = DEFAULT_DELTAS
    seeds: int = 10
    mode_noise: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    mesh_path: Path
    target_path: Path | None
    bindings: tuple
    lower: tuple
    upper: tuple
    start: str | tuple = "midpoint"
    weights: dict | None = None  # overrides the target file's weighting
    optimizer: TrustRegionOptions = field(default_factory=TrustRegionOptions)
    noise: NoiseOptions = field(default_factory=NoiseOptions)
    noise_level: float = 0.0  # for trust flags in sensitivity reports
    q: int = 5  # modes computed by forward when no target is given
    seed: int = 0
    out: Path | None = None

    def space(self) -> ParamSpace:
        start = None if self.start == "midpoint" else self.start
        return ParamSpace(self.bindings, self.lower, self.upper, start)


def _options(cls, doc, where):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"'{where}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {where} option(s): {sorted(unknown)}")
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where} options: {exc}") from None


def config_from_dict(doc: dict, base: Path = Path(".")) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    schema = doc.get("schema", CONFIG_SCHEMA)
    if schema != CONFIG_SCHEMA:
        raise ConfigError(f"unsupported config schema {schema!r}; expected {CONFIG_SCHEMA!r}")
    if "mesh" not in doc:
        raise ConfigError("config missing key 'mesh'")

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    bindings, lower, upper = [], [], []
    for i, item in enumerate(doc.get("parameters", [])):
        try:
            bindings.append(ParamBinding(str(item["name"]), str(item["property"]),
                                         tuple(item["regions"])))
            lower.append(float(item["lower"]))
            upper.append(float(item["upper"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"parameter {i}: missing or malformed field {exc}") from None
    start = doc.get("start", "midpoint")
    if start != "midpoint":
        if not isinstance(start, list):
            raise ConfigError("start must be 'midpoint' or a list of values")
        start = tuple(float(v) for v in start)
    try:
        seed = int(doc.get("seed", 0))
    except (TypeError, ValueError):
        raise ConfigError("seed must be an integer") from None
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    return RunConfig(
        mesh_path=resolve(doc["mesh"]),
        target_path=resolve(doc["target"]) if doc.get("target") else None,
        bindings=tuple(bindings), lower=tuple(lower), upper=tuple(upper), start=start,
        weights=doc.get("weights"),
        optimizer=_options(TrustRegionOptions, doc.get("optimizer"), "optimizer"),
        noise=_options(NoiseOptions, doc.get("noise"), "noise"),
        noise_level=float(doc.get("noise_level", 0.0)), q=int(doc.get("q", 5)), seed=seed,
        out=resolve(doc["out"]) if doc.get("out") else None)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(doc, path.parent)


@dataclass(frozen=True, eq=False)
class Problem:
    config: RunConfig
    mesh: object
    constraints: object
    regions: dict
    system: ConstrainedSystem
    target: ModalTarget | None


def _reweight(target: ModalTarget, wdoc: dict) -> ModalTarget:
    w = raw_weights(target.frequencies, wdoc.get("scheme", "relative"),
                    wdoc.get("mode_weight", 0.1), wdoc.get("custom"))
    return ModalTarget(target.frequencies, target.sensor_dofs, target.mode_shapes,
                       normalize_weights(w))


def load_problem(config: RunConfig, need_target: bool = True) -> Problem:
    """Read the referenced files and build the constrained parametric system."""
    if not config.mesh_path.is_file():
        raise ConfigError(f"mesh file not found: {config.mesh_path}")
    mesh, constraints, regions = load_mesh(config.mesh_path.read_text())
    for b in config.bindings:
        missing = [r for r in b.regions if r not in regions]
        if missing:
            raise BindingError(f"parameter {b.name!r} binds region {missing[0]} not in the mesh")
    system = build_system(mesh, constraints, regions, config.space())
    target = None
    if config.target_path is not None:
        if not config.target_path.is_file():
            raise ConfigError(f"target file not found: {config.target_path}")
        fixed = [2 * n + d for n, d in constraints.fixed_dofs]
        fixed += [2 * s[0] + s[1] for s, _, _ in constraints.master_slave]
        target = load_target(config.target_path.read_text(), mesh.n_dofs, fixed)
        if config.weights:
            target = _reweight(target, config.weights)
    elif need_target:
        raise ConfigError("this command needs a target file ('target' in the config)")
    return Problem(config, mesh, constraints, regions, system, target)


def arch_config_dict(mesh_file: str, target_file: str) -> dict:
    """Config for the arch round trip, as written by ``make-mesh arch``."""
    return {
        "schema": CONFIG_SCHEMA,
        "mesh": mesh_file,
        "target": target_file,
        "parameters": [{"name": b.name, "property": b.property, "regions": list(b.regions),
                        "lower": lo, "upper": hi}
                       for b, lo, hi in zip(ARCH_BINDINGS, ARCH_LOWER, ARCH_UPPER)],
        "start": "midpoint",
        "optimizer": {"gtol": 1e-6},
        "noise": {"deltas": list(DEFAULT_DELTAS), "seeds": 10},
        "noise_level": 1e-3,
        "seed": 0,
    }
