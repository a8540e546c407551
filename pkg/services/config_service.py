"""
Config Service - Run configuration loading and schema validation
A run is described by one JSON file. Unknown keys are rejected at every level and
the canonical JSON digest is recorded into every output.
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from services.errors import ConfigurationError

logger = logging.getLogger(__name__)

MODES = ("discover", "discover-evolution", "calibrate-stable", "bench-quadrature", "synth")
RECIPES = ("fracpoisson-1d", "fracpoisson-2d", "evolution-sine", "stable-path")
TERM_KINDS = ("fractional_laplacian", "riemann_liouville_left", "riemann_liouville_right")
EVOLUTION_CASES = ("advection", "diffusion", "advection_diffusion")

_NUM = (int, float)


def _field(types, required=False, **checks) -> Dict[str, Any]:
    return {"types": types, "required": required, **checks}


_SYNTH_FIELDS = {
    "recipe": _field(str, True, choices=RECIPES),
    "alpha": _field(_NUM, positive=True),
    "coeff": _field(_NUM),
    "n_a": _field(int, minimum=1),
    "n_b": _field(int, minimum=1),
    "domain": _field(list),
    "noise": _field(list),
    "reference_nodes": _field(int, minimum=8),
    "case": _field(str, choices=EVOLUTION_CASES),
    "times": _field(list),
    "points": _field(int, minimum=1),
    "p": _field(_NUM),
    "gamma": _field(_NUM, positive=True),
    "dt": _field(_NUM, positive=True),
    "steps": _field(int, minimum=1),
}

SCHEMA: Dict[str, Dict[str, Any]] = {
    "mode": _field(str, True, choices=MODES),
    "seed": _field(int),
    "output_dir": _field(str),
    "threads": _field(int, minimum=1),
    "standardize": _field(bool),
    "kernel": _field(dict, fields={
        "family": _field(str, True, choices=("matern", "squared_exponential")),
        "sigma": _field(_NUM, positive=True),
        "theta": _field(list),
        "nu": _field(list),
        "train_sigma": _field(bool),
        "train_theta": _field(bool),
        "train_nu": _field(bool),
    }),
    "operator": _field(dict, fields={
        "terms": _field(list, True, items={
            "kind": _field(str, True, choices=TERM_KINDS),
            "alpha": _field(_NUM, True, positive=True),
            "coeff": _field(_NUM, True),
            "train_alpha": _field(bool),
            "train_coeff": _field(bool),
        }),
        "positive_coeff": _field(bool),
        "generator": _field(bool),
    }),
    "stable": _field(dict, fields={
        "alpha": _field(_NUM, True, positive=True),
        "p": _field(_NUM, True),
        "gamma": _field(_NUM, True, positive=True),
    }),
    "noise": _field(dict, fields={
        "train": _field(bool),
        "initial": _field((list, int, float)),
        "floor": _field(_NUM, positive=True),
    }),
    "data": _field(dict, fields={
        "csv_a": _field(str),
        "csv_b": _field(str),
        "dt": _field(_NUM, positive=True),
        "synth": _field(dict, fields=_SYNTH_FIELDS),
    }),
    "series": _field(dict, fields={
        "csv": _field(str),
        "synth": _field(dict, fields=_SYNTH_FIELDS),
        "dt": _field(_NUM, positive=True),
        "lags": _field(list),
        "bins": _field(int, minimum=5),
        "range": _field(list),
        "scale": _field((str, int, float)),
        "allow_sparse": _field(bool),
    }),
    "synth": _field(dict, fields=_SYNTH_FIELDS),
    "quadrature": _field(dict, fields={
        "nodes_1d": _field(int, minimum=1),
        "radial": _field(int, minimum=1),
        "angular": _field(int, minimum=4),
    }),
    "optimizer": _field(dict, fields={
        "memory": _field(int, minimum=1),
        "max_iter": _field(int, minimum=1),
        "grad_tol": _field(_NUM, positive=True),
        "f_tol": _field(_NUM),
        "restarts": _field(int, minimum=0),
        "restart_scale": _field(_NUM, positive=True),
        "trace": _field(bool),
    }),
    "posterior": _field(dict, fields={
        "grid": _field(int, minimum=2),
        "domain": _field(list),
    }),
    "backtest": _field(dict, fields={
        "enabled": _field(bool),
        "paths": _field(int, minimum=1),
        "steps": _field(int, minimum=1),
    }),
    "bench": _field(dict, fields={
        "nodes": _field(list),
        "theta_sq": _field(list),
        "reference_nodes": _field(int, minimum=8),
        "alpha": _field(_NUM, positive=True),
        "lag_points_1d": _field(int, minimum=2),
        "lag_points_2d": _field(int, minimum=2),
        "dims": _field(list),
    }),
}

# Sections each mode needs
_REQUIRED_SECTIONS = {
    "discover": ("kernel", "operator", "data"),
    "discover-evolution": ("kernel", "operator", "data"),
    "calibrate-stable": ("kernel", "stable", "series"),
    "bench-quadrature": (),
    "synth": ("synth",),
}


def _check_value(value, spec: Dict[str, Any], path: str, problems: List[str]):
    types = spec["types"]
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        problems.append(f"{path}: expected {_type_name(types)}, got boolean")
        return
    if not isinstance(value, types):
        problems.append(f"{path}: expected {_type_name(types)}, got {type(value).__name__}")
        return
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if not math.isfinite(value):
            problems.append(f"{path}: must be finite")
        if spec.get("positive") and not value > 0:
            problems.append(f"{path}: must be positive")
        if "minimum" in spec and value < spec["minimum"]:
            problems.append(f"{path}: must be at least {spec['minimum']}")
    if "choices" in spec and value not in spec["choices"]:
        problems.append(f"{path}: must be one of {', '.join(spec['choices'])}")
    if "fields" in spec:
        _check_object(value, spec["fields"], path, problems)
    if "items" in spec:
        for index, item in enumerate(value):
            if not isinstance(item, dict):
                problems.append(f"{path}[{index}]: expected object")
            else:
                _check_object(item, spec["items"], f"{path}[{index}]", problems)


def _type_name(types) -> str:
    types = types if isinstance(types, tuple) else (types,)
    names = {int: "integer", float: "number", str: "string", bool: "boolean", list: "array", dict: "object"}
    return " or ".join(names.get(t, t.__name__) for t in types)


def _check_object(node: Dict[str, Any], fields: Dict[str, Dict[str, Any]], path: str, problems: List[str]):
    for key in node:
        if key not in fields:
            problems.append(f"{path + '.' if path else ''}{key}: unknown key")
    for key, spec in fields.items():
        child = f"{path + '.' if path else ''}{key}"
        if key not in node:
            if spec["required"]:
                problems.append(f"{child}: required")
            continue
        _check_value(node[key], spec, child, problems)


def validate_config(raw: Any) -> Tuple[bool, str]:
    """Check a parsed config against the schema. Returns (ok, message)."""
    if not isinstance(raw, dict):
        return False, "Config must be a JSON object."
    problems: List[str] = []
    _check_object(raw, SCHEMA, "", problems)
    mode = raw.get("mode")
    if not problems:
        for section in _REQUIRED_SECTIONS[mode]:
            if section not in raw:
                problems.append(f"{section}: required for mode {mode}")
        data = raw.get("data", {})
        if mode in ("discover", "discover-evolution") and "data" in raw:
            has_csv = "csv_a" in data or "csv_b" in data
            if has_csv == ("synth" in data) or (has_csv and not ("csv_a" in data and "csv_b" in data)):
                problems.append("data: give either csv_a and csv_b, or synth")
            if mode == "discover-evolution" and has_csv and "dt" not in data:
                problems.append("data.dt: required with snapshot CSVs")
        series = raw.get("series", {})
        if mode == "calibrate-stable" and "series" in raw and ("csv" in series) == ("synth" in series):
            problems.append("series: give exactly one of csv or synth")
        stable = raw.get("stable")
        if stable and not (0.0 < stable["alpha"] < 2.0 and 0.0 < stable["p"] < 1.0):
            problems.append("stable: initial alpha must lie in (0, 2) and p in (0, 1)")
    if problems:
        return False, "; ".join(problems)
    return True, "Config is valid."


def config_digest(raw: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON (sorted keys, compact separators)."""
    canonical = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RunConfig:
    raw: Dict[str, Any]
    digest: str
    base_dir: Path

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def threads(self) -> int:
        return int(self.raw.get("threads", 1))

    @property
    def output_dir(self) -> str:
        return self.raw.get("output_dir", self.raw["mode"])

    def section(self, name: str) -> Dict[str, Any]:
        return dict(self.raw.get(name, {}))

    def resolve(self, path: str) -> Path:
        """Data paths are relative to the config file."""
        candidate = Path(path)
        return candidate if candidate.is_absolute() else self.base_dir / candidate


def build_run_config(raw: Dict[str, Any], base_dir: Optional[Path] = None) -> RunConfig:
    ok, message = validate_config(raw)
    if not ok:
        raise ConfigurationError(message)
    return RunConfig(raw=raw, digest=config_digest(raw), base_dir=Path(base_dir or "."))


def load_run_config(path) -> RunConfig:
    """Read and validate a JSON run config."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"Config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"Config {path} is not valid JSON: {exc}") from None
    config = build_run_config(raw, path.parent)
    logger.info("Loaded %s config %s (digest %s)", config.mode, path, config.digest[:12])
    return config


def apply_overrides(config: RunConfig, out: Optional[str] = None, seed: Optional[int] = None,
                    quad_1d: Optional[int] = None, quad_2d: Optional[Tuple[int, int]] = None,
                    threads: Optional[int] = None) -> RunConfig:
    """Command-line flags take precedence over config values; the digest covers the result."""
    raw = json.loads(json.dumps(config.raw))
    if out is not None:
        raw["output_dir"] = out
    if seed is not None:
        raw["seed"] = seed
    if threads is not None:
        raw["threads"] = threads
    if quad_1d is not None:
        raw.setdefault("quadrature", {})["nodes_1d"] = quad_1d
    if quad_2d is not None:
        raw.setdefault("quadrature", {})["radial"] = quad_2d[0]
        raw["quadrature"]["angular"] = quad_2d[1]
    return build_run_config(raw, config.base_dir)
