"""Pipeline configuration: YAML files, presets, env interpolation, hashing.

A configuration is a nested mapping with a fixed schema. Loading resolves,
in order: built-in defaults <- optional preset <- user file <- command-line
overrides. String values may reference environment variables as ``${VAR}``;
unresolvable references are a configuration error (credentials must never
fail silently).

The config hash is the sha256 of the canonical JSON of the resolved mapping
minus purely operational keys (output directory, worker count), so two runs
writing to different places still share a hash — and must produce
byte-identical JSON artifacts.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigError

_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")

SCREENING_METHODS = ("grad", "smoothgrad", "fda")
GENERATOR_KINDS = ("synthetic", "adapter")
SUT_KINDS = ("scenario", "linear_mean", "adapter")
ATTRIBUTION_BACKENDS = ("ground_truth", "vlm_http")
DROP_CONVENTIONS = ("signed", "absolute")
TIE_RULES = ("relevant", "spurious")

DEFAULTS = {
    "task": {
        "name": "synthetic-object",
        "attribute": "the object",
        "target_class": 0,
    },
    "generator": {
        "kind": "synthetic",
        "image_size": 48,
        "cue_amplitude": 3.5,
        "command": None,
    },
    "sut": {
        "kind": "scenario",
        "scenario_dir": None,
        "command": None,
    },
    "seeds": {
        "count": 10,
        "start": 0,
        "list": None,
    },
    "truncation": 1.0,
    "screening": {
        "method": "grad",
        "n": 10,
        "sigma": None,
        "delta": 0.1,
        "k_coarse_mid": 15,
        "k_fine": 5,
    },
    "oracle": {
        "epsilon": 10.0,
        "tau_fraction": 0.4,
        "drop_convention": "signed",
        "tolerance": 0.01,
        "max_iterations": 12,
    },
    "attribution": {
        "backend": "ground_truth",
        "endpoint": None,
        "api_key_env": None,
        "model": None,
        "vote_samples": 5,
        "tie_rule": "relevant",
        "diff_threshold": 0.2,
        "max_retries": 2,
        "timeout": 60.0,
    },
    "repair": {
        "mix_ratio": 0.2,
        "holdout_fraction": 0.2,
        "rng_seed": 0,
        "n_originals": 100,
        "lr": 2.0e-5,
        "max_epochs": 20,
        "early_stop": True,
        "patience": 3,
    },
    "scenario": {
        "spurious_strength": 1.0,
        "n_train": 1600,
        "rng_seed": 0,
    },
    "output_dir": "runs/out",
    "workers": 1,
}

# Keys that never influence artifact content.
_OPERATIONAL_KEYS = ("output_dir", "workers")


def _interpolate(value):
    if isinstance(value, str):
        def repl(match):
            name = match.group(1)
            resolved = os.environ.get(name)
            if resolved is None:
                raise ConfigError(f"environment variable {name} is not set "
                                  f"(referenced as ${{{name}}})")
            return resolved
        return _ENV_PATTERN.sub(repl, value)
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    return value


def _merge(base: dict, override: dict, path: str = "") -> dict:
    merged = dict(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(
                f"unknown config key {where!r}; valid keys here: "
                f"{sorted(base)}"
            )
        if isinstance(base[key], dict) and base[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            merged[key] = _merge(base[key], value, where)
        else:
            if isinstance(value, dict):
                raise ConfigError(f"{where} is not a section")
            merged[key] = value
    return merged


def _require(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


def _validate(cfg: dict) -> None:
    _require(0.0 < cfg["truncation"] <= 1.0,
             "truncation must be in (0, 1]")
    scr = cfg["screening"]
    _require(scr["method"] in SCREENING_METHODS,
             f"unknown screening method {scr['method']!r}; "
             f"valid methods: {list(SCREENING_METHODS)}")
    _require(scr["n"] >= 1, "screening.n must be >= 1")
    _require(scr["sigma"] is None or scr["sigma"] > 0,
             "screening.sigma must be positive when set")
    _require(scr["delta"] > 0, "screening.delta must be positive")
    _require(scr["k_coarse_mid"] >= 0 and scr["k_fine"] >= 0,
             "band budgets must be non-negative")
    orc = cfg["oracle"]
    _require(orc["epsilon"] > 0, "oracle.epsilon must be positive")
    _require(orc["tau_fraction"] > 0, "oracle.tau_fraction must be positive")
    _require(orc["drop_convention"] in DROP_CONVENTIONS,
             f"oracle.drop_convention must be one of {list(DROP_CONVENTIONS)}")
    _require(orc["tolerance"] > 0, "oracle.tolerance must be positive")
    _require(orc["max_iterations"] >= 1, "oracle.max_iterations must be >= 1")
    gen = cfg["generator"]
    _require(gen["kind"] in GENERATOR_KINDS,
             f"generator.kind must be one of {list(GENERATOR_KINDS)}")
    if gen["kind"] == "adapter":
        _require(bool(gen["command"]),
                 "generator.command is required for the adapter backend")
    sut = cfg["sut"]
    _require(sut["kind"] in SUT_KINDS,
             f"sut.kind must be one of {list(SUT_KINDS)}")
    if sut["kind"] == "adapter":
        _require(bool(sut["command"]),
                 "sut.command is required for the adapter backend")
    att = cfg["attribution"]
    _require(att["backend"] in ATTRIBUTION_BACKENDS,
             f"attribution.backend must be one of {list(ATTRIBUTION_BACKENDS)}")
    if att["backend"] == "vlm_http":
        _require(bool(att["endpoint"]),
                 "attribution.endpoint is required for the VLM backend")
    _require(att["vote_samples"] >= 1, "attribution.vote_samples must be >= 1")
    _require(att["tie_rule"] in TIE_RULES,
             f"attribution.tie_rule must be one of {list(TIE_RULES)}")
    _require(0.0 <= att["diff_threshold"] <= 1.0,
             "attribution.diff_threshold must be in [0, 1]")
    rep = cfg["repair"]
    _require(0.0 <= rep["mix_ratio"] < 1.0, "repair.mix_ratio must be in [0, 1)")
    _require(0.0 <= rep["holdout_fraction"] < 1.0,
             "repair.holdout_fraction must be in [0, 1)")
    _require(rep["lr"] >= 0, "repair.lr must be non-negative")
    _require(rep["max_epochs"] >= 1, "repair.max_epochs must be >= 1")
    _require(rep["n_originals"] >= 5, "repair.n_originals must be >= 5")
    sc = cfg["scenario"]
    _require(0.0 <= sc["spurious_strength"] <= 1.0,
             "scenario.spurious_strength must be in [0, 1]")
    _require(sc["n_train"] >= 10, "scenario.n_train must be >= 10")
    seeds = cfg["seeds"]
    if seeds["list"] is not None:
        _require(isinstance(seeds["list"], list) and seeds["list"],
                 "seeds.list must be a non-empty list when given")
        _require(all(isinstance(s, int) for s in seeds["list"]),
                 "seeds.list entries must be integers")
    else:
        _require(seeds["count"] >= 1, "seeds.count must be >= 1")
    _require(cfg["workers"] >= 1, "workers must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    """Resolved, validated configuration plus its identity hash."""

    data: dict

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seeds(self) -> tuple:
        block = self.data["seeds"]
        if block["list"] is not None:
            return tuple(int(s) for s in block["list"])
        start = int(block["start"])
        return tuple(range(start, start + int(block["count"])))

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output_dir"])

    @property
    def config_hash(self) -> str:
        hashable = {k: v for k, v in self.data.items()
                    if k not in _OPERATIONAL_KEYS}
        canonical = json.dumps(hashable, sort_keys=True,
                               separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def resolved(self) -> dict:
        return json.loads(json.dumps(self.data))


def available_presets() -> tuple:
    root = resources.files("featureprobe") / "presets"
    return tuple(sorted(
        p.name[:-len(".yaml")] for p in root.iterdir()
        if p.name.endswith(".yaml")
    ))


def load_preset(name: str) -> dict:
    ref = resources.files("featureprobe") / "presets" / f"{name}.yaml"
    try:
        text = ref.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(
            f"unknown preset {name!r}; available: {list(available_presets())}"
        )
    return yaml.safe_load(text) or {}


def parse_override(expression: str):
    """Parse one ``section.key=value`` override; values are YAML scalars."""
    if "=" not in expression:
        raise ConfigError(f"override {expression!r} must look like key=value")
    dotted, _, raw = expression.partition("=")
    keys = [k for k in dotted.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {expression!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}: {exc}")
    nested = value
    for key in reversed(keys):
        nested = {key: nested}
    return nested


def load_config(path=None, preset=None, overrides=()) -> PipelineConfig:
    """Resolve defaults <- preset <- file <- overrides, then validate."""
    cfg = DEFAULTS
    if preset:
        cfg = _merge(cfg, load_preset(preset))
    if path is not None:
        file_path = Path(path)
        if not file_path.exists():
            raise ConfigError(f"config file not found: {file_path}")
        try:
            loaded = yaml.safe_load(file_path.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {file_path}: {exc}")
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{file_path} must contain a mapping")
        cfg = _merge(cfg, loaded)
    for expression in overrides:
        cfg = _merge(cfg, parse_override(expression))
    cfg = _interpolate(cfg)
    _validate(cfg)
    return PipelineConfig(cfg)
