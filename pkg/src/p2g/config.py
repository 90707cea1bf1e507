"""Flat dotted-key configuration: built-in defaults < config file < ``--set`` overrides."""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Iterable, Optional

import yaml

from .backbone import BackboneConfig, PretrainConfig
from .data import GeneratorConfig
from .model import AblationFlags, ModelConfig
from .training import RunConfig


class ConfigError(ValueError):
    pass


def _fields(cls, prefix: str, skip=()) -> dict:
    return {f"{prefix}.{f.name}": f.default for f in dataclasses.fields(cls)
            if f.name not in skip and f.default is not dataclasses.MISSING}


def defaults() -> dict[str, Any]:
    d: dict[str, Any] = {"seed": 0}
    d.update(_fields(GeneratorConfig, "data", skip=("instance_count", "seed")))
    d.update({"data.seed": 0, "data.train_instances": 20000, "data.dev_instances": 2000,
              "data.test_instances": 2000})
    d.update(_fields(BackboneConfig, "backbone"))
    d.update(_fields(PretrainConfig, "pretrain", skip=("seed",)))
    d.update(_fields(RunConfig, "run", skip=("seed", "model", "flags")))
    d.update(_fields(ModelConfig, "model"))
    d.update(_fields(AblationFlags, "flags"))
    d.update({
        "eval.n": 1,
        "eval.zero_variance": False,
        "eval.vocab_hash": "",
        "ablate.steps": 0,  # 0 = run.steps
        "sweep.over": "n",
        "sweep.n_values": [0, 1, 2, 4, 6, 8, 10],
        "sweep.lambda_values": [0.1, 0.5, 1.0, 2.0],
        "gradcheck.per_family": 10,
        "gradcheck.step": 1e-4,
        "gradcheck.tolerance": 1e-3,
        "paths.train": "",
        "paths.dev": "",
        "paths.test": "",
        "paths.backbone": "",
        "paths.checkpoint": "",
        "paths.out": "out",
    })
    return d


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}.{k}" if prefix else str(k)
        if isinstance(v, dict):
            out.update(flatten(v, key))
        else:
            out[key] = v
    return out


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):  # YAML 1.1 leaves "1e-4" as a string
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if isinstance(default, str):
        if value is None:
            return ""
        return str(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return value


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override must look like key=value: {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        value = raw
    return key.strip(), value


def resolve(config_file: Optional[str | Path] = None, overrides: Iterable[str] = (),
            extra: Optional[dict] = None) -> dict[str, Any]:
    base = defaults()
    layers = []
    if config_file:
        path = Path(config_file)
        if not path.exists():
            raise FileNotFoundError(path)
        loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a mapping of dotted keys")
        layers.append(flatten(loaded))
    layers.append(dict(parse_override(o) for o in overrides))
    layers.append(extra or {})
    out = dict(base)
    for layer in layers:
        for key, value in layer.items():
            if key == "command":
                continue
            if key not in base:
                raise ConfigError(f"unknown config key: {key}")
            out[key] = _coerce(key, value, base[key])
    return out


def write_snapshot(cfg: dict, command: str, path: str | Path) -> None:
    data = {"command": command, **cfg}
    Path(path).write_text(yaml.safe_dump(data, sort_keys=True), encoding="utf-8")


def _section(cfg: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def generator_config(cfg: dict, split: str) -> GeneratorConfig:
    offsets = {"train": 0, "dev": 1, "test": 2}
    sec = _section(cfg, "data")
    return GeneratorConfig(
        scenario_count=sec["scenario_count"], vocab_per_scenario=sec["vocab_per_scenario"],
        chain_length=sec["chain_length"], candidate_count=sec["candidate_count"],
        null_argument_rate=sec["null_argument_rate"],
        distractor_overlap_rate=sec["distractor_overlap_rate"],
        instance_count=sec[f"{split}_instances"],
        seed=sec["seed"] * 1000 + offsets[split],
    )


def backbone_config(cfg: dict) -> BackboneConfig:
    return BackboneConfig(**_section(cfg, "backbone"))


def pretrain_config(cfg: dict) -> PretrainConfig:
    return PretrainConfig(**_section(cfg, "pretrain"), seed=cfg["seed"])


def run_config(cfg: dict) -> RunConfig:
    return RunConfig(**_section(cfg, "run"), seed=cfg["seed"],
                     model=ModelConfig(**_section(cfg, "model")),
                     flags=AblationFlags(**_section(cfg, "flags")))
