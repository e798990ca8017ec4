"""Run configuration: a JSON document resolved over presets, overridden by flags.

Example file::

    {
      "scale": "desk",
      "model": {"preset": "desk", "pe": "spe", "acpe_kernel": [7, 3]},
      "pretrain": {"epochs": 40},
      "probe": {"epochs": 50},
      "finetune": {"head": "mlp-3"},
      "data": {"path": "data/cc", "split_seed": 42},
      "seeds": [0, 1, 2],
      "jobs": 1
    }

Every section is optional; unknown keys at any level are rejected.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import PRESETS, ModelConfig, preset
from .train import PROTOCOL_PRESETS, ProtocolConfig, protocol_preset

TOP_KEYS = ("scale", "model", "pretrain", "probe", "finetune", "data", "seeds", "jobs")
DATA_KEYS = ("path", "sampling_rate", "split_seed", "fractions", "eps")


@dataclass
class RunConfig:
    scale: str = "desk"
    model: ModelConfig = field(default_factory=lambda: preset("desk"))
    model_preset: str = "desk"
    protocols: dict = field(default_factory=dict)  # name -> ProtocolConfig
    data: dict = field(default_factory=lambda: {"path": None, "sampling_rate": None, "split_seed": 42,
                                                "fractions": [0.70, 0.15, 0.15], "eps": 1e-8})
    seeds: list = field(default_factory=lambda: [0])
    jobs: int = 1

    def protocol(self, name) -> ProtocolConfig:
        return self.protocols[name]

    def to_dict(self):
        return {
            "scale": self.scale,
            "model": {"preset": self.model_preset, **self.model.to_dict()},
            **{name: p.to_dict() for name, p in self.protocols.items()},
            "data": copy.deepcopy(self.data),
            "seeds": list(self.seeds),
            "jobs": self.jobs,
        }


def parse_seeds(text):
    """'0,1,2' or '0-4' (inclusive) or a list of ints."""
    if isinstance(text, (list, tuple)):
        seeds = [int(s) for s in text]
    else:
        seeds = []
        for part in filter(None, (p.strip() for p in str(text).split(","))):
            span = re.fullmatch(r"(\d+)-(\d+)", part)
            if span:
                seeds.extend(range(int(span[1]), int(span[2]) + 1))
            elif re.fullmatch(r"\d+", part):
                seeds.append(int(part))
            else:
                raise ConfigError(f"bad seed list {text!r}; use e.g. 0,1,2 or 0-4")
    if not seeds:
        raise ConfigError("at least one seed is required")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"duplicate seeds in {text!r}")
    return seeds


def _check_keys(section, d, allowed):
    if not isinstance(d, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


def resolve(doc=None, overrides=None) -> RunConfig:
    """Presets <- config document <- flag overrides (dotted keys, e.g. 'model.pe')."""
    doc = copy.deepcopy(doc or {})
    _check_keys("<root>", doc, TOP_KEYS)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        if section not in TOP_KEYS:
            raise ConfigError(f"unknown override {key!r}")
        if name:
            doc.setdefault(section, {})[name] = value
        else:
            doc[section] = value
    scale = doc.get("scale", "desk")
    if scale not in PROTOCOL_PRESETS:
        raise ConfigError(f"unknown scale {scale!r}; choose from {', '.join(PROTOCOL_PRESETS)}")
    m = dict(doc.get("model", {}))
    model_preset = m.pop("preset", scale if scale in PRESETS else "desk")
    if model_preset not in PRESETS:
        raise ConfigError(f"unknown model preset {model_preset!r}; choose from {', '.join(PRESETS)}")
    known = set(ModelConfig.__dataclass_fields__)
    _check_keys("model", m, known)
    model = preset(model_preset, **m)
    protocols = {}
    for name in ("pretrain", "probe", "finetune"):
        section = dict(doc.get(name, {}))
        _check_keys(name, section, set(ProtocolConfig.__dataclass_fields__) - {"protocol"})
        protocols[name] = protocol_preset(name, scale, **section)
    data = RunConfig().data
    section = doc.get("data", {})
    _check_keys("data", section, DATA_KEYS)
    data.update(section)
    seeds = parse_seeds(doc.get("seeds", [0]))
    jobs = int(doc.get("jobs", 1))
    if jobs < 1:
        raise ConfigError("jobs must be at least 1")
    return RunConfig(scale, model, model_preset, protocols, data, seeds, jobs)


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc
