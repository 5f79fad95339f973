"""Declarative run configuration (TOML or JSON).

Top-level keys configure extraction, splitting and training; an optional
``[synth]`` table describes synthetic recordings to generate when no dataset
is given.  Unknown keys are rejected with the line they appear on.
"""
from __future__ import annotations

import json
import re
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import Ablation
from .synthgen import ScenarioConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on the interpreter
    import tomli as tomllib


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic dataset: ``recordings`` scenarios with seeds ``seed, seed+1, ...``."""

    recordings: int = 1
    seed: int = 0
    scenario: dict = field(default_factory=dict)

    def scenarios(self) -> list[ScenarioConfig]:
        out = []
        for k in range(self.recordings):
            data = dict(self.scenario)
            data.update(rng_seed=self.seed + k, recording_id=k + 1)
            out.append(ScenarioConfig.from_dict(data))
        return out


@dataclass(frozen=True)
class RunConfig:
    dataset_root: str | None = None
    cases: str | None = None
    output_dir: str = "out"
    t_react: float = 1.0
    t_h: float = 1.5
    stride_s: float = 2.0
    min_stay_s: float = 12.0
    dup_factor: int = 16
    train_fraction: float = 0.9
    seed: int = 0
    ablations: tuple = tuple(a.value for a in Ablation)
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.001
    safety_mask: bool = False
    synth: SynthSpec | None = None

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        for name in ("t_react", "stride_s", "lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("t_h", "min_stay_s"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        for name in ("dup_factor", "epochs", "batch_size", "seed"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
        if self.dup_factor < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("dup_factor must be >= 0; epochs and batch_size >= 1")
        abl = tuple(Ablation.parse(a).value for a in (self.ablations or ()))
        if not abl:
            raise ConfigError("ablations must name at least one model")
        object.__setattr__(self, "ablations", abl)
        if isinstance(self.synth, dict):
            object.__setattr__(self, "synth", _synth_from_dict(self.synth))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        if self.synth is None:
            d.pop("synth")
        else:
            # same flat layout as the [synth] table so the dump parses back
            d["synth"] = {"recordings": self.synth.recordings, "seed": self.synth.seed, **self.synth.scenario}
        return d

    def replace(self, **changes) -> "RunConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig(**data)


def _synth_from_dict(data: dict) -> SynthSpec:
    data = dict(data)
    spec = SynthSpec(int(data.pop("recordings", 1)), int(data.pop("seed", 0)), data)
    if spec.recordings < 1:
        raise ConfigError("synth.recordings must be at least 1")
    spec.scenarios()  # validates the scenario keys and values
    return spec


def _line_of(text: str, key: str, json_syntax: bool) -> int | None:
    pattern = (r'"%s"\s*:' if json_syntax else r"^\s*\"?%s\"?\s*=") % re.escape(key)
    for n, line in enumerate(text.splitlines(), start=1):
        if re.search(pattern, line):
            return n
    return None


def parse_config(text: str, source: str = "<config>", json_syntax: bool | None = None) -> RunConfig:
    if json_syntax is None:
        json_syntax = text.lstrip().startswith("{")
    try:
        data = json.loads(text) if json_syntax else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a table")
    known = {f.name for f in fields(RunConfig)}
    for key in data:
        if key not in known:
            line = _line_of(text, key, json_syntax)
            where = f"{source}:{line}" if line else source
            raise ConfigError(f"{where}: unknown key {key!r}")
    synth = data.get("synth")
    if synth is not None:
        if not isinstance(synth, dict):
            raise ConfigError(f"{source}: synth must be a table")
        allowed = set(ScenarioConfig.__dataclass_fields__) - {"style_mixture", "rng_seed", "recording_id"}
        allowed |= {"styles", "recordings", "seed"}
        for key in synth:
            if key not in allowed:
                line = _line_of(text, key, json_syntax)
                where = f"{source}:{line}" if line else source
                raise ConfigError(f"{where}: unknown key 'synth.{key}'")
    if "ablations" in data and isinstance(data["ablations"], str):
        data["ablations"] = [data["ablations"]]
    try:
        return RunConfig(**data)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path), json_syntax=path.suffix.lower() == ".json" or None)


def dump_config(config: RunConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True, indent=2)
