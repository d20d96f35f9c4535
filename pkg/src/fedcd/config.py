"""Experiment configuration: typed INI sections mapped onto the dataclasses.

Grammar: standard INI (``[section]`` headers, ``key = value`` lines, ``#``
comments). Sections are ``scenario``, ``federation``, ``solver`` and
``experiment``; keys are the dataclass field names. Lists are
comma-separated, ``none`` clears an optional value.
"""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, field

from fedcd.federation.engine import FederationConfig
from fedcd.synthgen import ScenarioSpec


class ConfigError(ValueError):
    def __init__(self, key: str, detail: str):
        self.key = key
        super().__init__(f"config error at {key}: {detail}")


@dataclass
class ExperimentConfig:
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    federation: FederationConfig = field(default_factory=FederationConfig)
    repetitions: int = 1
    output_dir: str = "results"
    source: str = "synthetic"           # synthetic | csv
    data_paths: list[str] = field(default_factory=list)
    truth_path: str | None = None
    standardize: bool | None = None     # None: on for csv input, off for synthetic
    workers: int = 1

    def validate(self) -> None:
        if self.repetitions < 1:
            raise ConfigError("experiment.repetitions", "must be >= 1")
        if self.workers < 1:
            raise ConfigError("experiment.workers", "must be >= 1")
        if self.source not in ("synthetic", "csv"):
            raise ConfigError("experiment.source", "must be synthetic or csv")
        if self.source == "csv" and not self.data_paths:
            raise ConfigError("experiment.data_paths", "csv source needs client files")
        if self.source == "synthetic" and (self.data_paths or self.truth_path):
            raise ConfigError("experiment.data_paths",
                              "external files given but source is synthetic")
        if self.source == "csv" and len(self.data_paths) != self.federation.m:
            raise ConfigError("federation.m", f"{len(self.data_paths)} data files for "
                              f"m={self.federation.m} clients")
        if self.source == "synthetic" and self.scenario.m != self.federation.m:
            raise ConfigError("scenario.m", f"scenario has m={self.scenario.m} but federation "
                              f"has m={self.federation.m}")
        for name, obj in (("scenario", self.scenario), ("federation", self.federation)):
            try:
                obj.validate()
            except ValueError as exc:
                raise ConfigError(name, str(exc)) from None


SECTIONS = ("scenario", "federation", "solver", "experiment")


def _target(cfg: ExperimentConfig, section: str):
    return {"scenario": cfg.scenario, "federation": cfg.federation,
            "solver": cfg.federation.solver, "experiment": cfg}[section]


def _coerce(raw: str, tp, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if raw.lower() in ("none", ""):
            return None
        tp = next(a for a in args if a is not type(None))
        origin = typing.get_origin(tp)
    try:
        if tp is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if origin is list:
            return [p.strip() for p in raw.split(",") if p.strip()]
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot read {raw!r} as {getattr(tp, '__name__', tp)}") from None


def set_value(cfg: ExperimentConfig, dotted: str, raw: str) -> None:
    """Apply ``section.key = raw`` with type coercion from the dataclass annotation."""
    if "." not in dotted:
        raise ConfigError(dotted, "expected section.key")
    section, key = dotted.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(dotted, f"unknown section, expected one of {SECTIONS}")
    obj = _target(cfg, section)
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)} - {"scenario", "federation", "solver"}
    if key not in names:
        raise ConfigError(dotted, "unknown key")
    setattr(obj, key, _coerce(raw, hints[key], dotted))


def load_config(path: str | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.optionxform = str
        with open(path) as fh:
            parser.read_file(fh)
        for section in parser.sections():
            for key, raw in parser.items(section):
                set_value(cfg, f"{section}.{key}", raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, raw = item.split("=", 1)
        set_value(cfg, key.strip(), raw)
    cfg.validate()
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Round-trippable INI text of every key, defaults included."""
    lines = []
    for section in SECTIONS:
        obj = _target(cfg, section)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            if f.name in ("scenario", "federation", "solver"):
                continue
            v = getattr(obj, f.name)
            if isinstance(v, list):
                v = ", ".join(v)
            elif v is None:
                v = "none"
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
