"""Run configuration: a sectioned ``key = value`` text file.

Sections are ``[data]``, ``[train]``, ``[eval]`` and ``[output]``. Unknown
sections or keys are rejected by name.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Tuple

from .data import DEFAULT_FRACTIONS, SyntheticSpec
from .evaluator import MODES
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


_DATA_EXTRA = {"source_files", "target_files", "dir"}
_EVAL_KEYS = {"modes", "tau", "average"}
_OUTPUT_KEYS = {"dir"}


def _floats(s: str) -> List[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _ints(s: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _coerce(cls, key: str, raw: str):
    f = {f.name: f for f in fields(cls)}[key]
    default = f.default
    if key in ("hidden", "task_hidden"):
        return _ints(raw)
    if key == "angles":
        return _floats(raw)
    if key == "fractions":
        return tuple(_floats(raw))
    if isinstance(default, bool):
        return _bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


@dataclass
class RunConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    modes: Tuple[str, ...] = ("pred-ens", "mask-ens", "kd")
    tau: float = 0.5
    average: str = "probs"
    out_dir: str = "runs/default"
    data_dir: Optional[str] = None
    source_files: Tuple[str, ...] = ()
    target_files: Tuple[str, ...] = ()

    @property
    def uses_csv(self) -> bool:
        return bool(self.source_files)

    def resolved_data_dir(self) -> str:
        return self.data_dir or os.path.join(self.out_dir, "data")

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "data_files": {"sources": list(self.source_files), "targets": list(self.target_files)},
            "train": self.train.to_dict(),
            "eval": {"modes": list(self.modes), "tau": self.tau, "average": self.average},
        }

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, data=replace(self.data, seed=seed), train=replace(self.train, seed=seed))


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case (lambda_O)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown_sections = set(cp.sections()) - {"data", "train", "eval", "output"}
    if unknown_sections:
        raise ConfigError(f"unknown config section(s): {sorted(unknown_sections)}")

    data_fields = {f.name for f in fields(SyntheticSpec)}
    train_fields = {f.name for f in fields(TrainConfig)}
    data_kw: Dict[str, object] = {}
    train_kw: Dict[str, object] = {}
    run = RunConfig()
    try:
        if cp.has_section("data"):
            for key, raw in cp.items("data"):
                if key in data_fields:
                    data_kw[key] = _coerce(SyntheticSpec, key, raw)
                elif key == "source_files":
                    run.source_files = tuple(s.strip() for s in raw.split(",") if s.strip())
                elif key == "target_files":
                    run.target_files = tuple(s.strip() for s in raw.split(",") if s.strip())
                elif key == "dir":
                    run.data_dir = raw.strip()
                else:
                    raise ConfigError(f"unknown key {key!r} in [data]")
        if cp.has_section("train"):
            for key, raw in cp.items("train"):
                if key not in train_fields:
                    raise ConfigError(f"unknown key {key!r} in [train]")
                train_kw[key] = _coerce(TrainConfig, key, raw)
        if cp.has_section("eval"):
            for key, raw in cp.items("eval"):
                if key not in _EVAL_KEYS:
                    raise ConfigError(f"unknown key {key!r} in [eval]")
                if key == "modes":
                    run.modes = tuple(m.strip() for m in raw.split(",") if m.strip())
                    bad = [m for m in run.modes if m not in MODES]
                    if bad:
                        raise ConfigError(f"unknown inference mode(s) {bad}; choose from {MODES}")
                elif key == "tau":
                    run.tau = float(raw)
                else:
                    run.average = raw.strip()
        if cp.has_section("output"):
            for key, raw in cp.items("output"):
                if key not in _OUTPUT_KEYS:
                    raise ConfigError(f"unknown key {key!r} in [output]")
                run.out_dir = raw.strip()
        run.data = SyntheticSpec(**data_kw)
        if not run.uses_csv:
            run.data.validate()
        run.train = TrainConfig(**train_kw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from None
    if not 0.0 < run.tau < 1.0:
        raise ConfigError("tau must lie in (0, 1)")
    if run.average not in ("probs", "logits"):
        raise ConfigError("average must be 'probs' or 'logits'")
    if tuple(run.data.fractions) != DEFAULT_FRACTIONS and abs(sum(run.data.fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {run.data.fractions}")
    return run


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
