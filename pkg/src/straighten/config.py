"""Experiment configuration: INI files mapped onto the module dataclasses."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .analysis import NOISE_SIGMAS
from .datagen import GenConfig
from .errors import ConfigInvalid, FileMissing
from .objectives import ObjectiveConfig
from .trainer import NetConfig, TrainConfig


@dataclass
class SourceConfig:
    images: str = "data/digits-images-idx3-ubyte"
    labels: str = "data/digits-labels-idx1-ubyte"


@dataclass
class EvalConfig:
    tap: str = "out"  # decoding / geometry embeddings
    robust_tap: str = "backbone"  # recognition under noise and attack
    probe_dataset: str = ""  # fitting set for probes; defaults to the training dataset
    max_train_frames: int = 2000
    max_test_frames: int = 2000
    ridge: float = 1.0
    bandwidth: float | None = None
    l2: float = 1e-4
    attributes: tuple = ("identity", "x", "y", "scale", "angle")
    predict_attributes: tuple = ("x", "y", "scale")
    predict_sequences: int = 150
    curve_sequences: int = 200
    geometry_sequences: int = 400
    max_pairs: int = 100_000
    robust_items: int = 300
    noise_sigmas: tuple = NOISE_SIGMAS
    pgd_budgets: tuple = (0.0, 0.25, 0.5, 1.0, 2.0)
    pgd_steps: int = 500
    decoder_epochs: int = 5
    decoder_lr: float = 0.01


@dataclass
class ExperimentConfig:
    seed: int
    sources: SourceConfig = field(default_factory=SourceConfig)
    datagen: GenConfig = field(default_factory=GenConfig)
    network: NetConfig = field(default_factory=NetConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.training, seed=self.seed, objective=self.objective)

    def to_dict(self) -> dict:
        out = {"experiment": {"seed": self.seed}}
        for name in SECTIONS:
            sec = getattr(self, name)
            out[name] = {f.name: getattr(sec, f.name) for f in dataclasses.fields(sec) if f.name not in _SKIP}
        return out

    def to_ini(self) -> str:
        lines = []
        for sec, values in self.to_dict().items():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {_format(v)}" for k, v in values.items()]
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=list).encode()).hexdigest()[:16]


SECTIONS = {
    "sources": SourceConfig,
    "datagen": GenConfig,
    "network": NetConfig,
    "objective": ObjectiveConfig,
    "training": TrainConfig,
    "evaluation": EvalConfig,
}
_SKIP = {"objective", "seed"}  # carried by other sections of the experiment


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _scalar(text: str, kind, key):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(text)
            return low in ("true", "yes", "1", "on")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigInvalid(f"{key}: cannot read {text!r} as {kind.__name__}") from None
    return text


def _parse_value(text: str, default, hint, key):
    if text.strip().lower() == "none":
        if default is None or "None" in str(hint):
            return None
        raise ConfigInvalid(f"{key} may not be none")
    if isinstance(default, tuple) or "tuple" in str(hint):
        items = [t for t in (s.strip() for s in text.split(",")) if t]
        sample = default[0] if isinstance(default, tuple) and default else None
        if sample is None:
            kind = float if "float" in str(hint) else str
        else:
            kind = type(sample)
        if kind is int and any("." in t or "e" in t.lower() for t in items):
            kind = float
        return tuple(_scalar(t, kind, key) for t in items)
    if default is None:
        kind = float if "float" in str(hint) else str
    else:
        kind = type(default)
    return _scalar(text, kind, key)


def _build(cls, values: dict, section: str):
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls) if f.name not in _SKIP}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigInvalid(f"unknown keys in [{section}]: {sorted(unknown)}")
    proto = cls()
    kwargs = {}
    for key, text in values.items():
        kwargs[key] = _parse_value(text, getattr(proto, key), hints.get(key), f"{section}.{key}")
    return dataclasses.replace(proto, **kwargs)


def parse_config(text: str, seed_override: int | None = None) -> ExperimentConfig:
    """Parse INI text. Unknown sections or keys are errors; the seed is mandatory."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case (T is a field name)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigInvalid(f"malformed config: {exc}") from None
    extra = set(parser.sections()) - set(SECTIONS) - {"experiment"}
    if extra:
        raise ConfigInvalid(f"unknown sections: {sorted(extra)}")
    exp = dict(parser["experiment"]) if parser.has_section("experiment") else {}
    if set(exp) - {"seed"}:
        raise ConfigInvalid(f"unknown keys in [experiment]: {sorted(set(exp) - {'seed'})}")
    if seed_override is not None:
        seed = seed_override
    elif "seed" in exp:
        seed = _scalar(exp["seed"], int, "experiment.seed")
    else:
        raise ConfigInvalid("[experiment] seed is mandatory")
    if seed < 0:
        raise ConfigInvalid("seed must be non-negative")
    parts = {name: _build(cls, dict(parser[name]) if parser.has_section(name) else {}, name)
             for name, cls in SECTIONS.items()}
    cfg = ExperimentConfig(seed=seed, **parts)
    cfg.objective.validate()
    cfg.train_config().validate()
    return cfg


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileMissing(f"config not found: {path}")
    return parse_config(path.read_text(), seed_override)
