"""Run configuration read from a plain ``key = value`` text file.

Keys are namespaced by section::

    seed = 0
    domain_a = membrane
    data.cell_count = 3
    preprocess.gaussian_sigma = 1.0
    network.base_channels = 4
    train.lr_S = 0.05
    eval.thresholds = 0.1, 0.2, 0.3

``seed`` drives both the data template and the training schedule.  Blank
lines and ``#`` comments are ignored.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Tuple

from .datagen import EmbryoSpec
from .errors import ValidationError
from .gmi import DEFAULT_THRESHOLDS
from .networks import NetworkConfig
from .preprocessing import PreprocessConfig
from .training import TrainingSchedule

SECTIONS = {
    "data": EmbryoSpec,
    "preprocess": PreprocessConfig,
    "network": NetworkConfig,
    "train": TrainingSchedule,
}
# seeds come from the global key
_SKIP = {("data", "seed"), ("train", "seed")}


@dataclass(frozen=True)
class EvalConfig:
    thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS
    binarize: str = "fixed"


def desk_network() -> NetworkConfig:
    return NetworkConfig(base_channels=4)


def desk_schedule(seed: int = 0) -> TrainingSchedule:
    # an SGD rate of 1e-4 barely moves a CPU-sized run in 1800 steps
    return TrainingSchedule(seed=seed, lr_S=0.03, lr_C=0.03, sgd_momentum=0.9)


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs to be replayed.  Defaults are desk scale."""

    data: EmbryoSpec = EmbryoSpec()
    # synthetic canvases are already crop-sized, so the resize is the identity
    preprocess: PreprocessConfig = PreprocessConfig(intermediate_size=64, crop_size=64)
    network: NetworkConfig = field(default_factory=desk_network)
    train: TrainingSchedule = field(default_factory=desk_schedule)
    eval: EvalConfig = EvalConfig()
    seed: int = 0
    domain_a: str = "membrane"
    n_pairs: int = 256

    def __post_init__(self):
        if self.domain_a not in ("membrane", "nuclei"):
            raise ValidationError("domain_a", f"must be 'membrane' or 'nuclei', got {self.domain_a!r}")
        if self.network.image_size != self.preprocess.crop_size:
            raise ValidationError("network.image_size",
                                  f"{self.network.image_size} differs from preprocess.crop_size "
                                  f"{self.preprocess.crop_size}")
        # keep the section seeds in step with the global seed
        object.__setattr__(self, "data", replace(self.data, seed=self.seed))
        object.__setattr__(self, "train", replace(self.train, seed=self.seed))

    def to_dict(self) -> dict:
        return {
            "data": dataclasses.asdict(self.data),
            "preprocess": dataclasses.asdict(self.preprocess),
            "network": self.network.to_dict(),
            "train": self.train.to_dict(),
            "eval": {"thresholds": list(self.eval.thresholds), "binarize": self.eval.binarize},
            "seed": self.seed,
            "domain_a": self.domain_a,
            "n_pairs": self.n_pairs,
        }

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def dumps(self) -> str:
        lines = [f"# config hash {self.hash}",
                 f"seed = {self.seed}", f"domain_a = {self.domain_a}", f"n_pairs = {self.n_pairs}"]
        for section, cls in SECTIONS.items():
            obj = getattr(self, section)
            for f in dataclasses.fields(cls):
                if (section, f.name) in _SKIP:
                    continue
                lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        lines.append(f"eval.thresholds = {_format(self.eval.thresholds)}")
        lines.append(f"eval.binarize = {self.eval.binarize}")
        return "\n".join(lines) + "\n"


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(raw: str, default, where: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            items = [x.strip() for x in text.split(",") if x.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in items)
        if default is None:
            return None if text.lower() == "none" else int(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ValidationError(where, str(exc)) from None


def parse_config(text: str, source: str = "<config>", base: RunConfig = None) -> RunConfig:
    base = base or RunConfig()
    top = {"seed": base.seed, "domain_a": base.domain_a, "n_pairs": base.n_pairs}
    sections = {name: {} for name in SECTIONS}
    evals = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError("config", f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        where = f"{source}:{lineno}: {key}"
        if key in top:
            top[key] = _coerce(value, top[key], where)
            continue
        section, _, name = key.partition(".")
        if section == "eval" and name in ("thresholds", "binarize"):
            evals[name] = _coerce(value, getattr(base.eval, name), where)
            continue
        if section not in SECTIONS or (section, name) in _SKIP:
            raise ValidationError("config", f"{where}: unknown key")
        obj = getattr(base, section)
        names = {f.name for f in dataclasses.fields(obj)}
        if name not in names:
            raise ValidationError("config", f"{where}: unknown key")
        sections[section][name] = _coerce(value, getattr(obj, name), where)

    kwargs = {name: replace(getattr(base, name), **sections[name]) for name in SECTIONS}
    return RunConfig(eval=replace(base.eval, **evals), **kwargs, **top)


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a config file (optional) and apply ``key=value`` override strings."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ValidationError("config", f"cannot read {p}: {exc.strerror}") from None
        cfg = parse_config(text, str(p), cfg)
    if overrides:
        cfg = parse_config("\n".join(overrides), "--set", cfg)
    return cfg
