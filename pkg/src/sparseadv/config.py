"""
Run configuration: an INI-style file with one section per component, plus
``--section.key value`` overrides from the command line.

Keys may also be written with a dotted prefix outside any section
(``attack.epsilon = 10``). Unknown sections or keys are rejected.
"""

import configparser
import dataclasses
import os
import re
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .baselines import Pgd0Config
from .generator import GeneratorConfig
from .trainer import AttackConfig, TrainConfig

COMMANDS = ("train-classifier", "train-generator", "attack", "eval", "ablate")
OUTPUT_ROOT_ENV = "SPARSEADV_OUTPUT_ROOT"
ROOT_SECTION = "__root__"


class ConfigError(ValueError):
    def __init__(self, message, key=None, location=None):
        where = f" ({location})" if location else ""
        super().__init__(f"{message}{where}")
        self.key = key
        self.location = location


@dataclass
class PathsConfig:
    dataset: str = "builtin:digits"
    image_size: int = 16
    checkpoints: str = "checkpoints"
    output: str = "runs"


@dataclass
class ClassifierConfig:
    archs: list = field(default_factory=lambda: [
        "small-resnet", "small-vgg", "small-densenet", "small-inception-like"])
    source: str = "small-resnet"
    epochs: int = 40
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0


@dataclass
class EvalConfig:
    attack: str = "generator"        # generator | pgd0 | random
    targets: list = field(default_factory=lambda: [
        "small-vgg", "small-densenet", "small-inception-like"])
    n_samples: int = 400
    batch_size: int = 100
    warmup: int = 5


@dataclass
class AblateConfig:
    variants: list = field(default_factory=lambda: [
        "proposed", "no_decouple", "p_zero", "ste", "no_sparse_loss", "no_quanti_loss"])
    seeds: list = field(default_factory=lambda: [0])
    include_adhoc: bool = False
    adhoc_steps: int = 300
    adhoc_lr: float = 5e-3
    adhoc_samples: int = 50


@dataclass
class RunConfig:
    command: str = "eval"
    seed: int = 0
    workers: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(lambda_s=0.1, lambda_q=0.1))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, batch_size=64))
    generator: GeneratorConfig = field(default_factory=lambda: GeneratorConfig(base_width=8))
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    pgd0: Pgd0Config = field(default_factory=Pgd0Config)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    @property
    def train_config(self):
        """Training config with the shared attack section and run seed folded in."""
        return dataclasses.replace(self.train, attack=self.attack, seed=self.seed)

    @property
    def generator_config(self):
        return dataclasses.replace(self.generator, epsilon=self.attack.epsilon)

    def output_dir(self):
        out = Path(self.paths.output)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return out if out.is_absolute() or not root else Path(root) / out

    def checkpoint_dir(self):
        ck = Path(self.paths.checkpoints)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return ck if ck.is_absolute() or not root else Path(root) / ck


SECTIONS = ("paths", "attack", "train", "generator", "classifier", "eval", "pgd0", "ablate")
# settings that live in another section; listing them here avoids two sources of truth
SHADOWED = {"train": {"attack", "seed"}, "generator": {"epsilon"}}


def _coerce(raw, tp, key, location):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if raw.strip().lower() in ("none", ""):
            return None
        tp = next(a for a in args if a is not type(None))
        return _coerce(raw, tp, key, location)
    text = raw.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if tp is list or origin is list:
            items = [t for t in re.split(r"[,\s]+", text) if t]
            return [int(t) if re.fullmatch(r"-?\d+", t) else t for t in items]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}",
                          key, location) from None
    raise ConfigError(f"{key}: unsupported field type {tp}", key, location)


def _field_types(obj):
    return typing.get_type_hints(type(obj))


def _set(cfg, dotted, raw, location):
    if "." in dotted:
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown section {section!r} in key {dotted!r}", dotted, location)
        target = getattr(cfg, section)
        if key in SHADOWED.get(section, ()):
            raise ConfigError(f"{dotted} is set elsewhere "
                              f"({'attack.*' if key == 'attack' else key}); remove it here",
                              dotted, location)
    else:
        target, key = cfg, dotted
        if key in SECTIONS:
            raise ConfigError(f"{key!r} is a section, not a key", dotted, location)
    types_ = _field_types(target)
    if key not in types_ or dataclasses.is_dataclass(types_[key]):
        raise ConfigError(f"unknown config key {dotted!r}", dotted, location)
    setattr(target, key, _coerce(raw, types_[key], dotted, location))


def _line_of(text, key):
    bare = key.split(".", 1)[-1]
    for i, line in enumerate(text.splitlines(), 1):
        if re.match(rf"\s*({re.escape(key)}|{re.escape(bare)})\s*[=:]", line):
            return i
    return None


def parse_config(path=None, overrides=None, command=None):
    """Resolve defaults, then the file at ``path``, then ``overrides``.

    ``overrides`` is a list of ``(dotted_key, value)`` pairs. Validation
    errors name the key and where it came from.
    """
    cfg = RunConfig()
    if command is not None:
        cfg.command = command
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}", None, str(path))
        text = path.read_text()
        parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__",
                                           strict=True, inline_comment_prefixes=(";", "#"))
        parser.optionxform = str
        try:
            parser.read_string(f"[{ROOT_SECTION}]\n" + text, source=str(path))
        except configparser.Error as err:
            raise ConfigError(f"malformed config: {err}", None, str(path)) from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                dotted = key if section == ROOT_SECTION else f"{section}.{key}"
                line = _line_of(text, key)
                loc = f"{path}:{line}" if line else str(path)
                if section != ROOT_SECTION and section not in SECTIONS:
                    raise ConfigError(f"unknown section [{section}]", dotted, loc)
                _set(cfg, dotted, raw, loc)
    for key, raw in overrides or []:
        _set(cfg, key, str(raw), "command line")
    return validate(cfg)


def validate(cfg: RunConfig):
    if cfg.command not in COMMANDS:
        raise ConfigError(f"unknown command {cfg.command!r}", "command")
    try:
        cfg.attack.validate()
        cfg.train_config.validate()
        cfg.generator_config.validate()
        cfg.pgd0.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from None
    if cfg.eval.attack not in ("generator", "pgd0", "random"):
        raise ConfigError(f"unknown eval.attack {cfg.eval.attack!r}", "eval.attack")
    if cfg.classifier.source not in cfg.classifier.archs:
        raise ConfigError("classifier.source must be one of classifier.archs", "classifier.source")
    unknown = [t for t in cfg.eval.targets if t not in cfg.classifier.archs]
    if unknown:
        raise ConfigError(f"eval.targets not in classifier.archs: {unknown}", "eval.targets")
    if not cfg.paths.dataset:
        raise ConfigError("paths.dataset is required", "paths.dataset")
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Serialize the fully resolved config in the same format :func:`parse_config` reads."""
    lines = [f"command = {cfg.command}", f"seed = {cfg.seed}", f"workers = {cfg.workers}", ""]
    for section in SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            if f.name in SHADOWED.get(section, ()):
                continue
            v = getattr(obj, f.name)
            if isinstance(v, list):
                v = ", ".join(str(i) for i in v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)


def freeze_config(cfg: RunConfig, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.resolved.ini"
    path.write_text(dump_config(cfg))
    return path
