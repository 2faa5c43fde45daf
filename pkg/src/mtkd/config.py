"""INI experiment configuration.

Sections mirror the dataclasses they build::

    [corpus]      CorpusSpec fields (alphabet, min_len, max_len, n_train, ...)
    [model]       ModelConfig fields except the vocabulary sizes, which come from the corpus
    [train]       TrainConfig scalar fields (epochs, batch_size, learning_rate, ...)
    [kd]          KDWeights fields; enable_token / enable_sentence are teacher letters, e.g. "isd"
    [experiment]  seeds (comma list) and lambda_grid (comma list) for ablate / sweep-lambda;
                  teacher_epochs overrides [train] epochs for train-tir / train-mt (0 keeps it)

Missing keys keep the dataclass defaults. Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

from .corpus import CorpusSpec, build_vocab
from .losses import KDWeights
from .models import ModelConfig
from .training import TrainConfig, TrainingError


class ConfigError(ValueError):
    pass


_MODEL_SKIP = {"src_vocab", "tgt_vocab", "seed"}
_TRAIN_SKIP = {"kd"}


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple = (0, 1, 2)
    lambda_grid: tuple = (0.0, 0.4, 0.8, 1.0)
    teacher_epochs: int = 0

    def __post_init__(self):
        if self.teacher_epochs < 0:
            raise ValueError("teacher_epochs must be >= 0")


@dataclass(frozen=True)
class Config:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    @property
    def kd(self) -> KDWeights:
        return self.train.kd

    @property
    def teacher_train(self) -> TrainConfig:
        """Training config for the teachers: ``train`` with ``teacher_epochs`` applied."""
        if self.experiment.teacher_epochs:
            return replace(self.train, epochs=self.experiment.teacher_epochs)
        return self.train

    def model_for_corpus(self) -> ModelConfig:
        """Model config with vocabulary sizes filled in from the corpus alphabet."""
        n = len(build_vocab(self.corpus.alphabet))
        return replace(self.model, src_vocab=n, tgt_vocab=n, seed=self.train.seed)


def _sections(cfg: Config) -> dict[str, tuple[Any, set]]:
    return {
        "corpus": (cfg.corpus, set()),
        "model": (cfg.model, _MODEL_SKIP),
        "train": (cfg.train, _TRAIN_SKIP),
        "kd": (cfg.kd, set()),
        "experiment": (cfg.experiment, set()),
    }


def _parse(raw: str, current: Any, where: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, frozenset):
            return frozenset(raw.replace(",", "").replace(" ", "").lower())
        if isinstance(current, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            kind = type(current[0]) if current else str
            return tuple(kind(x) for x in items)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(current).__name__}") from None


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, frozenset):
        return "".join(sorted(value))
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _apply(cfg: Config, section: str, key: str, raw: str) -> Config:
    sections = _sections(cfg)
    if section not in sections:
        raise ConfigError(f"unknown config section [{section}]")
    obj, skip = sections[section]
    names = {f.name for f in fields(obj)} - skip
    if key not in names:
        raise ConfigError(f"unknown key {key!r} in [{section}]; expected one of {sorted(names)}")
    value = _parse(raw, getattr(obj, key), f"[{section}] {key}")
    try:
        new = replace(obj, **{key: value})
    except (ValueError, TypeError, TrainingError) as exc:
        raise ConfigError(f"[{section}] {key} = {raw}: {exc}") from exc
    if section == "kd":
        return replace(cfg, train=replace(cfg.train, kd=new))
    return replace(cfg, **{section: new})


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> Config:
    """Read ``path`` (if given) and apply ``section.key=value`` overrides in order."""
    cfg = Config()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg = _apply(cfg, section, key, raw)
    for item in overrides:
        lhs, sep, raw = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        cfg = _apply(cfg, section, key.strip(), raw)
    return cfg


def dump_config(cfg: Config) -> str:
    """The effective configuration as INI text; ``load_config`` reads it back unchanged."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, (obj, skip) in _sections(cfg).items():
        parser[section] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj) if f.name not in skip}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_config(cfg: Config, out_dir: str | Path, name: str = "effective_config.ini") -> Path:
    path = Path(out_dir) / name
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path


__all__ = ["Config", "ConfigError", "ExperimentConfig", "dump_config", "load_config", "write_config"]
