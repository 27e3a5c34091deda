"""One flat run configuration shared by every command.

The file is a single JSON object whose keys are the union of the corpus
spec, training config and evaluation options. ``seed`` is shared by all
three. Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .evaluate import EvalOptions
from .fileio import read_json
from .synth import CorpusSpec
from .trainer import TrainConfig


def _names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


CORPUS_KEYS = _names(CorpusSpec)
TRAIN_KEYS = _names(TrainConfig)
EVAL_KEYS = _names(EvalOptions)
ALL_KEYS = list(dict.fromkeys(CORPUS_KEYS + TRAIN_KEYS + EVAL_KEYS))


@dataclass
class RunConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> dict:
        out = {}
        out.update(self.corpus.to_dict())
        out.update(self.train.to_dict())
        out.update({k: getattr(self.eval, k) for k in EVAL_KEYS})
        return out


def _typed(key: str, value):
    """Reject values whose JSON type cannot match the field default."""
    default = getattr(_DEFAULTS, key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        value = float(value)
    elif isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key} must be a list of integers, got {value!r}")
        value = tuple(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


class _Defaults:
    def __init__(self):
        for obj in (CorpusSpec(), TrainConfig(), EvalOptions()):
            for f in fields(obj):
                setattr(self, f.name, getattr(obj, f.name))


_DEFAULTS = _Defaults()


def build_run_config(values: dict) -> RunConfig:
    unknown = sorted(set(values) - set(ALL_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    typed = {k: _typed(k, v) for k, v in values.items()}
    try:
        return RunConfig(
            CorpusSpec(**{k: typed[k] for k in CORPUS_KEYS if k in typed}),
            TrainConfig(**{k: typed[k] for k in TRAIN_KEYS if k in typed}),
            EvalOptions(**{k: typed[k] for k in EVAL_KEYS if k in typed}),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        doc = read_json(path)
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        values.update(doc)
    values.update(overrides or {})
    return build_run_config(values)
