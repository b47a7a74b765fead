"""Run configuration: one dataclass per section, read from and written to
``section.field = <json value>`` text files, with environment overrides.

An environment variable ``VIPCNN_<SECTION>__<FIELD>`` (for example
``VIPCNN_TRAIN__LR=0.01``) replaces that field after the file is applied.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .data import SynthConfig
from .errors import ConfigError
from .model import ModelConfig
from .pipeline import EvalConfig
from .proposal import ProposalConfig
from .training import LossConfig, TrainConfig, training_proposals

ENV_PREFIX = "VIPCNN_"


@dataclass
class PathConfig:
    data: str = "data"
    out: str = "out"
    checkpoint: str = ""  # model weights to load (eval, stage-2-only training)
    synonyms: str = ""
    embeddings: str = ""  # directory with objects.vec / predicates.vec


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    variant: str = "vip"  # vip | baseline | no-tie
    n_images: int = 100
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    paths: PathConfig = field(default_factory=PathConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    proposal: ProposalConfig = field(default_factory=training_proposals)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.fractions = tuple(self.fractions)
        if self.variant not in ("vip", "baseline", "no-tie"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


def _flatten(obj, prefix="") -> dict[str, object]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = list(v) if isinstance(v, tuple) else v
    return out


def to_text(cfg: RunConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(_flatten(cfg).items()))


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _coerce(value, current):
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(tuple(x) if isinstance(x, list) else x for x in value)
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _rebuild(obj, updates: Mapping[str, object], prefix=""):
    """A copy of dataclass ``obj`` with dotted-key ``updates`` applied and re-validated."""
    known = {f.name for f in dataclasses.fields(obj)}
    kwargs = {}
    nested: dict[str, dict] = {}
    for key, value in updates.items():
        head, _, rest = key.partition(".")
        if head not in known:
            raise ConfigError(f"unknown config key {prefix}{key!r}")
        current = getattr(obj, head)
        if rest:
            if not dataclasses.is_dataclass(current):
                raise ConfigError(f"{prefix}{head} has no field {rest!r}")
            nested.setdefault(head, {})[rest] = value
        elif dataclasses.is_dataclass(current):
            raise ConfigError(f"{prefix}{head} is a section, not a value")
        else:
            kwargs[head] = _coerce(value, current)
    for head, sub in nested.items():
        kwargs[head] = _rebuild(getattr(obj, head), sub, f"{prefix}{head}.")
    try:
        return dataclasses.replace(obj, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value in section {prefix or 'top'}: {exc}") from exc


def parse_text(text: str, source: str = "<config>") -> dict[str, object]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        out[key.strip()] = _parse_value(raw.strip())
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, object]:
    environ = os.environ if environ is None else environ
    out = {}
    for k, v in environ.items():
        if k.startswith(ENV_PREFIX):
            key = k[len(ENV_PREFIX):].lower().replace("__", ".")
            out[key] = _parse_value(v)
    return out


def load_config(path=None, overrides: Mapping[str, object] | None = None,
                environ: Mapping[str, str] | None = None, base: RunConfig | None = None) -> RunConfig:
    """Defaults (``base`` if given), then the file at ``path``, then environment, then ``overrides``."""
    updates: dict[str, object] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        updates.update(parse_text(p.read_text(encoding="utf-8"), str(p)))
    updates.update(env_overrides(environ))
    updates.update(overrides or {})
    return apply_updates(base if base is not None else RunConfig(), updates)


def apply_updates(cfg: RunConfig, updates: Mapping[str, object]) -> RunConfig:
    return _rebuild(cfg, dict(updates))


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(to_text(cfg), encoding="utf-8")
