"""Run configuration: an INI file whose sections mirror the configuration dataclasses.

Every key has a default (the dataclass field default); unknown sections or
keys are rejected.  ``format_run_config`` writes a complete file.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .evaluation import MetricConfig
from .promptenc.text import TextConfig
from .training import STAGE_DEFAULTS, MMTSDOptions, TrainConfig
from .tsdmodel import ModelConfig
from .worldsim import WorldConfig


@dataclass(frozen=True)
class DataConfig:
    n_pretrain_speakers: int = 1000
    n_train_speakers: int = 200
    n_test_speakers: int = 100
    n_train: int = 500
    n_val: int = 50
    n_test: int = 100
    n_test_seen: int = 50
    # same-gender unseen-speaker mixtures for the face-prompt comparison
    n_test_same_gender: int = 100
    aligner_views_per_speaker: int = 8

    def validate(self) -> "DataConfig":
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigurationError(f"{f.name} must be >= 0")
        if self.n_train_speakers > self.n_pretrain_speakers:
            raise ConfigurationError("training speakers are drawn from the pretraining pool; "
                                     "n_train_speakers must not exceed n_pretrain_speakers")
        return self


@dataclass(frozen=True)
class AugmentSettings:
    p_noise: float = 0.2
    snr_low_db: float = 5.0
    snr_high_db: float = 20.0
    p_rir: float = 0.2
    rir_decay_low: float = 0.1
    rir_decay_high: float = 0.8


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = WorldConfig()
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    text: TextConfig = TextConfig()
    augment: AugmentSettings = AugmentSettings()
    metrics: MetricConfig = MetricConfig()
    pretrain_speaker: TrainConfig = STAGE_DEFAULTS["pretrain_speaker"]
    pretrain_text: TrainConfig = STAGE_DEFAULTS["pretrain_text"]
    aligner: TrainConfig = STAGE_DEFAULTS["aligner"]
    train: TrainConfig = STAGE_DEFAULTS["mmtsd"]
    mmtsd: MMTSDOptions = MMTSDOptions()

    # widths fixed by other sections
    _derived = {"model": ("d_a",), "text": ("out_dim",)}
    _fixed_stage = {"pretrain_speaker": "pretrain_speaker", "pretrain_text": "pretrain_text",
                    "aligner": "aligner", "train": "mmtsd"}

    def resolved(self) -> "RunConfig":
        """Copy with derived widths filled in from the world and model sections."""
        model = dataclasses.replace(self.model, d_a=self.world.d_a)
        text = dataclasses.replace(self.text, out_dim=model.d_model)
        return dataclasses.replace(self, model=model, text=text)

    def validate(self) -> "RunConfig":
        self.world.validate()
        self.data.validate()
        for name in self._fixed_stage:
            getattr(self, name).validate()
        return self


SECTIONS = tuple(f.name for f in dataclasses.fields(RunConfig))


def _keys(section: str) -> list[dataclasses.Field]:
    cls = type(getattr(RunConfig(), section))
    skip = RunConfig._derived.get(section, ()) + (("stage",) if section in RunConfig._fixed_stage else ())
    return [f for f in dataclasses.fields(cls) if f.name not in skip]


def _coerce(text: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text.strip()
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    base = RunConfig()
    updates = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigurationError(f"{source}: unknown section [{section}]")
        current = getattr(base, section)
        allowed = {f.name: f for f in _keys(section)}
        changes = {}
        for key, raw in parser.items(section):
            if key not in allowed:
                raise ConfigurationError(f"{source}: unknown key {key!r} in [{section}]")
            changes[key] = _coerce(raw, getattr(current, key), f"{source} [{section}] {key}")
        updates[section] = dataclasses.replace(current, **changes)
    return dataclasses.replace(base, **updates).validate().resolved()


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig().resolved()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"{path}: cannot read ({exc.strerror})") from None
    return parse_run_config(text, str(path))


def format_run_config(cfg: RunConfig, sections=SECTIONS) -> str:
    out = []
    for section in sections:
        obj = getattr(cfg, section)
        out.append(f"[{section}]")
        for f in _keys(section):
            v = getattr(obj, f.name)
            out.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        out.append("")
    return "\n".join(out)


def with_overrides(cfg: RunConfig, **sections) -> RunConfig:
    """``with_overrides(cfg, train={"epochs": 2})`` style replacement."""
    updates = {name: dataclasses.replace(getattr(cfg, name), **changes) for name, changes in sections.items()}
    return dataclasses.replace(cfg, **updates).validate().resolved()
