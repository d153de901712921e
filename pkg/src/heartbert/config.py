"""Line-oriented pipeline configuration: ``section.key = value``."""

from __future__ import annotations

import hashlib
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .encoder import ModelConfig
from .errors import ConfigError, MissingArtifactError


@dataclass
class SignalSection:
    target_hz: float = 360.0
    window: int = 4000


@dataclass
class QuantizerSection:
    levels: int = 100
    tol: float = 1e-7
    max_iter: int = 200
    max_samples: int = 10_000_000


@dataclass
class TokenizerSection:
    vocab_size: int = 52_000
    max_seq_len: int = 512


@dataclass
class PretrainSection:
    lr: float = 5e-5
    batch_size: int = 64
    epochs: int = 1000
    weight_decay: float = 0.01
    strategy: str = "80-10-10"


@dataclass
class FinetuneSection:
    lrs: tuple = (3e-5, 4e-3, 5e-3)
    batch_size: int = 8
    epochs: int = 10
    freeze: str = "all-frozen"


@dataclass
class TaskSection:
    kind: str = "heartbeat4"
    per_class: int = 0
    ratios: tuple = (0.7, 0.1, 0.2)


@dataclass
class SynthSection:
    n_records: int = 4
    rate: float = 250.0
    duration_s: float = 60.0
    base_freq: float = 1.0
    noise: float = 0.02
    vary_stage_rate: bool = False


@dataclass
class PathsSection:
    workdir: str = "work"
    raw_dir: str = ""


@dataclass
class RunSection:
    seed: int = 0


SECTIONS = {
    "run": RunSection, "signal": SignalSection, "quantizer": QuantizerSection,
    "tokenizer": TokenizerSection, "model": ModelConfig, "pretrain": PretrainSection,
    "finetune": FinetuneSection, "task": TaskSection, "synth": SynthSection, "paths": PathsSection,
}


@dataclass
class PipelineConfig:
    run: RunSection = field(default_factory=RunSection)
    signal: SignalSection = field(default_factory=SignalSection)
    quantizer: QuantizerSection = field(default_factory=QuantizerSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    task: TaskSection = field(default_factory=TaskSection)
    synth: SynthSection = field(default_factory=SynthSection)
    paths: PathsSection = field(default_factory=PathsSection)
    overrides: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def workdir(self) -> Path:
        return Path(self.paths.workdir)

    def as_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_text(self) -> str:
        lines = []
        for name in SECTIONS:
            for k, v in asdict(getattr(self, name)).items():
                lines.append(f"{name}.{k} = {_render(v)}")
        return "\n".join(lines) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def _render(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(repr(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected a boolean, got {raw!r}")
            return raw.lower() in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is tuple:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(text: str, extra: list[str] | None = None) -> PipelineConfig:
    """Parse config text plus ``section.key=value`` overrides, filling in the defaults."""
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    overrides = {}
    entries = []
    for lineno, ln in enumerate(text.splitlines(), start=1):
        s = ln.split("#", 1)[0].strip()
        if s:
            entries.append((s, f"line {lineno}"))
    entries += [(s, "override") for s in extra or []]
    for s, where in entries:
        key, sep, raw = s.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{where}: expected 'section.key = value', got {s!r}")
        section, dot, name = key.partition(".")
        if not dot or section not in SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        hints = typing.get_type_hints(SECTIONS[section])
        if name not in {f.name for f in fields(SECTIONS[section])}:
            raise ConfigError(f"unknown config key {key!r}")
        values[section][name] = _parse_value(raw, hints[name], key)
        overrides[key] = raw.strip()
    kw = {}
    for name, cls in SECTIONS.items():
        try:
            kw[name] = cls(**values[name])
        except ConfigError as exc:
            raise ConfigError(f"{name}: {exc}") from None
    cfg = PipelineConfig(**kw, overrides=overrides)
    _cross_validate(cfg)
    return cfg


def _cross_validate(cfg: PipelineConfig) -> None:
    if cfg.tokenizer.max_seq_len != cfg.model.max_seq_len:
        raise ConfigError(f"tokenizer.max_seq_len ({cfg.tokenizer.max_seq_len}) must equal "
                          f"model.max_positions - 2 ({cfg.model.max_seq_len})")
    if cfg.tokenizer.vocab_size > cfg.model.vocab_size:
        raise ConfigError("tokenizer.vocab_size exceeds model.vocab_size")
    if cfg.signal.target_hz <= 0:
        raise ConfigError("signal.target_hz must be positive")
    if not 1 <= cfg.signal.window <= 4000:
        raise ConfigError("signal.window must lie in [1, 4000]")
    if cfg.quantizer.levels < 1:
        raise ConfigError("quantizer.levels must be >= 1")
    if cfg.task.kind not in ("sleep3", "sleep5", "heartbeat4"):
        raise ConfigError(f"task.kind must be sleep3, sleep5 or heartbeat4, got {cfg.task.kind!r}")
    if len(cfg.task.ratios) != 3 or abs(sum(cfg.task.ratios) - 1) > 1e-9:
        raise ConfigError("task.ratios must be three fractions summing to 1")
    if not cfg.finetune.lrs:
        raise ConfigError("finetune.lrs must list at least one learning rate")
    for sec, key in (("pretrain", "batch_size"), ("finetune", "batch_size")):
        if getattr(getattr(cfg, sec), key) < 1:
            raise ConfigError(f"{sec}.{key} must be >= 1")


def validate_config(path=None, extra: list[str] | None = None) -> PipelineConfig:
    if path is None:
        return parse_config("", extra)
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing config file: {path}")
    return parse_config(path.read_text(encoding="utf-8"), extra)
