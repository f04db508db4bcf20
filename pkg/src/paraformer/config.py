"""Experiment configuration as flat ``section.key = value`` text.

Example::

    # desk-scale run
    model.n = 32
    init.kind = standard_normal
    plan.name = alt
    train.lr = 0.003
    decode.strategy = greedy

Resolution order: profile defaults, then the config file, then CLI overrides.
Serialisation is sorted and deterministic, so a config hash identifies a run.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .decode import DecodeConfig
from .errors import ConfigError, ParaformerError
from .init import InitKind, InitSpec
from .model import LayerPlan, ModelConfig
from .training import TrainConfig

REPORT_FORMATS = ("csv", "markdown")
PLAN_NAMES = ("alt", "full", "seq1", "seq2", "standard", "custom")


@dataclass(frozen=True)
class ModelSection:
    n: int = 32
    d_qkv: int = 16
    d_ff: int = 64
    heads: int = 2
    layers: int = 2
    max_len: int = 32
    ln_eps: float = 1e-5
    freeze_embedding: bool = False

    def __post_init__(self):
        for name in ("n", "d_qkv", "d_ff", "heads", "layers", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")

    def build(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **dataclasses.asdict(self))


@dataclass(frozen=True)
class PlanSection:
    name: str = "alt"
    encoder_mask: str = ""  # comma-separated 0/1, only for name = custom
    decoder_mask: str = ""

    def __post_init__(self):
        if self.name.lower().replace("_", "") not in PLAN_NAMES:
            raise ConfigError(f"plan.name must be one of {PLAN_NAMES}, got {self.name!r}")

    def build(self, layers: int) -> LayerPlan:
        if self.name != "custom":
            return LayerPlan.named(self.name, layers)
        try:
            enc = tuple(bool(int(v)) for v in self.encoder_mask.split(",") if v.strip())
            dec = tuple(bool(int(v)) for v in self.decoder_mask.split(",") if v.strip())
        except ValueError:
            raise ConfigError("plan masks must be comma-separated 0/1 values") from None
        if len(enc) != layers or len(dec) != layers:
            raise ConfigError(f"custom plan masks must have {layers} entries")
        return LayerPlan(enc, dec, "custom")


@dataclass(frozen=True)
class PathsSection:
    corpus: str = ""
    eval_corpus: str = ""
    vectors: str = ""
    checkpoint: str = ""
    output: str = "runs/default"


@dataclass(frozen=True)
class ReportSection:
    format: str = "csv"


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    plan: PlanSection = field(default_factory=PlanSection)
    init: InitSpec = field(default_factory=InitSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    paths: PathsSection = field(default_factory=PathsSection)
    report: ReportSection = field(default_factory=ReportSection)

    def to_flat(self) -> dict[str, str]:
        flat = {}
        for section in fields(self):
            obj = getattr(self, section.name)
            for f in fields(obj):
                flat[f"{section.name}.{f.name}"] = _format(getattr(obj, f.name))
        return dict(sorted(flat.items()))

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_flat().items())

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()[:12]

    def with_overrides(self, overrides: dict[str, object]) -> "ExperimentConfig":
        sections = {s.name: getattr(self, s.name) for s in fields(self)}
        grouped: dict[str, dict[str, object]] = {}
        for key, raw in overrides.items():
            if "." not in key:
                raise ConfigError(f"config key {key!r} must look like section.name")
            sec, name = key.split(".", 1)
            if sec not in sections:
                raise ConfigError(f"unknown config section {sec!r} in {key!r}")
            ftypes = {f.name: f for f in fields(sections[sec])}
            if name not in ftypes:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(sections[sec], name)
            grouped.setdefault(sec, {})[name] = _coerce(key, raw, current)
        try:
            for sec, values in grouped.items():
                sections[sec] = replace(sections[sec], **values)
            cfg = ExperimentConfig(**sections)
        except ConfigError:
            raise
        except (ParaformerError, ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if cfg.report.format not in REPORT_FORMATS:
            raise ConfigError(f"report.format must be one of {REPORT_FORMATS}")
        return cfg


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, InitKind):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_bool(raw: str) -> bool:
    text = str(raw).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _coerce(key: str, raw, current):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            return parse_bool(raw)
        if isinstance(current, InitKind):
            return InitKind(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


PROFILES: dict[str, dict[str, str]] = {
    # small enough to train in seconds on one CPU core
    "desk": {
        "model.n": "32", "model.d_qkv": "16", "model.d_ff": "64", "model.heads": "2", "model.layers": "2",
        "model.max_len": "32",
        "init.kind": "standard_normal", "init.sigma_sa": "0.01", "init.sigma_ff": "0.05",
        "train.lr": "0.003", "train.batch_size": "32", "train.epochs": "30",
    },
    "paper": {
        "model.n": "300", "model.d_qkv": "128", "model.d_ff": "2048", "model.heads": "4", "model.layers": "6",
        "model.max_len": "64",
        "init.kind": "standard_normal", "init.sigma_sa": "0.01", "init.sigma_ff": "0.05",
        "init.gain_sa": "2.5", "init.gain_ff": "1.5",
        "train.lr": "0.0006", "train.batch_size": "32",
    },
}


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, profile: str = "desk", overrides: dict[str, object] | None = None) -> ExperimentConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    cfg = ExperimentConfig().with_overrides(PROFILES[profile])
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
        cfg = cfg.with_overrides(parse_text(text, str(path)))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg
