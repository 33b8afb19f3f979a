"""Flat text experiment configuration.

One `key = value` pair per line, with dotted prefixes naming the owning
section (`sampler.kind = heun`). Full-line comments start with `#`; blank
lines are ignored. Every key has a typed default, unknown keys are rejected
with their line number, and serialization is canonical (schema order, exact
float round-trip), so parse -> serialize -> parse is the identity. `inf` is
a valid float wherever one is accepted, e.g. noise.alpha for the frozen
prior.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .edm import EdmParams
from .errors import ParseError
from .noise_prior import NoiseSpec
from .sampler import SamplerConfig
from .toydata import DatasetSpec


@dataclass(frozen=True)
class ModelKnobs:
    channels: int = 16
    emb_dim: int = 32
    groups: int = 4
    n_frames_max: int = 8


@dataclass(frozen=True)
class TrainingConfig:
    steps: int = 400
    image_steps: int = 600
    batch: int = 6
    image_batch: int = 8
    lr: float = 1e-4
    image_lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    ema: float = 0.99  # desk-scale half-life; long runs may want 0.9999


@dataclass(frozen=True)
class AnalysisConfig:
    eval_videos: int = 64
    sample_videos: int = 32
    bank_videos: int = 24
    bank_frames: int = 6


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/exp"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelKnobs = field(default_factory=ModelKnobs)
    edm: EdmParams = field(default_factory=EdmParams)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec("mixed", 1.0))
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(steps=24))
    training: TrainingConfig = field(default_factory=TrainingConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)


# (config key, section attribute, field name, type) in canonical output order
_SECTIONS = (
    ("", ExperimentConfig, ("seed", "output_dir")),
    ("dataset", DatasetSpec, None),
    ("model", ModelKnobs, None),
    ("edm", EdmParams, None),
    ("noise", NoiseSpec, None),
    ("sampler", SamplerConfig, None),
    ("training", TrainingConfig, None),
    ("analysis", AnalysisConfig, None),
)


def _schema() -> list[tuple[str, str, str, str]]:
    rows = []
    for prefix, cls, only in _SECTIONS:
        for f in fields(cls):
            if only is not None and f.name not in only:
                continue
            if f.type not in ("int", "float", "str"):
                raise TypeError(f"config field {cls.__name__}.{f.name} has unsupported type {f.type}")
            key = f"{prefix}.{f.name}" if prefix else f.name
            rows.append((key, prefix, f.name, f.type))
    return rows


_SCHEMA = _schema()


def _parse_value(key: str, type_name: str, token: str, line_no: int):
    if type_name == "str":
        return token
    try:
        if type_name == "int":
            return int(token)
        return float(token)
    except ValueError:
        raise ParseError(f"{key} expects {type_name}, got {token!r}", line=line_no) from None


def parse_config(text: str) -> ExperimentConfig:
    known = {key: (prefix, name, t) for key, prefix, name, t in _SCHEMA}
    raw: dict[str, object] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ParseError(f"expected 'key = value', got {stripped!r}", line=line_no)
        key, _, token = stripped.partition("=")
        key, token = key.strip(), token.strip()
        if key not in known:
            raise ParseError(f"unknown config key {key!r}", line=line_no)
        prefix, name, type_name = known[key]
        raw[key] = _parse_value(key, type_name, token, line_no)

    cfg = ExperimentConfig()
    for prefix, cls, only in _SECTIONS:
        updates = {}
        for f in fields(cls):
            if only is not None and f.name not in only:
                continue
            key = f"{prefix}.{f.name}" if prefix else f.name
            if key in raw:
                updates[f.name] = raw[key]
        if not updates:
            continue
        if prefix:
            cfg = replace(cfg, **{prefix: replace(getattr(cfg, prefix), **updates)})
        else:
            cfg = replace(cfg, **updates)
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)  # exact round-trip, including 'inf'
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key, prefix, name, _ in _SCHEMA:
        holder = getattr(cfg, prefix) if prefix else cfg
        lines.append(f"{key} = {_format_value(getattr(holder, name))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """Identity of everything that determines outputs; output_dir names
    where results land, not what they are, so it is excluded."""
    text = "".join(
        line + "\n"
        for line in serialize_config(cfg).splitlines()
        if not line.startswith("output_dir =")
    )
    return hashlib.sha256(text.encode()).hexdigest()[:16]
