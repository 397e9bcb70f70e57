"""TOML run configuration, one table per stage.

Every key is declared by a dataclass below; anything else is rejected so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .. import mmdit

CONFIG_DIR = Path(__file__).with_name("configs")


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    name: str = "t1"
    seed: int = 0


@dataclass
class DataSection:
    grid: int = 8
    channels: int = 4
    amplitudes: list = field(default_factory=lambda: [1.0, 2.0])
    jitter: float = 0.05
    txt_len: int = 8
    n_train: int = 240
    n_val: int = 48
    n_calib: int = 100
    n_probe: int = 16
    pooled_spread: float = 0.05
    teacher_enc_dim: int = 32
    student_enc_dim: int = 16


@dataclass
class SamplerSection:
    steps: int = 4
    candidates: list = field(default_factory=lambda: [2, 4, 8])


@dataclass
class TrainSection:
    steps: int = 300
    batch: int = 16
    lr: float = 2e-3
    warmup: int = 50
    grad_clip: float = 1.0


@dataclass
class AnalyzeSection:
    ranks: list = field(default_factory=lambda: [1, 2, 4, 8])
    modes: list = field(default_factory=lambda: ["joint", "per-head"])


@dataclass
class C1Section:
    target_H: int = 4
    gamma: float = 1.0
    teacher: str = "input"
    steps: int = 500
    batch: int = 16
    lr: float = 3e-3
    warmup: int = 20


@dataclass
class C2Section:
    target_dH: int = 6
    gamma: float = 0.0
    teacher: str = "input"
    steps: int = 300
    batch: int = 16
    lr: float = 2e-3
    warmup: int = 20


@dataclass
class C3Section:
    threshold_img: float = 0.85
    threshold_txt: float = 0.9
    max_chain: int = 3
    merge_range: list = field(default_factory=list)
    merge_mode: str = "merge"
    teacher: str = "input"
    steps: int = 300
    batch: int = 16
    lr: float = 2e-3
    warmup: int = 20


@dataclass
class C4Section:
    n_samples: int = 2
    ablation: list = field(default_factory=lambda: [2, 20, 100])
    teacher: str = "input"
    steps: int = 0
    batch: int = 16
    lr: float = 1e-3
    warmup: int = 0


@dataclass
class PtdSection:
    t_thresh: float = 0.5
    blocks: list = field(default_factory=list)
    skip: str = "highpass"
    stage_steps: int = 60
    finetune_steps: int = 60
    batch: int = 16
    lr: float = 1e-3
    warmup: int = 10
    flop_thresholds: list = field(default_factory=lambda: [0.0, 0.2, 0.5, 1.0])


@dataclass
class TextDistillSection:
    warmup_steps: int = 200
    warmup_lr: float = 3e-3
    warmup_batch: int = 32
    steps: int = 60
    lr: float = 1e-3
    batch: int = 8
    cutoff: int = -1
    alphas: list = field(default_factory=list)


@dataclass
class Variant:
    name: str = ""
    H: int = 0
    d_H: int = 0
    n_ds: int = 0
    n_ss: int = 0
    adaln: bool = True


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "sampler": SamplerSection,
    "teacher": TrainSection,
    "analyze": AnalyzeSection,
    "c1": C1Section,
    "c2": C2Section,
    "c3": C3Section,
    "c4": C4Section,
    "ptd": PtdSection,
    "textdistill": TextDistillSection,
}


@dataclass
class RunConfig:
    model: mmdit.ModelConfig = field(default_factory=mmdit.ModelConfig)
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    teacher: TrainSection = field(default_factory=TrainSection)
    analyze: AnalyzeSection = field(default_factory=AnalyzeSection)
    c1: C1Section = field(default_factory=C1Section)
    c2: C2Section = field(default_factory=C2Section)
    c3: C3Section = field(default_factory=C3Section)
    c4: C4Section = field(default_factory=C4Section)
    ptd: PtdSection = field(default_factory=PtdSection)
    textdistill: TextDistillSection = field(default_factory=TextDistillSection)
    variants: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=int(seed)))


def _check_type(section: str, key: str, value, default) -> None:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"[{section}] {key}: expected {type(default).__name__}, got {type(value).__name__}")


def _build(cls, table: dict, section: str):
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    for k, v in table.items():
        _check_type(section, k, v, getattr(defaults, k))
    kw = {k: (float(v) if isinstance(getattr(defaults, k), float) else v) for k, v in table.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def from_dict(raw: dict) -> RunConfig:
    allowed = set(SECTIONS) | {"model", "variants"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")
    kw = {name: _build(cls, raw[name], name) for name, cls in SECTIONS.items() if name in raw}
    if "model" in raw:
        kw["model"] = _build(mmdit.ModelConfig, raw["model"], "model")
    if "variants" in raw:
        if not isinstance(raw["variants"], list):
            raise ConfigError("variants must be an array of tables")
        kw["variants"] = [_build(Variant, v, f"variants.{i}") for i, v in enumerate(raw["variants"])]
    return RunConfig(**kw)


def resolve_path(path) -> Path:
    """A file path, or the name of a shipped config (``t1``, ``flux-schnell.toml``)."""
    p = Path(path)
    if p.exists():
        return p
    name = p.name if p.suffix == ".toml" else p.name + ".toml"
    shipped = CONFIG_DIR / name
    if shipped.exists():
        return shipped
    raise ConfigError(f"config {path} not found")


def load(path) -> RunConfig:
    p = resolve_path(path)
    try:
        raw = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return from_dict(raw)
