"""Flat key-value pipeline configuration with section-dotted keys.

Files look like::

    seed = 0
    supernet.backbone = conv
    training.epochs = 40
    training.limit_pool = 0.01,0.03,0.05,0.1,0.2,0.5

Unknown keys are rejected. Every CLI run writes the fully resolved
configuration (defaults plus overrides) beside its outputs so any run can
be reproduced from its snapshot.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .search import SearchConfig
from .supernet import SupernetSpec
from .training import TrainingConfig


class ConfigError(ValueError):
    pass


@dataclass
class AssemblerConfig:
    limit_dim: int = 16
    d_sel: int = 128
    num_gaters: int = 4


@dataclass
class ProfilingConfig:
    subnets: int = 500
    warmup: int = 10
    repeats: int = 50
    ratio_min: float = 0.05
    ratio_max: float = 1.0


@dataclass
class PipelineConfig:
    seed: int = 0
    supernet: SupernetSpec = field(default_factory=SupernetSpec)
    assembler: AssemblerConfig = field(default_factory=AssemblerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    profiling: ProfilingConfig = field(default_factory=ProfilingConfig)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def _parse_float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(",") if tok.strip())


# key -> (section, field, parser)
_KEY_TABLE = {
    "seed": (None, "seed", int),
    "supernet.backbone": ("supernet", "backbone", str),
    "supernet.image_size": ("supernet", "image_size", int),
    "supernet.in_channels": ("supernet", "in_channels", int),
    "supernet.num_classes": ("supernet", "num_classes", int),
    "supernet.stem_channels": ("supernet", "stem_channels", int),
    "supernet.block_channels": ("supernet", "block_channels", _parse_int_tuple),
    "supernet.patch_size": ("supernet", "patch_size", int),
    "supernet.d_model": ("supernet", "d_model", int),
    "supernet.d_ff": ("supernet", "d_ff", int),
    "supernet.depth": ("supernet", "depth", int),
    "supernet.heads": ("supernet", "heads", int),
    "assembler.limit_dim": ("assembler", "limit_dim", int),
    "assembler.d_sel": ("assembler", "d_sel", int),
    "assembler.num_gaters": ("assembler", "num_gaters", int),
    "training.epochs": ("training", "epochs", int),
    "training.batch_size": ("training", "batch_size", int),
    "training.optimizer": ("training", "optimizer", str),
    "training.learning_rate": ("training", "learning_rate", float),
    "training.lr_schedule": ("training", "lr_schedule", str),
    "training.gate_loss_weight": ("training", "gate_loss_weight", float),
    "training.limit_pool": ("training", "limit_pool", _parse_float_tuple),
    "training.hold_out": ("training", "hold_out", float),
    "training.tasks_per_step": ("training", "tasks_per_step", int),
    "training.val_fraction": ("training", "val_fraction", float),
    "training.val_limit": ("training", "val_limit", float),
    "search.start_limit": ("search", "start_limit", float),
    "search.step": ("search", "step", float),
    "search.max_limit": ("search", "max_limit", float),
    "search.enforce_limit": ("search", "enforce_limit", _parse_bool),
    "profiling.subnets": ("profiling", "subnets", int),
    "profiling.warmup": ("profiling", "warmup", int),
    "profiling.repeats": ("profiling", "repeats", int),
    "profiling.ratio_min": ("profiling", "ratio_min", float),
    "profiling.ratio_max": ("profiling", "ratio_max", float),
}

_SECTION_TYPES = {
    "supernet": SupernetSpec,
    "assembler": AssemblerConfig,
    "training": TrainingConfig,
    "search": SearchConfig,
    "profiling": ProfilingConfig,
}


def parse_config_text(text: str) -> PipelineConfig:
    overrides: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEY_TABLE:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        _, _, parser = _KEY_TABLE[key]
        try:
            overrides[key] = parser(value)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None

    sections: dict[str, dict] = {name: {} for name in _SECTION_TYPES}
    top: dict[str, object] = {}
    for key, value in overrides.items():
        section, field_name, _ = _KEY_TABLE[key]
        if section is None:
            top[field_name] = value
        else:
            sections[section][field_name] = value
    try:
        config = PipelineConfig(
            seed=int(top.get("seed", 0)),
            **{name: cls(**sections[name]) for name, cls in _SECTION_TYPES.items()},
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    config.training.seed = config.seed  # one global seed drives the pipeline
    return config


def load_config(path: str | Path) -> PipelineConfig:
    return parse_config_text(Path(path).read_text())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def dump_config(config: PipelineConfig) -> str:
    """Flat key = value text covering every key, defaults included."""
    lines = [f"seed = {config.seed}"]
    for section_name, cls in _SECTION_TYPES.items():
        section = getattr(config, section_name)
        for f in fields(cls):
            key = f"{section_name}.{f.name}"
            if key not in _KEY_TABLE:
                continue
            lines.append(f"{key} = {_format_value(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def write_effective_config(config: PipelineConfig, out_dir: str | Path, extras: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = dump_config(config)
    if extras:
        text += "".join(f"run.{key} = {_format_value(value)}\n" for key, value in sorted(extras.items()))
    path = out / "effective-config.txt"
    path.write_text(text)
    return path
