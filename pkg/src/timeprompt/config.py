"""Experiment configuration: defaults, TOML loading, dotted overrides.

One config file drives everything; every field has a default, and CLI
flags mirror the keys with dotted names (``--train.epochs 3``). The
resolved spec is echoed verbatim into each run's manifest, which is itself
valid TOML and can be fed back as a config file.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str = ""
    dataset_name: str = "synthetic"
    split: list[float] = field(default_factory=lambda: [0.7, 0.1, 0.2])
    lookback: int = 96
    horizon: int = 96
    window_stride: int = 1
    few_shot_fraction: float = 1.0
    few_shot_random: bool = False
    forward_fill: bool = False


@dataclass
class PromptConfig:
    pool_size: int = 100
    soft_len: int = 5
    top_k: int = 5
    hard_len: int = 5
    lag_count: int = 5
    key_surrogate_weight: float = 0.01
    dump_hard_prompts: bool = False


@dataclass
class FusionConfig:
    patch_len: int = 16
    stride: int = 8
    heads: int = 4


@dataclass
class ModelConfig:
    layers: int = 2
    dim: int = 64
    heads: int = 4
    ffn_mult: int = 4
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1
    head_local_dim: int = 32


@dataclass
class TrainSettings:
    lr_max: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    patience: int = 3
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div: float = 1e4
    clip_norm: float = 1.0


@dataclass
class EvalConfig:
    denormalize: bool = False


@dataclass
class AblationConfig:
    no_sp: bool = False
    no_hp: bool = False
    no_cma: bool = False
    no_lora: bool = False

    def tag(self) -> str:
        on = [name for name in ("no_sp", "no_hp", "no_cma", "no_lora")
              if getattr(self, name)]
        return "full" if not on else "+".join(on)


@dataclass
class SynthConfig:
    rows: int = 2000
    variables: int = 2
    amplitude: float = 1.0
    period: float = 24.0
    trend: float = 5e-4
    noise: float = 0.1
    seed: int = 7
    start: str = "2024-01-01 00:00:00"
    out: str = "synthetic.csv"


@dataclass
class ExperimentSpec:
    data: DataConfig = field(default_factory=DataConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblationConfig = field(default_factory=AblationConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    horizons: list[int] = field(default_factory=lambda: [96])
    seeds: list[int] = field(default_factory=lambda: [2021, 2023, 2025])
    out_dir: str = "runs"
    run_id: str = ""


_SECTIONS = {f.name: f.type for f in fields(ExperimentSpec)}


def _coerce(value, target, key: str):
    """Coerce a TOML/CLI value onto the type of the dataclass default."""
    if isinstance(target, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
        raise ConfigError(f"{key}: expected boolean, got {value!r}")
    if isinstance(target, int) and not isinstance(target, bool):
        try:
            as_float = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected integer, got {value!r}") from None
        if as_float != int(as_float):
            raise ConfigError(f"{key}: expected integer, got {value!r}")
        return int(as_float)
    if isinstance(target, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected number, got {value!r}") from None
    if isinstance(target, list):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v != ""]
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected list, got {value!r}")
        elem = target[0] if target else 0
        return [_coerce(v, elem, key) for v in value]
    if isinstance(target, str):
        return str(value)
    raise ConfigError(f"{key}: unsupported config type {type(target)}")


def set_dotted(spec: ExperimentSpec, key: str, value) -> None:
    """Apply one dotted override like ('train.epochs', 3) with type coercion."""
    parts = key.split(".")
    if len(parts) == 1:
        if not hasattr(spec, key) or key in _SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(spec, key, _coerce(value, getattr(spec, key), key))
        return
    if len(parts) != 2 or parts[0] not in _SECTIONS:
        raise ConfigError(f"unknown config key {key!r}")
    section = getattr(spec, parts[0])
    if not hasattr(section, parts[1]):
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(section, parts[1])
    setattr(section, parts[1], _coerce(value, current, key))


def load_spec(path=None, overrides: dict | None = None) -> ExperimentSpec:
    """Build a spec from defaults, an optional TOML file and dotted overrides."""
    spec = ExperimentSpec()
    if path is not None:
        with open(path, "rb") as fh:
            try:
                doc = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        for section, content in doc.items():
            if section == "run":
                continue  # manifest metadata, not configuration
            if isinstance(content, dict):
                for key, value in content.items():
                    set_dotted(spec, f"{section}.{key}", value)
            else:
                set_dotted(spec, section, content)
    for key, value in (overrides or {}).items():
        set_dotted(spec, key, value)
    return spec


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    escaped = str(value).replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def dump_spec(spec: ExperimentSpec, extra: dict | None = None) -> str:
    """Render the resolved spec (plus optional [run] metadata) as TOML text."""
    doc = asdict(spec)
    lines: list[str] = []
    for key in ("horizons", "seeds", "out_dir", "run_id"):
        lines.append(f"{key} = {_toml_value(doc.pop(key))}")
    for section, content in doc.items():
        lines.append("")
        lines.append(f"[{section}]")
        for key, value in content.items():
            lines.append(f"{key} = {_toml_value(value)}")
    if extra:
        lines.append("")
        lines.append("[run]")
        for key, value in extra.items():
            lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"
