"""Model configuration and the flat key=value config-file format."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Bad configuration values or malformed config files."""


@dataclass
class ModelConfig:
    """Every knob of the pipeline; defaults are the desk-scale operating point.

    ``eta``/``gamma`` weight the adjacency regularizer, ``lam`` trades it off
    against the tagging loss, ``layers`` is the graph-convolution depth.
    """

    d_model: int = 64
    d_hidden: int = 64
    blocks: int = 2
    heads: int = 4
    conv_channels: tuple[int, int] = (16, 32)
    lstm_layers: int = 1
    layers: int = 1
    eta: float = 1.0
    gamma: float = 0.4
    lam: float = 0.01
    dropout: float = 0.1
    lr: float = 1e-4
    batch_size: int = 1
    epochs: int = 10
    seed: int = 0
    precision: str = "f64"
    pooling: str = "mean"
    ablate_image: bool = False
    ablate_graph_learning: bool = False
    relearn_adjacency: bool = False

    def validate(self) -> None:
        if self.d_model < 2:
            raise ConfigError("d_model must be >= 2")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        if self.d_hidden < 1 or self.blocks < 1 or self.lstm_layers < 1:
            raise ConfigError("d_hidden, blocks, and lstm_layers must be >= 1")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.eta < 0 or self.gamma < 0 or self.lam < 0:
            raise ConfigError("eta, gamma, and lam must be >= 0")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if self.pooling not in ("mean", "max"):
            raise ConfigError("pooling must be mean or max")
        if len(self.conv_channels) != 2 or any(c < 1 for c in self.conv_channels):
            raise ConfigError("conv_channels must be two positive integers")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(raw)
        if "conv_channels" in values:
            values["conv_channels"] = tuple(int(c) for c in values["conv_channels"])
        cfg = cls(**values)
        cfg.validate()
        return cfg


def _parse_value(name: str, text: str, target_type):
    text = text.strip()
    if target_type is bool:
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    if target_type is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {text!r}") from None
    if target_type is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {text!r}") from None
    if name == "conv_channels":
        try:
            return tuple(int(p) for p in text.replace("(", "").replace(")", "").split(","))
        except ValueError:
            raise ConfigError(f"{name}: expected comma-separated integers, got {text!r}") from None
    return text


_FIELD_TYPES = {
    "d_model": int,
    "d_hidden": int,
    "blocks": int,
    "heads": int,
    "conv_channels": tuple,
    "lstm_layers": int,
    "layers": int,
    "eta": float,
    "gamma": float,
    "lam": float,
    "dropout": float,
    "lr": float,
    "batch_size": int,
    "epochs": int,
    "seed": int,
    "precision": str,
    "pooling": str,
    "ablate_image": bool,
    "ablate_graph_learning": bool,
    "relearn_adjacency": bool,
}


def parse_config_file(path: str | Path) -> dict:
    """Parse ``key = value`` lines; unknown keys are rejected."""
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, value, _FIELD_TYPES[key])
    return values


def build_config(
    file_path: str | Path | None = None,
    overrides: dict | None = None,
    env_precision: str | None = None,
) -> ModelConfig:
    """Config file values overridden by explicit flags, then validated."""
    values: dict = {}
    if env_precision:
        values["precision"] = env_precision
    if file_path is not None:
        values.update(parse_config_file(file_path))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, str(val), _FIELD_TYPES[key]) if isinstance(val, str) else val
    cfg = ModelConfig(**{k: (tuple(v) if k == "conv_channels" else v) for k, v in values.items()})
    cfg.validate()
    return cfg
