"""Training configuration and its flat ``key = value`` file format."""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-7
    batch_size: int = 16
    epochs: int = 50
    loss: str = "bce"
    seed: int = 0
    metrics_averaging: str = "macro"
    threshold: float = 0.5
    k_folds: int = 5
    backbone: str = "densenet121"
    pretrained: bool = True
    trainable: bool = True
    variant: str = "both"
    cam_reduction: int = 16
    sam_kernel: int = 7
    normalization: str = "imagenet"
    augment: bool = True
    horizontal_flip: bool = True
    rotation_degrees: float = 15.0
    zoom: float = 0.1
    cache_images: bool = True
    deterministic: bool = True
    dataset_name: str = "dataset"

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ConfigurationError(f"only the adam optimizer is supported, got {self.optimizer!r}")
        if self.loss != "bce":
            raise ConfigurationError(f"only the bce loss is supported, got {self.loss!r}")
        if self.metrics_averaging not in ("macro", "positive_class"):
            raise ConfigurationError(
                f"metrics_averaging must be 'macro' or 'positive_class', got {self.metrics_averaging!r}"
            )
        if self.batch_size < 1 or self.epochs < 0 or self.k_folds < 2:
            raise ConfigurationError("batch_size >= 1, epochs >= 0 and k_folds >= 2 are required")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(values: dict) -> str:
    blob = json.dumps(values, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


FIELD_TYPES = {f.name: type(f.default) for f in fields(TrainConfig)}
VALID_KEYS = tuple(FIELD_TYPES)


def _coerce(key: str, raw: str):
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def parse_assignments(lines, source: str = "<overrides>") -> dict:
    values = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{n}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigurationError(
                f"{source}:{n}: unknown config key {key!r}; valid keys: {', '.join(VALID_KEYS)}"
            )
        values[key] = _coerce(key, raw)
    return values


def load_config(path=None, overrides=(), base: TrainConfig | None = None) -> TrainConfig:
    """Resolve a config: ``overrides`` beat the file at ``path``, which beats the defaults."""
    values = {}
    if path is not None:
        path = Path(path)
        values.update(parse_assignments(path.read_text(encoding="utf-8").splitlines(), str(path)))
    values.update(parse_assignments(overrides))
    return (base or TrainConfig()).replace(**values)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
