"""Experiment configuration: one flat TOML file of typed keys.

Every key is listed in ``SCHEMA`` with its type and default. Errors name the
file and the line of the offending key.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import tomli

from ..errors import ValidationError

EXPERIMENTS = ("name_manufacturer", "sphere_classification", "skull_segmentation")
REGIMES = ("mixed", "group_A_only", "group_B_only")
SPLIT_PRESETS = ("fractions", "table1")

# desk-scale training defaults per experiment (learning rate, batch size, loss)
EXPERIMENT_TRAIN_DEFAULTS = {
    "name_manufacturer": {"learning_rate": 5e-3, "batch_size": 32, "loss": "bce"},
    "sphere_classification": {"learning_rate": 3e-3, "batch_size": 16, "loss": "bce"},
    "skull_segmentation": {"learning_rate": 1e-2, "batch_size": 8, "loss": "dice"},
}

EXPERIMENT_ARCH = {
    "name_manufacturer": "shallow_cnn",
    "sphere_classification": "resnet3d",
    "skull_segmentation": "unet3d",
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    seed: int = 0
    tier: Optional[str] = None
    train_regime: str = "mixed"
    runs_per_ensemble: int = 10
    ensemble_k: int = 6
    max_attempts: Optional[int] = None
    decision_threshold: float = 0.5
    # data: either a catalog of NIfTI volumes or phantoms generated on the fly
    catalog: Optional[str] = None
    split_file: Optional[str] = None
    split_preset: str = "fractions"
    quota_file: Optional[str] = None
    phantoms_per_signature: int = 100
    phantom_shape: tuple = (64, 64, 16)
    noise_variance: float = 25.0
    kernel_width: int = 3
    streak_amplitude: float = 3.0
    seg_slices: Optional[int] = None
    # architecture
    arch_scale: str = "desk"
    channels: Optional[tuple] = None
    head_width: Optional[int] = None
    # training
    learning_rate: Optional[float] = None
    batch_size: Optional[int] = None
    max_epochs: int = 100
    patience: int = 10
    convergence_threshold: float = 1e-4
    dice_smooth: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    save_checkpoints: bool = False
    source: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValidationError(f"experiment must be one of {list(EXPERIMENTS)}, got {self.experiment!r}")
        if self.train_regime not in REGIMES:
            raise ValidationError(f"train_regime must be one of {list(REGIMES)}, got {self.train_regime!r}")
        if self.experiment == "sphere_classification":
            if self.tier is None:
                object.__setattr__(self, "tier", "easy")
            if self.tier not in ("easy", "medium", "hard"):
                raise ValidationError(f"tier must be easy, medium or hard, got {self.tier!r}")
        elif self.tier is not None:
            raise ValidationError("tier is only meaningful for sphere_classification")
        if self.experiment == "name_manufacturer" and self.train_regime != "mixed":
            raise ValidationError("name_manufacturer needs both manufacturers in training (train_regime = mixed)")
        if self.runs_per_ensemble < 1 or self.ensemble_k < 1:
            raise ValidationError("runs_per_ensemble and ensemble_k must be >= 1")
        if self.ensemble_k > self.runs_per_ensemble:
            raise ValidationError(
                f"ensemble_k ({self.ensemble_k}) exceeds runs_per_ensemble ({self.runs_per_ensemble})"
            )
        if self.max_attempts is None:
            object.__setattr__(self, "max_attempts", 3 * self.runs_per_ensemble)
        if self.max_attempts < self.runs_per_ensemble:
            raise ValidationError("max_attempts must be >= runs_per_ensemble")
        if self.split_preset not in SPLIT_PRESETS:
            raise ValidationError(f"split_preset must be one of {list(SPLIT_PRESETS)}, got {self.split_preset!r}")
        if self.phantoms_per_signature < 1:
            raise ValidationError("phantoms_per_signature must be >= 1")
        shape = tuple(int(n) for n in self.phantom_shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ValidationError(f"phantom_shape must be three positive ints, got {self.phantom_shape}")
        object.__setattr__(self, "phantom_shape", shape)
        if self.channels is not None:
            object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not 0.0 <= self.decision_threshold <= 1.0:
            raise ValidationError("decision_threshold must lie in [0, 1]")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.noise_variance < 0:
            raise ValidationError("noise_variance must be >= 0")
        if self.kernel_width < 1:
            raise ValidationError("kernel_width must be >= 1")
        if self.seg_slices is not None and self.seg_slices < 1:
            raise ValidationError("seg_slices must be >= 1")
        if self.catalog is None and (self.split_file or self.quota_file) and self.split_preset == "table1":
            raise ValidationError("split_file/quota_file and split_preset = table1 are mutually exclusive")

    @property
    def arch_kind(self) -> str:
        return EXPERIMENT_ARCH[self.experiment]

    def train_value(self, key: str):
        value = getattr(self, key)
        return EXPERIMENT_TRAIN_DEFAULTS[self.experiment][key] if value is None else value

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        """Paths in a config file are relative to that file's directory."""
        if path is None:
            return None
        p = Path(path)
        if not p.is_absolute() and self.source:
            p = Path(self.source).parent / p
        return p


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
PATH_KEYS = ("catalog", "split_file", "quota_file")


def _expect(key: str, value: Any):
    """Coerce a TOML value to the field's type or raise ``ValidationError``."""
    t = _TYPES[key]
    want_float = "float" in t
    want_int = "int" in t and not want_float
    if "tuple" in t:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ValidationError("expected an array of integers")
        return tuple(value)
    if "bool" in t:
        if not isinstance(value, bool):
            raise ValidationError("expected true or false")
        return value
    if want_int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"expected an integer, got {type(value).__name__}")
        return value
    if want_float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"expected a number, got {type(value).__name__}")
        return float(value)
    if not isinstance(value, str):
        raise ValidationError(f"expected a string, got {type(value).__name__}")
    return value


def _key_line(text: str, key: str) -> Optional[int]:
    pat = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for i, line in enumerate(text.splitlines(), start=1):
        if pat.match(line):
            return i
    return None


def config_from_mapping(values: dict, source: Optional[str] = None, text: str = "") -> ExperimentConfig:
    where = source or "<config>"
    kwargs = {}
    for key, value in values.items():
        line = _key_line(text, key)
        loc = f"{where}:{line}" if line else where
        if isinstance(value, dict):
            raise ValidationError(f"{loc}: tables are not allowed; the config is a flat list of keys ([{key}])")
        if key not in _TYPES or key == "source":
            raise ValidationError(f"{loc}: unknown key {key!r}")
        try:
            kwargs[key] = _expect(key, value)
        except ValidationError as exc:
            raise ValidationError(f"{loc}: key {key!r}: {exc}") from None
    if "experiment" not in kwargs:
        raise ValidationError(f"{where}: missing required key 'experiment'")
    try:
        cfg = ExperimentConfig(source=source, **kwargs)
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None
    for key in PATH_KEYS:
        p = cfg.resolve(getattr(cfg, key))
        if p is not None and not p.exists():
            line = _key_line(text, key)
            loc = f"{where}:{line}" if line else where
            raise ValidationError(f"{loc}: key {key!r}: path does not exist: {p}")
    return cfg


def parse_override(item: str) -> tuple[str, Any]:
    """``key=value`` with a TOML-typed value; bare words are taken as strings."""
    if "=" not in item:
        raise ValidationError(f"override {item!r} is not of the form key=value")
    key, raw = (s.strip() for s in item.split("=", 1))
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key, value


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    text = ""
    values: dict = {}
    source = None
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ValidationError(f"{path}: cannot read config: {exc.strerror or exc}") from None
        try:
            values = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    values.update(overrides or {})
    return config_from_mapping(values, source, text)
