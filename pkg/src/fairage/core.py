"""Shared domain types, configuration, randomness, and image/age primitives.

Conventions used across the package:

- images are ``torch.Tensor`` in channel-first layout, ``(3, H, W)`` or
  ``(B, 3, H, W)``; normalized images live in ``[-1, 1]``
- style codes are ``(18, 512)`` matrices, one row per generator layer
- target ages are integer years in ``[10, 80]`` during training
"""

import dataclasses
import hashlib
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import torch

STYLE_ROWS = 18
STYLE_DIM = 512
IMAGE_SIZE = 256
AGE_LIMIT = 120.0
TRAIN_AGE_LOW = 10
TRAIN_AGE_HIGH = 80
ENV_PREFIX = "FAIRAGE_"


class FairageError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(FairageError):
    """An input value violates a documented contract."""


class ShapeError(ValidationError):
    """A tensor has the wrong rank, channel count, or spatial size."""


class AgeRangeError(ValidationError):
    """An age value or age range is out of bounds."""


class ConfigError(FairageError):
    """Configuration file, checkpoint, or wiring problem."""


class IntegrityError(FairageError):
    """A dataset or metadata consistency check failed."""


class RaceLabel(IntEnum):
    """Race categories with their stable integer encoding.

    This enum is the single place the encoding is defined; everything else
    (confusion matrices, manifests, classifier heads) uses these values.
    """

    INDIAN = 0
    WHITE = 1
    ASIAN = 2
    BLACK = 3


@dataclass(frozen=True)
class LossWeights:
    """Weights of the five training loss terms."""

    l2: float = 0.25
    identity: float = 0.1
    w_norm: float = 0.005
    aging: float = 5.0
    race: float = 3.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and v == v and v != float("inf")):
                raise ValidationError(f"loss weight {f.name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam hyper-parameters for one training phase."""

    learning_rate: float
    beta1: float
    beta2: float
    weight_decay: float

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValidationError(f"betas must lie in (0, 1), got ({self.beta1}, {self.beta2})")
        if self.weight_decay < 0:
            raise ValidationError(f"weight decay must be >= 0, got {self.weight_decay}")


# The two named presets: a slow one for the plain forward phase and a faster,
# weight-decayed one for the cycle-reconstruction phase.
FORWARD_OPTIMIZER = OptimizerConfig(1e-7, 0.9, 0.99, 0.0)
RECONSTRUCTION_OPTIMIZER = OptimizerConfig(5e-5, 0.5, 0.99, 1e-5)

_TUPLE_KEYS = {"race_taps", "head_split"}
_BOOL_KEYS = {"unfreeze_generator", "stratify_age"}


@dataclass
class Config:
    """Flat run configuration.

    Every field has an embedded default; a ``key = value`` text file and
    ``FAIRAGE_*`` environment variables override it (env wins).
    """

    seed: int = 0
    image_size: int = 256
    batch_size: int = 4
    age_low: int = TRAIN_AGE_LOW
    age_high: int = TRAIN_AGE_HIGH
    # "per-image" resamples the target age for every image, "per-batch" once per batch
    age_resample: str = "per-image"
    # "dual" steps the forward and cycle phases with their own optimizers,
    # "single" accumulates both phases into one reconstruction-preset optimizer
    optimizer_mode: str = "dual"
    checkpoint_every: int = 100
    lambda_l2: float = 0.25
    lambda_id: float = 0.1
    lambda_w_norm: float = 0.005
    lambda_aging: float = 5.0
    lambda_race: float = 3.0
    forward_lr: float = 1e-7
    forward_beta1: float = 0.9
    forward_beta2: float = 0.99
    forward_weight_decay: float = 0.0
    recon_lr: float = 5e-5
    recon_beta1: float = 0.5
    recon_beta2: float = 0.99
    recon_weight_decay: float = 1e-5
    race_taps: tuple = (7, 13, 15)
    head_split: tuple = (3, 4, 11)
    toy_seed: int = 17
    noise_seed: int = 0
    unfreeze_generator: bool = False
    stratify_age: bool = False

    def __post_init__(self):
        if self.image_size != IMAGE_SIZE:
            raise ConfigError(f"only image_size={IMAGE_SIZE} is supported, got {self.image_size}")
        if self.age_resample not in ("per-image", "per-batch"):
            raise ConfigError(f"age_resample must be per-image or per-batch, got {self.age_resample!r}")
        if self.optimizer_mode not in ("dual", "single"):
            raise ConfigError(f"optimizer_mode must be dual or single, got {self.optimizer_mode!r}")
        if len(self.head_split) != 3 or sum(self.head_split) != STYLE_ROWS:
            raise ConfigError(f"head_split must be three counts summing to {STYLE_ROWS}, got {self.head_split}")
        if len(self.race_taps) != 3:
            raise ConfigError(f"race_taps must name three blocks, got {self.race_taps}")
        if not (0 < self.age_low <= self.age_high <= AGE_LIMIT):
            raise ConfigError(f"invalid training age range [{self.age_low}, {self.age_high}]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_l2, self.lambda_id, self.lambda_w_norm,
                           self.lambda_aging, self.lambda_race)

    @property
    def forward_optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.forward_lr, self.forward_beta1,
                               self.forward_beta2, self.forward_weight_decay)

    @property
    def reconstruction_optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(self.recon_lr, self.recon_beta1,
                               self.recon_beta2, self.recon_weight_decay)

    @classmethod
    def load(cls, path=None, env=None) -> "Config":
        """Build a config from defaults, an optional file, and env overrides."""
        values = {}
        if path is not None:
            values.update(cls._parse_file(Path(path)))
        if env is not None:
            names = {f.name for f in dataclasses.fields(cls)}
            for key, raw in sorted(env.items()):
                if key.startswith(ENV_PREFIX):
                    name = key[len(ENV_PREFIX):].lower()
                    if name in names:
                        values[name] = raw
        typed = {k: cls._coerce(k, v) for k, v in values.items()}
        try:
            return cls(**typed)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @staticmethod
    def _parse_file(path: Path) -> dict:
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values = {}
        names = {f.name for f in dataclasses.fields(Config)}
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in names:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = raw.strip()
        return values

    @staticmethod
    def _coerce(key: str, raw):
        if not isinstance(raw, str):
            return raw
        try:
            if key in _TUPLE_KEYS:
                return tuple(int(part) for part in raw.split(",") if part.strip())
            if key in _BOOL_KEYS:
                lowered = raw.lower()
                if lowered in ("1", "true", "yes", "on"):
                    return True
                if lowered in ("0", "false", "no", "off"):
                    return False
                raise ValueError(f"not a boolean: {raw!r}")
            if key in ("age_resample", "optimizer_mode"):
                return raw
            if "." in raw or "e" in raw.lower():
                return float(raw)
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc

    def to_text(self) -> str:
        """Canonical serialization: sorted ``key = value`` lines."""
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(e) for e in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def validate_age(years, allow_zero: bool = False) -> float:
    """Check an age in years against the global bounds and return it as float."""
    years = float(years)
    floor_ok = years >= 0.0 if allow_zero else years > 0.0
    if not (floor_ok and years <= AGE_LIMIT) or years != years:
        low = "[0" if allow_zero else "(0"
        raise AgeRangeError(f"age must lie in {low}, {AGE_LIMIT}] years, got {years}")
    return years


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def derive_seed(*parts) -> int:
    """Stable sub-seed derivation so resumed runs replay the same randomness."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def sample_target_age(generator: torch.Generator, lo: int = TRAIN_AGE_LOW,
                      hi: int = TRAIN_AGE_HIGH) -> int:
    """Draw a target age uniformly from the closed integer range ``[lo, hi]``."""
    lo_f, hi_f = validate_age(lo), validate_age(hi)
    if lo_f > hi_f:
        raise AgeRangeError(f"empty age range: lo={lo} > hi={hi}")
    return int(torch.randint(int(lo), int(hi) + 1, (1,), generator=generator).item())


def _as_float_tensor(value, name: str) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    try:
        return torch.as_tensor(value, dtype=torch.get_default_dtype())
    except Exception as exc:
        raise ValidationError(f"{name} is not tensor-like: {exc}") from exc


def validate_image(x: torch.Tensor, channels: int = 3, name: str = "image") -> torch.Tensor:
    """Check channel-first layout and channel count; returns the input."""
    if x.dim() not in (3, 4):
        raise ShapeError(f"{name} must be (C,H,W) or (B,C,H,W), got shape {tuple(x.shape)}")
    c = x.shape[-3]
    if c != channels:
        raise ShapeError(f"{name} must have {channels} channels, got {c}")
    return x


def normalize_image(raw) -> torch.Tensor:
    """Map an 8-bit-range image (values in [0, 255]) onto [-1, 1].

    The exact inverse is :func:`denormalize_image`.
    """
    raw = _as_float_tensor(raw, "raw image").float()
    validate_image(raw, channels=3, name="raw image")
    lo, hi = raw.min().item(), raw.max().item()
    if lo < 0.0 or hi > 255.0:
        raise ValidationError(f"raw image values must lie in [0, 255], got [{lo}, {hi}]")
    return raw / 127.5 - 1.0


def denormalize_image(img: torch.Tensor) -> torch.Tensor:
    """Exact inverse of :func:`normalize_image`."""
    return (img + 1.0) * 127.5


def append_age_channel(x: torch.Tensor, age) -> torch.Tensor:
    """Attach a constant ``age / 100`` plane as a fourth channel.

    ``age`` may be a scalar, or a length-B sequence for batched input. The
    input is never mutated; RGB channels are carried over untouched.
    """
    x = _as_float_tensor(x, "image")
    if x.dim() in (3, 4) and x.shape[-3] == 4:
        raise ValidationError("image already carries an age channel")
    validate_image(x, channels=3)
    batched = x.dim() == 4
    xs = x if batched else x.unsqueeze(0)
    b, _, h, w = xs.shape
    if isinstance(age, (list, tuple)) or (isinstance(age, torch.Tensor) and age.dim() > 0):
        ages = [validate_age(a, allow_zero=True) for a in age]
        if len(ages) != b:
            raise ValidationError(f"got {len(ages)} ages for a batch of {b}")
    else:
        ages = [validate_age(age, allow_zero=True)] * b
    plane = torch.tensor(ages, dtype=xs.dtype).view(b, 1, 1, 1).expand(b, 1, h, w) / 100.0
    out = torch.cat([xs, plane.to(xs.dtype)], dim=1)
    return out if batched else out.squeeze(0)


def validate_style_codes(s: torch.Tensor, name: str = "style codes") -> torch.Tensor:
    """Check an ``(18, 512)`` or ``(B, 18, 512)`` style-code matrix."""
    if s.dim() == 2:
        shape = tuple(s.shape)
    elif s.dim() == 3:
        shape = tuple(s.shape[1:])
    else:
        raise ShapeError(f"{name} must be (18,512) or (B,18,512), got {tuple(s.shape)}")
    if shape != (STYLE_ROWS, STYLE_DIM):
        raise ShapeError(f"{name} must be {STYLE_ROWS}x{STYLE_DIM}, got {shape}")
    if not torch.isfinite(s).all():
        raise ValidationError(f"{name} contain non-finite values")
    return s
