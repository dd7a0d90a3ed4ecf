import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Type, TypeVar

# Configure logging
logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger("mmtvae")

PRESETS = ("paper", "desk")

T = TypeVar("T")


def _from_mapping(cls: Type[T], data: Dict[str, Any]) -> T:
    """Build a flat config dataclass from a mapping, rejecting unknown keys."""
    known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"Unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class ModelConfig:
    """Architecture of the two-branch VAE."""

    image_size: int = 64
    image_channels: int = 3
    wbt_channels: int = 1
    latent_dim: int = 128

    # Feature widths per residual block
    enc_widths: List[int] = field(default_factory=lambda: [64, 128, 256, 512, 512])
    dec_widths: List[int] = field(default_factory=lambda: [512, 256, 128, 64, 32, 32])

    # WBT branch schedules; None reuses the image schedules
    wbt_enc_widths: Optional[List[int]] = None
    wbt_dec_widths: Optional[List[int]] = None

    # Block internals
    leaky_slope: float = 0.2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.latent_dim < 1:
            raise ValueError(f"latent_dim must be positive, got {self.latent_dim}")
        for name, widths in (
            ("enc_widths", self.enc_widths),
            ("wbt_enc_widths", self.wbt_enc_widths),
        ):
            if widths is None:
                continue
            if not widths or 2 ** (len(widths) + 1) != self.image_size:
                raise ValueError(
                    f"{name} has {len(widths)} blocks; image_size {self.image_size} "
                    f"needs image_size == 2^(blocks + 1)"
                )
        for name, widths in (
            ("dec_widths", self.dec_widths),
            ("wbt_dec_widths", self.wbt_dec_widths),
        ):
            if widths is None:
                continue
            if not widths or 2 ** len(widths) != self.image_size:
                raise ValueError(
                    f"{name} has {len(widths)} blocks; image_size {self.image_size} "
                    f"needs image_size == 2^blocks"
                )

    @property
    def image_enc_widths(self) -> List[int]:
        return list(self.enc_widths)

    @property
    def image_dec_widths(self) -> List[int]:
        return list(self.dec_widths)

    @property
    def wbt_encoder_widths(self) -> List[int]:
        return list(self.wbt_enc_widths or self.enc_widths)

    @property
    def wbt_decoder_widths(self) -> List[int]:
        return list(self.wbt_dec_widths or self.dec_widths)

    @classmethod
    def paper(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def desk(cls) -> "ModelConfig":
        """Small CPU-friendly variant: 32 px inputs and a 16-d latent."""
        return cls(
            image_size=32,
            latent_dim=16,
            enc_widths=[16, 32, 64, 64],
            dec_widths=[64, 32, 16, 16, 16],
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return _from_mapping(cls, data)


@dataclass
class LossWeights:
    """Weighting of the reconstruction and latent terms."""

    latent_weight: float = 0.1
    image_loss: str = "ssim"
    ssim_window: int = 11
    ssim_sigma: float = 1.5

    def __post_init__(self) -> None:
        if self.latent_weight <= 0:
            raise ValueError(f"latent_weight must be > 0, got {self.latent_weight}")
        if self.image_loss not in ("ssim", "bce"):
            raise ValueError(f"image_loss must be 'ssim' or 'bce', got {self.image_loss}")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError(f"ssim_window must be a positive odd size, got {self.ssim_window}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LossWeights":
        return _from_mapping(cls, data)


@dataclass
class TripletConfig:
    """Margin of the squared-Euclidean triplet hinge."""

    margin: float = 0.2

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TripletConfig":
        return _from_mapping(cls, data)


@dataclass
class AugmentConfig:
    """Random erasing on both modalities, flip and rotation on images only."""

    enabled: bool = True

    # Random erasing
    erase_prob: float = 0.5
    erase_area_min: float = 0.02
    erase_area_max: float = 0.33
    erase_aspect_min: float = 0.3
    erase_aspect_max: float = 3.3

    # Image-only geometry
    hflip_prob: float = 0.5
    rotation_deg: float = 20.0

    def __post_init__(self) -> None:
        for name in ("erase_prob", "hflip_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if not 0.0 < self.erase_area_min <= self.erase_area_max <= 1.0:
            raise ValueError("erase area bounds must satisfy 0 < min <= max <= 1")
        if not 0.0 < self.erase_aspect_min <= self.erase_aspect_max:
            raise ValueError("erase aspect bounds must satisfy 0 < min <= max")
        if self.rotation_deg < 0:
            raise ValueError(f"rotation_deg must be >= 0, got {self.rotation_deg}")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(enabled=False, erase_prob=0.0, hflip_prob=0.0, rotation_deg=0.0)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AugmentConfig":
        return _from_mapping(cls, data)


@dataclass
class TrainConfig:
    """Everything a training run depends on, besides the data."""

    preset: str = "paper"
    epochs: int = 5000
    per_class_batch: int = 20
    seed: int = 0

    # Adam
    learning_rate: float = 0.0004
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    # Checkpointing and monitoring
    checkpoint_every: int = 50
    silhouette_every: int = 0

    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.per_class_batch < 1:
            raise ValueError(f"per_class_batch must be >= 1, got {self.per_class_batch}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")

    @classmethod
    def preset_config(cls, name: str) -> "TrainConfig":
        """Return the `paper` (64 px, latent 128, 5000 epochs) or `desk` preset."""
        if name == "paper":
            return cls(preset="paper")
        if name == "desk":
            return cls(
                preset="desk",
                epochs=200,
                model=ModelConfig.desk(),
                loss=LossWeights(ssim_window=7),
            )
        raise ValueError(f"Unknown preset: {name} (expected one of {PRESETS})")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        return cls.preset_config(data.get("preset", "paper")).merged(data)

    def merged(self, overrides: Dict[str, Any]) -> "TrainConfig":
        """Return a copy with `overrides` (nested like `to_dict`) applied on top."""
        base = self.to_dict()
        nested = {
            "model": ModelConfig,
            "loss": LossWeights,
            "triplet": TripletConfig,
            "augment": AugmentConfig,
        }
        scalars = {f.name for f in fields(self)} - set(nested)
        unknown = set(overrides) - scalars - set(nested)
        if unknown:
            raise ValueError(f"Unknown TrainConfig keys: {sorted(unknown)}")

        kwargs: Dict[str, Any] = {}
        for name in scalars:
            kwargs[name] = overrides.get(name, base[name])
        for name, section_cls in nested.items():
            section = dict(base[name])
            section_overrides = overrides.get(name, {})
            if not isinstance(section_overrides, dict):
                raise ValueError(f"Config section '{name}' must be an object")
            unknown_inner = set(section_overrides) - set(section)
            if unknown_inner:
                raise ValueError(f"Unknown {name} keys: {sorted(unknown_inner)}")
            section.update(section_overrides)
            kwargs[name] = section_cls.from_dict(section)  # type: ignore[attr-defined]
        return TrainConfig(**kwargs)


def load_train_config(
    preset: str = "desk", config_path: Optional[str] = None, seed: Optional[int] = None
) -> TrainConfig:
    """
    Resolve the effective training configuration.

    Args:
        preset: Name of the base preset
        config_path: Optional JSON file whose contents override the preset
        seed: Optional seed taking precedence over both

    Returns:
        The merged TrainConfig
    """
    config = TrainConfig.preset_config(preset)
    if config_path is not None:
        path = Path(config_path)
        try:
            with path.open("r") as file:
                overrides = json.load(file)
        except FileNotFoundError:
            logger.error(f"Config file not found: {config_path}")
            raise
        except json.JSONDecodeError:
            logger.error(f"Invalid JSON in config file: {config_path}")
            raise
        if not isinstance(overrides, dict):
            raise ValueError(f"Config file {config_path} must hold a JSON object")
        overrides.pop("preset", None)
        config = config.merged(overrides)
    if seed is not None:
        config = config.merged({"seed": seed})
    return config
