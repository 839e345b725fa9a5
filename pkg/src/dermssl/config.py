"""Experiment configuration, JSON round-tripping and stable hashing."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .backbones import BackboneSpec
from .dataset import SplitSpec
from .errors import ConfigError


@dataclass(frozen=True)
class Stage1Config:
    epochs: int = 300
    learning_rate: float = 1e-8
    warmup_epochs: int = 100
    beta_ceiling: float = 1.0
    batch_size: int = 32
    seed: int = 0
    latent_dim: int = 256
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.latent_dim < 1:
            raise ConfigError("stage1 epochs, batch_size and latent_dim must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("stage1 learning_rate must be positive")
        if self.warmup_epochs < 1:
            raise ConfigError("stage1 warmup_epochs must be >= 1")
        if not 0.0 <= self.beta_ceiling <= 1.0:
            raise ConfigError("stage1 beta_ceiling must be in [0, 1]")


@dataclass(frozen=True)
class Stage2Config:
    epochs_frozen: int = 30
    epochs_total: int = 71
    learning_rate: float = 1e-5
    batch_size: int = 32
    seed: int = 0
    focal_gamma: float = 2.0
    # None: inverse class frequency of the training split, normalized to mean 1
    focal_alpha: tuple[float, ...] | None = None
    hidden_dim: int = 256
    dropout_rate: float = 0.5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    warmup_steps: int = 0

    def __post_init__(self):
        if self.focal_alpha is not None:
            object.__setattr__(self, "focal_alpha", tuple(float(a) for a in self.focal_alpha))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not 0 <= self.epochs_frozen < self.epochs_total:
            raise ConfigError("stage2 requires 0 <= epochs_frozen < epochs_total")
        if self.learning_rate <= 0:
            raise ConfigError("stage2 learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("stage2 batch_size must be positive")


@dataclass(frozen=True)
class DataConfig:
    manifests: tuple[str, ...] = ()
    priority_map: str | None = None
    train_fraction: float = 0.8
    split_seed: int = 0
    stratify_by: str = "priority"
    dermatoscopic_only: bool = True
    max_per_patient: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "manifests", tuple(self.manifests))
        try:
            self.split_spec
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.train_fraction, self.split_seed, self.stratify_by)


@dataclass(frozen=True)
class SourceConfig:
    """Where the stage-2 backbone comes from.

    ``kind="vae"`` loads the encoder of a pretraining checkpoint. ``kind="external"``
    loads a backbone checkpoint, or builds one from ``provider``:
    ``"torchvision"`` (ImageNet ConvNeXt-Tiny) or ``"standin"`` (supervised
    pretraining on synthetic out-of-domain images).
    """

    kind: str = "vae"
    checkpoint: str | None = None
    provider: str | None = None

    def __post_init__(self):
        if self.kind not in ("vae", "external"):
            raise ConfigError(f"source kind must be 'vae' or 'external', got {self.kind!r}")
        if self.provider not in (None, "torchvision", "standin"):
            raise ConfigError(f"unknown provider {self.provider!r}")
        if self.kind == "vae" and self.provider is not None:
            raise ConfigError("a vae source takes a checkpoint, not a provider")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    backbone: BackboneSpec = field(default_factory=lambda: BackboneSpec.convnext_tiny(image_size=64))
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    data: DataConfig = field(default_factory=DataConfig)
    source: SourceConfig = field(default_factory=SourceConfig)

    @classmethod
    def desk_scale(cls, image_size: int = 16, **overrides) -> "ExperimentConfig":
        """Small toy-backbone configuration that trains in seconds on a CPU."""
        cfg = cls(
            name="desk",
            backbone=BackboneSpec("toy_cnn", (16, 32, 64), (), "random", image_size),
            stage1=Stage1Config(epochs=30, learning_rate=1e-3, warmup_epochs=10, batch_size=32),
            stage2=Stage2Config(learning_rate=5e-4, batch_size=16),
        )
        return replace(cfg, **overrides)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "backbone": self.backbone.to_dict(),
            "stage1": asdict(self.stage1),
            "stage2": _listify(asdict(self.stage2)),
            "data": _listify(asdict(self.data)),
            "source": asdict(self.source),
        }

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base_dir: str | Path | None = None) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        sections = {
            "backbone": BackboneSpec,
            "stage1": Stage1Config,
            "stage2": Stage2Config,
            "data": DataConfig,
            "source": SourceConfig,
        }
        unknown = set(raw) - set(sections) - {"name"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        # keys present in the file override the defaults section by section
        defaults = cls()
        kwargs: dict[str, Any] = {"name": raw.get("name", defaults.name)}
        for key, klass in sections.items():
            section = raw.get(key, {})
            if not isinstance(section, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            allowed = {f.name for f in fields(klass)}
            bad = set(section) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
            try:
                kwargs[key] = replace(getattr(defaults, key), **section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {key!r} section: {exc}") from exc
        cfg = cls(**kwargs)
        if base_dir is not None:
            cfg = cfg.resolve_paths(base_dir)
        return cfg

    def resolve_paths(self, base_dir: str | Path) -> "ExperimentConfig":
        base = Path(base_dir)

        def fix(p):
            return None if p is None else str(p if Path(p).is_absolute() else base / p)

        data = replace(
            self.data,
            manifests=tuple(fix(m) for m in self.data.manifests),
            priority_map=fix(self.data.priority_map),
        )
        source = replace(self.source, checkpoint=fix(self.source.checkpoint))
        return replace(self, data=data, source=source)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @property
    def config_hash(self) -> str:
        return digest(self.to_dict())

    @property
    def stage2_hash(self) -> str:
        return digest(self.to_dict()["stage2"])

    @property
    def data_hash(self) -> str:
        return digest(self.to_dict()["data"])


def _listify(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def digest(obj: Any) -> str:
    """SHA-256 of the canonical JSON form of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw, base_dir=path.parent)
