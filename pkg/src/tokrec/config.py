"""Run configuration: JSON file plus command-line overrides."""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from . import MODALITIES
from .backbones import BACKBONES, MODES
from .errors import ConfigurationError, MissingInputError
from .quantizer import DEFAULT_KMEANS_ITERS, DEFAULT_OUTER_ITERS, MAX_CODEBOOK_SIZE
from .tcn import AGGREGATORS, VARIANTS

logger = logging.getLogger(__name__)

# Token counts searched for each modality.
SLOT_SEARCH_SPACE = (2, 4, 8, 16)
DEFAULT_OUTPUT_DIR = "out"


@dataclass
class PathsConfig:
    """Input and output locations. Relative paths resolve against the config file."""

    interactions: str | None = None
    features: dict[str, str] = field(default_factory=dict)
    output_dir: str = DEFAULT_OUTPUT_DIR

    def to_dict(self) -> dict[str, Any]:
        return {
            "interactions": self.interactions,
            "features": dict(self.features),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PathsConfig":
        return cls(
            interactions=data.get("interactions"),
            features=dict(data.get("features", {})),
            output_dir=data.get("output_dir", DEFAULT_OUTPUT_DIR),
        )

    def resolved(self, base: Path) -> "PathsConfig":
        def fix(p: str | None) -> str | None:
            if p is None or os.path.isabs(p):
                return p
            return str(base / p)

        return PathsConfig(
            interactions=fix(self.interactions),
            features={m: fix(p) for m, p in self.features.items()},
            output_dir=fix(self.output_dir),
        )


@dataclass
class QuantizerConfig:
    """Codebook settings. num_slots is one D for all modalities or a per-modality map."""

    num_slots: int | dict[str, int] = 8
    codebook_size: int = 256
    opq: bool = True
    outer_iters: int = DEFAULT_OUTER_ITERS
    kmeans_iters: int = DEFAULT_KMEANS_ITERS

    def slots_for(self, modality: str) -> int:
        if isinstance(self.num_slots, dict):
            if modality not in self.num_slots:
                raise ConfigurationError(f"quantizer.num_slots has no entry for '{modality}'")
            return int(self.num_slots[modality])
        return int(self.num_slots)

    def validate(self) -> None:
        values = self.num_slots.values() if isinstance(self.num_slots, dict) else [self.num_slots]
        for d in values:
            if int(d) < 1:
                raise ConfigurationError(f"num_slots must be >= 1, got {d}")
            if int(d) not in SLOT_SEARCH_SPACE:
                logger.warning("num_slots=%d is outside the usual search space %s", d,
                               SLOT_SEARCH_SPACE)
        if not 1 <= self.codebook_size <= MAX_CODEBOOK_SIZE:
            raise ConfigurationError(
                f"codebook_size must be in [1, {MAX_CODEBOOK_SIZE}], got {self.codebook_size}"
            )
        if self.outer_iters < 0 or self.kmeans_iters < 0:
            raise ConfigurationError("iteration counts must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_slots": dict(self.num_slots) if isinstance(self.num_slots, dict) else self.num_slots,
            "codebook_size": self.codebook_size,
            "opq": self.opq,
            "outer_iters": self.outer_iters,
            "kmeans_iters": self.kmeans_iters,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "QuantizerConfig":
        return cls(
            num_slots=data.get("num_slots", 8),
            codebook_size=data.get("codebook_size", 256),
            opq=data.get("opq", True),
            outer_iters=data.get("outer_iters", DEFAULT_OUTER_ITERS),
            kmeans_iters=data.get("kmeans_iters", DEFAULT_KMEANS_ITERS),
        )


@dataclass
class ModelConfig:
    """Backbone and item-encoder settings."""

    backbone: str = "bpr_mf"
    mode: str = "id_free"
    tcn_variant: str = "modal_specific"
    aggregator: str = "cross"
    token_modalities: tuple[str, ...] = MODALITIES
    dim: int = 64
    num_layers: int = 2

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"backbone must be one of {BACKBONES}, got '{self.backbone}'")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.tcn_variant not in VARIANTS:
            raise ConfigurationError(f"tcn_variant must be one of {VARIANTS}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigurationError(f"aggregator must be one of {AGGREGATORS}")
        unknown = [m for m in self.token_modalities if m not in MODALITIES]
        if unknown or not self.token_modalities:
            raise ConfigurationError(f"token_modalities must be a non-empty subset of {MODALITIES}")
        if self.dim < 1 or self.num_layers < 0:
            raise ConfigurationError("dim must be >= 1 and num_layers >= 0")

    @property
    def active_modalities(self) -> tuple[str, ...]:
        """Token modalities in canonical order."""
        return tuple(m for m in MODALITIES if m in self.token_modalities)

    def to_dict(self) -> dict[str, Any]:
        return {
            "backbone": self.backbone,
            "mode": self.mode,
            "tcn_variant": self.tcn_variant,
            "aggregator": self.aggregator,
            "token_modalities": list(self.active_modalities),
            "dim": self.dim,
            "num_layers": self.num_layers,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        return cls(
            backbone=data.get("backbone", "bpr_mf"),
            mode=data.get("mode", "id_free"),
            tcn_variant=data.get("tcn_variant", "modal_specific"),
            aggregator=data.get("aggregator", "cross"),
            token_modalities=tuple(data.get("token_modalities", MODALITIES)),
            dim=data.get("dim", 64),
            num_layers=data.get("num_layers", 2),
        )


@dataclass
class TrainConfig:
    """Optimization and early-stopping settings."""

    learning_rate: float = 1e-3
    batch_size: int = 2048
    max_epochs: int = 1000
    patience: int = 20
    l2_coeff: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        # learning_rate 0 is allowed: it freezes parameters for diagnostics.
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 0:
            raise ConfigurationError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.l2_coeff < 0:
            raise ConfigurationError(f"l2_coeff must be >= 0, got {self.l2_coeff}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "l2_coeff": self.l2_coeff,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], seed: int = 0) -> "TrainConfig":
        defaults = cls()
        return cls(
            learning_rate=data.get("learning_rate", defaults.learning_rate),
            batch_size=data.get("batch_size", defaults.batch_size),
            max_epochs=data.get("max_epochs", defaults.max_epochs),
            patience=data.get("patience", defaults.patience),
            l2_coeff=data.get("l2_coeff", defaults.l2_coeff),
            adam_beta1=data.get("adam_beta1", defaults.adam_beta1),
            adam_beta2=data.get("adam_beta2", defaults.adam_beta2),
            adam_eps=data.get("adam_eps", defaults.adam_eps),
            seed=seed,
        )


@dataclass
class RunConfig:
    """Everything a pipeline run depends on."""

    paths: PathsConfig = field(default_factory=PathsConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    threads: int | None = None

    def validate(self) -> None:
        self.quantizer.validate()
        self.model.validate()
        self.train.validate()
        if self.threads is not None and self.threads < 1:
            raise ConfigurationError(f"threads must be >= 1, got {self.threads}")

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir)

    def feature_path(self, modality: str) -> str:
        path = self.paths.features.get(modality)
        if path is None:
            raise MissingInputError(f"paths.features.{modality}", f"{modality} feature file")
        return path

    def with_overrides(
        self,
        seed: int | None = None,
        threads: int | None = None,
        output_dir: str | None = None,
    ) -> "RunConfig":
        """Return a copy where given command-line values replace file values."""
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
        if threads is not None:
            cfg = replace(cfg, threads=threads)
        if output_dir is not None:
            cfg = replace(cfg, paths=replace(cfg.paths, output_dir=output_dir))
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return {
            "paths": self.paths.to_dict(),
            "quantizer": self.quantizer.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        seed = int(data.get("seed", 0))
        return cls(
            paths=PathsConfig.from_dict(data.get("paths", {})),
            quantizer=QuantizerConfig.from_dict(data.get("quantizer", {})),
            model=ModelConfig.from_dict(data.get("model", {})),
            train=TrainConfig.from_dict(data.get("train", {}), seed=seed),
            seed=seed,
            threads=data.get("threads"),
        )


def load_config(path: str | Path | None) -> RunConfig:
    """
    Load a RunConfig from JSON; None gives the defaults.

    Raises:
        MissingInputError: If the file does not exist.
        ConfigurationError: If the JSON is invalid or values are out of range.
    """
    if path is None:
        config = RunConfig()
        config.validate()
        return config
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(str(path), "config file")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a JSON object")
    try:
        config = RunConfig.from_dict(data)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"{path}: {e}") from None
    config = replace(config, paths=config.paths.resolved(path.parent.resolve()))
    config.validate()
    return config
