"""JSON run configuration: generator, network specs and training settings.

Schema (every section and key optional; missing values take the defaults)::

    {
      "generator": {"resolution": 16, "num_domains": 5, "samples_per_domain": [200, ...],
                    "mass_range_kg": [498, 558], "seed": 0, "extent_mm": 480.0,
                    "domain_profile_params": null},
      "feature_extractor": {"input_resolution": 16, "conv_channels": [4, 8, 8, 16, 16],
                            "kernel_size": 3, "pool_positions": [0, 1], "latent_dim": 30,
                            "leaky_slope": 0.01},
      "head": {"input_dim": 31, "hidden_dim": 64, "output_dim": 4},
      "train": {"learning_rate": 0.001, "batch_size": 32, "max_epochs": 500, "patience": 25,
                "alpha": 0.5, "beta": 0.5, "val_fraction": 0.2, "seed": 0,
                "perplexity": 30.0, "pre_reduction_dim": 50},
      "workers": 1
    }
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data.profiles import GeneratorConfig
from .networks import FeatureExtractorSpec, HeadSpec
from .trainer import TrainConfig

SECTIONS = ("generator", "feature_extractor", "head", "train", "workers")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    feature_extractor: FeatureExtractorSpec = field(default_factory=FeatureExtractorSpec)
    head: HeadSpec = field(default_factory=HeadSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    workers: int = 1

    def to_dict(self) -> dict:
        return {
            "generator": self.generator.to_dict(),
            "feature_extractor": asdict(self.feature_extractor),
            "head": asdict(self.head),
            "train": self.train.to_dict(),
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            gen = GeneratorConfig.from_dict(d.get("generator", {}))
            gen.validate()
            fe = FeatureExtractorSpec(**d.get("feature_extractor", {}))
            head = HeadSpec(**d.get("head", {}))
            train = TrainConfig.from_dict(d.get("train", {}))
            train.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if fe.input_resolution != gen.resolution:
            raise ConfigError(f"feature_extractor.input_resolution {fe.input_resolution} != generator.resolution {gen.resolution}")
        workers = int(d.get("workers", 1))
        if workers < 1:
            raise ConfigError("workers must be >= 1")
        return cls(gen, fe, head, train, workers)

    def with_seed(self, seed: int) -> "RunConfig":
        d = self.to_dict()
        d["train"]["seed"] = seed
        return RunConfig.from_dict(d)


def load_config(path=None) -> RunConfig:
    """Read a JSON config; ``None`` gives the full defaults."""
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw)
