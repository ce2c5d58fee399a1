"""Per-output standardization of the 4 performance labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import LABEL_NAMES, DataError, LabeledDomain


@dataclass(frozen=True)
class LabelScaler:
    mean: tuple[float, float, float, float]
    std: tuple[float, float, float, float]

    def apply(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - np.asarray(self.mean)) / np.asarray(self.std)

    def invert(self, y_scaled) -> np.ndarray:
        return np.asarray(y_scaled, dtype=np.float64) * np.asarray(self.std) + np.asarray(self.mean)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelScaler":
        return cls(tuple(float(v) for v in d["mean"]), tuple(float(v) for v in d["std"]))


def fit_label_scaler(sources: list[LabeledDomain]) -> LabelScaler:
    """Zero mean, unit (population) variance per output over the pooled source labels."""
    pooled = np.concatenate([d.labels for d in sources], axis=0)
    mean = pooled.mean(axis=0)
    std = pooled.std(axis=0)
    for name, s in zip(LABEL_NAMES, std):
        if not s > 0:
            raise DataError(f"pooled source labels have zero variance in output {name!r}")
    return LabelScaler(tuple(float(v) for v in mean), tuple(float(v) for v in std))
