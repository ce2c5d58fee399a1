"""Domain data model: voxel designs, performance labels, domains and bundles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import sealing

LABEL_NAMES = ("x_mm", "y_mm", "z_mm", "vm_mpa")
MIN_RESOLUTION = 8


class DataError(ValueError):
    """Invalid data object or configuration."""


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    occupancy: np.ndarray
    cell_size_mm: float

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.ndim != 3 or len(set(occ.shape)) != 1:
            raise DataError(f"occupancy must be a cubic R x R x R array, got shape {occ.shape}")
        if occ.shape[0] < MIN_RESOLUTION:
            raise DataError(f"resolution must be >= {MIN_RESOLUTION}, got {occ.shape[0]}")
        if not np.isin(occ, (0, 1)).all():
            raise DataError("occupancy values must be exactly 0 or 1")
        if not occ.any():
            raise DataError("voxel grid has no occupied cell")
        if not self.cell_size_mm > 0:
            raise DataError("cell_size_mm must be positive")
        object.__setattr__(self, "occupancy", occ.astype(np.uint8, copy=False))

    @property
    def resolution(self) -> int:
        return int(self.occupancy.shape[0])

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.cell_size_mm == other.cell_size_mm and np.array_equal(self.occupancy, other.occupancy)

    def cell_centers_mm(self) -> np.ndarray:
        """1D array of cell-center coordinates (mm) along any axis; origin at grid center."""
        return cell_centers_mm(self.resolution, self.cell_size_mm)

    def bounds_mm(self) -> tuple[float, float]:
        half = 0.5 * self.resolution * self.cell_size_mm
        return -half, half


def cell_centers_mm(resolution: int, cell_size_mm: float) -> np.ndarray:
    return (np.arange(resolution) + 0.5 - resolution / 2.0) * cell_size_mm


@dataclass(frozen=True)
class DesignSample:
    voxel: VoxelGrid
    mass_kg: float


@dataclass(frozen=True)
class PerformanceLabel:
    x_mm: float
    y_mm: float
    z_mm: float
    vm_mpa: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x_mm, self.y_mm, self.z_mm, self.vm_mpa], dtype=np.float64)

    @classmethod
    def from_array(cls, row) -> "PerformanceLabel":
        x, y, z, vm = (float(v) for v in row)
        return cls(x, y, z, vm)


def _check_stack(voxels: np.ndarray, masses: np.ndarray, name: str) -> None:
    if voxels.ndim != 4 or len(set(voxels.shape[1:])) != 1:
        raise DataError(f"{name}: voxels must have shape (N, R, R, R), got {voxels.shape}")
    if masses.shape != (voxels.shape[0],):
        raise DataError(f"{name}: {masses.shape[0]} masses for {voxels.shape[0]} voxel grids")


@dataclass(eq=False)
class LabeledDomain:
    """One domain stored as stacked arrays; ``samples``/``label_list`` give the object view."""

    domain_id: str
    voxels: np.ndarray  # (N, R, R, R) uint8
    masses: np.ndarray  # (N,) kg
    labels: np.ndarray  # (N, 4): x, y, z (mm), vm (MPa)
    cell_size_mm: float

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.uint8)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        _check_stack(self.voxels, self.masses, self.domain_id)
        if len(self.masses) < 1:
            raise DataError(f"domain {self.domain_id!r} is empty")
        if self.labels.shape != (len(self.masses), 4):
            raise DataError(f"domain {self.domain_id!r}: labels must have shape (N, 4), got {self.labels.shape}")

    def __len__(self) -> int:
        return len(self.masses)

    @property
    def resolution(self) -> int:
        return int(self.voxels.shape[1])

    @property
    def samples(self) -> list[DesignSample]:
        return [DesignSample(VoxelGrid(v, self.cell_size_mm), float(m)) for v, m in zip(self.voxels, self.masses)]

    @property
    def label_list(self) -> list[PerformanceLabel]:
        return [PerformanceLabel.from_array(r) for r in self.labels]

    def subset(self, indices) -> "LabeledDomain":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDomain(self.domain_id, self.voxels[idx], self.masses[idx], self.labels[idx], self.cell_size_mm)

    def __eq__(self, other):
        if not isinstance(other, LabeledDomain):
            return NotImplemented
        return (
            self.domain_id == other.domain_id
            and self.cell_size_mm == other.cell_size_mm
            and np.array_equal(self.voxels, other.voxels)
            and np.array_equal(self.masses, other.masses)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(eq=False)
class TargetDomain:
    """Unlabeled target inputs. Labels, if known, live sealed in the bundle."""

    domain_id: str
    voxels: np.ndarray
    masses: np.ndarray
    cell_size_mm: float

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.uint8)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        _check_stack(self.voxels, self.masses, self.domain_id)

    def __len__(self) -> int:
        return len(self.masses)

    @property
    def samples(self) -> list[DesignSample]:
        return [DesignSample(VoxelGrid(v, self.cell_size_mm), float(m)) for v, m in zip(self.voxels, self.masses)]

    def __eq__(self, other):
        if not isinstance(other, TargetDomain):
            return NotImplemented
        return (
            self.domain_id == other.domain_id
            and self.cell_size_mm == other.cell_size_mm
            and np.array_equal(self.voxels, other.voxels)
            and np.array_equal(self.masses, other.masses)
        )


@dataclass(eq=False)
class DatasetBundle:
    """k labeled source domains plus at most one unlabeled target domain.

    A freshly generated benchmark has every domain in ``sources`` and no target;
    ``leave_out`` turns it into one leave-one-domain-out task.
    """

    sources: list[LabeledDomain]
    target: TargetDomain | None = None
    generator_config_digest: str = ""
    _target_labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.sources:
            raise DataError("a bundle needs at least one source domain")
        res = {d.resolution for d in self.sources}
        if self.target is not None:
            res.add(int(self.target.voxels.shape[1]))
        if len(res) != 1:
            raise DataError(f"voxel resolutions differ across the bundle: {sorted(res)}")
        ids = [d.domain_id for d in self.sources] + ([self.target.domain_id] if self.target else [])
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate domain ids: {ids}")
        if self._target_labels is not None:
            self._target_labels = np.asarray(self._target_labels, dtype=np.float64)
            if self.target is None or self._target_labels.shape != (len(self.target), 4):
                raise DataError("target_eval_labels must have one 4-vector per target sample")

    @property
    def resolution(self) -> int:
        return self.sources[0].resolution

    @property
    def cell_size_mm(self) -> float:
        return self.sources[0].cell_size_mm

    @property
    def domain_ids(self) -> list[str]:
        return [d.domain_id for d in self.sources] + ([self.target.domain_id] if self.target else [])

    @property
    def has_target_labels(self) -> bool:
        return self._target_labels is not None

    @property
    def target_eval_labels(self) -> np.ndarray | None:
        """Target labels for evaluation only; reading them inside ``sealing.sealed()`` aborts."""
        sealing.check_access()
        return self._target_labels

    @property
    def target_samples(self) -> list[DesignSample]:
        return self.target.samples if self.target is not None else []

    def domain(self, domain_id: str) -> LabeledDomain:
        for d in self.sources:
            if d.domain_id == domain_id:
                return d
        raise KeyError(domain_id)

    def leave_out(self, target_id: str, keep_labels: bool = True) -> "DatasetBundle":
        """Make ``target_id`` the unlabeled target and the remaining domains the sources."""
        if self.target is not None:
            raise DataError("bundle already has a target domain")
        if target_id not in self.domain_ids:
            raise KeyError(f"unknown domain {target_id!r}; available: {self.domain_ids}")
        held = self.domain(target_id)
        sources = [d for d in self.sources if d.domain_id != target_id]
        target = TargetDomain(held.domain_id, held.voxels, held.masses, held.cell_size_mm)
        return DatasetBundle(sources, target, self.generator_config_digest, held.labels.copy() if keep_labels else None)

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        same_labels = (self._target_labels is None and other._target_labels is None) or (
            self._target_labels is not None
            and other._target_labels is not None
            and np.array_equal(self._target_labels, other._target_labels)
        )
        return (
            self.sources == other.sources
            and self.target == other.target
            and self.generator_config_digest == other.generator_config_digest
            and same_labels
        )


def split_indices(n: int, val_fraction: float, seed: int, key: str = "") -> tuple[np.ndarray, np.ndarray]:
    """Sorted (train, val) index arrays; validation size is ``round(val_fraction * n)``."""
    if not 0.0 < val_fraction < 1.0:
        raise DataError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n_val = int(round(val_fraction * n))
    if n_val < 1 or n_val >= n:
        raise DataError(f"cannot split {n} samples with val_fraction={val_fraction}")
    from ..seeding import rng

    perm = rng(seed, "split", *key.encode("utf-8")).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def split_domain(domain: LabeledDomain, val_fraction: float, seed: int) -> tuple[LabeledDomain, LabeledDomain]:
    """Deterministic, disjoint and exhaustive train/validation split of one domain."""
    train_idx, val_idx = split_indices(len(domain), val_fraction, seed, domain.domain_id)
    return domain.subset(train_idx), domain.subset(val_idx)
