"""Deterministic synthetic multi-domain wheel benchmark.

Every design is an annular rim shell, a hub and N radial spokes. Spoke count,
phase, width, taper and depth are drawn per sample from one distribution shared
by all domains; the rim wall thickness profile along z and the barrier-mass
distribution are what differ between domains.
"""

from __future__ import annotations

import functools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..seeding import rng
from .oracle import pseudo_fea_oracle
from .profiles import DomainProfile, GeneratorConfig
from .types import DatasetBundle, DesignSample, LabeledDomain, VoxelGrid

RHO_OUT = 0.94
RIM_HALF_LENGTH = 0.85
HUB_RADIUS = 0.30
HUB_Z = (-0.35, 0.55)
SPOKE_FACE = 0.55
MIN_SPOKE_HALF_WIDTH = 0.09
RIM_THICKNESS_CLIP = (0.10, 0.33)


@dataclass(frozen=True)
class ShapeParams:
    n_spokes: int
    phase: float
    spoke_half_width: float
    spoke_taper: float
    spoke_depth: float
    rim_thickness: float
    rim_taper: float
    rim_bump: float
    rim_bump_center: float


def sample_shape(gen: np.random.Generator, profile: DomainProfile) -> ShapeParams:
    n = int(gen.integers(4, 7))
    return ShapeParams(
        n_spokes=n,
        phase=float(gen.uniform(0.0, 2.0 * math.pi / n)),
        spoke_half_width=float(gen.uniform(0.09, 0.20)),
        spoke_taper=float(gen.uniform(0.0, 0.5)),
        spoke_depth=float(gen.uniform(0.35, 0.85)),
        rim_thickness=float(profile.rim_thickness * (1.0 + profile.jitter * gen.standard_normal())),
        rim_taper=float(profile.taper + 0.02 * gen.standard_normal()),
        rim_bump=float(max(0.0, profile.bump_amp * (1.0 + 0.2 * gen.standard_normal()))),
        rim_bump_center=profile.bump_center,
    )


@functools.lru_cache(maxsize=8)
def _axes(resolution: int):
    c = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    return x, y, z, np.hypot(x, y)


def voxelize(p: ShapeParams, resolution: int) -> np.ndarray:
    """Occupancy (uint8, R^3) of a wheel; a cell is filled when its center is inside the solid."""
    x, y, z, rho = _axes(resolution)
    wall = p.rim_thickness + p.rim_taper * z + p.rim_bump * np.exp(-(((z - p.rim_bump_center) / 0.35) ** 2))
    wall = np.clip(wall, *RIM_THICKNESS_CLIP)
    occ = (rho <= RHO_OUT) & (rho >= RHO_OUT - wall) & (np.abs(z) <= RIM_HALF_LENGTH)
    occ |= (rho <= HUB_RADIUS) & (z >= HUB_Z[0]) & (z <= HUB_Z[1])
    z_ok = (z <= SPOKE_FACE) & (z >= SPOKE_FACE - p.spoke_depth) & (rho <= RHO_OUT)
    for s in range(p.n_spokes):
        a = p.phase + 2.0 * math.pi * s / p.n_spokes
        along = x * math.sin(a) + y * math.cos(a)
        perp = np.abs(x * math.cos(a) - y * math.sin(a))
        half = np.maximum(p.spoke_half_width * (1.0 - p.spoke_taper * (along - 0.3) / 0.6), MIN_SPOKE_HALF_WIDTH)
        occ |= (along > 0) & (perp <= half) & z_ok
    return occ.astype(np.uint8)


def sample_mass(gen: np.random.Generator, profile: DomainProfile, mass_range) -> float:
    low, high = mass_range
    conc = 8.0
    a, b = profile.mass_center * conc, (1.0 - profile.mass_center) * conc
    return float(low + (high - low) * gen.beta(a, b))


def generate_sample(config: GeneratorConfig, domain_index: int, index: int):
    """Generate one (voxels, mass, label) triple from its own sub-seed."""
    profile = config.domain_profile_params[domain_index]
    gen = rng(config.seed, "data", domain_index, index)
    shape = sample_shape(gen, profile)
    mass = sample_mass(gen, profile, config.mass_range_kg)
    occ = voxelize(shape, config.resolution)
    label = pseudo_fea_oracle(DesignSample(VoxelGrid(occ, config.cell_size_mm), mass), profile)
    return occ, mass, label.as_array()


def _generate_domain(config: GeneratorConfig, domain_index: int) -> LabeledDomain:
    n = config.samples_per_domain[domain_index]
    R = config.resolution
    voxels = np.empty((n, R, R, R), dtype=np.uint8)
    masses = np.empty(n)
    labels = np.empty((n, 4))
    for i in range(n):
        voxels[i], masses[i], labels[i] = generate_sample(config, domain_index, i)
    return LabeledDomain(config.domain_profile_params[domain_index].domain_id, voxels, masses, labels, config.cell_size_mm)


def generate_benchmark(config: GeneratorConfig, workers: int = 1) -> DatasetBundle:
    """Build every domain of the benchmark as a labeled domain (no target yet).

    ``workers > 1`` spreads domains over processes; output is identical to the
    serial run because each sample has its own sub-seed.
    """
    config.validate()
    indices = range(config.num_domains)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            domains = list(pool.map(_generate_domain, [config] * config.num_domains, indices))
    else:
        domains = [_generate_domain(config, d) for d in indices]
    return DatasetBundle(domains, None, config.digest())
