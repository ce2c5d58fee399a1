"""Analytic stand-in for the wheel impact analysis.

The oracle reads only the voxel grid and the barrier mass. It locates the
spoke nearest the loaded sector (+y), finds its thinnest radial slice inside
the spoke band, and reports that slice's centroid (mm) as the stress location.
The stress magnitude is

    vm = KAPPA * mass / sqrt(area) * rim_factor * profile_factor

with ``area`` the thinnest slice cross-section (mm^2) averaged over the spokes, ``rim_factor`` growing as the
rim wall over the load point gets thinner and ``profile_factor`` growing with
the variation of that wall's thickness along the wheel axis (taper or bump).
Both factors are measured on the voxels, so two designs with the same voxels
and mass get the same label whichever domain they come from.
"""

from __future__ import annotations

import functools

import numpy as np
from scipy import ndimage

from .profiles import DomainProfile
from .types import DataError, DesignSample, PerformanceLabel, cell_centers_mm

KAPPA = 42.0
RIM_REF_MM = 60.0
SPOKE_BAND = (0.34, 0.60)  # normalized radius; inside the rim, outside the hub
RIM_MIN_RADIUS = 0.60
PROFILE_GAIN = 1.5  # per normalized unit of wall-thickness range along z
_FULL = np.ones((3, 3, 3), dtype=bool)


@functools.lru_cache(maxsize=8)
def _normalized_axes(resolution: int):
    c = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    return np.meshgrid(c, c, c, indexing="ij")


def pseudo_fea_oracle(sample: DesignSample, profile: DomainProfile | None = None) -> PerformanceLabel:
    """Label one design. Deterministic; raises ``DataError`` when no load path exists.

    ``profile`` names the rim family the design was drawn from. The label does
    not read it: the cross-section profile enters through the voxels only.

    Mirror ties (two spokes equally close to the load axis, or two slices of
    equal area) resolve to the larger x, then to the larger radius.
    """
    occ = np.asarray(sample.voxel.occupancy, dtype=bool)
    if not occ.any():
        raise DataError("empty voxel grid: no load path")
    R = occ.shape[0]
    cell = sample.voxel.cell_size_mm
    x, y, z = _normalized_axes(R)
    rho = np.hypot(x, y)

    band = occ & (rho >= SPOKE_BAND[0]) & (rho < SPOKE_BAND[1])
    comps, n = ndimage.label(band, structure=_FULL)
    if n == 0:
        raise DataError("no spoke crosses the load band: no load path")

    idx = np.arange(1, n + 1)
    cx = ndimage.mean(x, comps, idx)
    cy = ndimage.mean(y, comps, idx)
    angle = np.abs(np.arctan2(cx, cy))
    # nearest to +y; ties -> larger x
    order = np.lexsort((-np.round(cx, 9), np.round(angle, 9)))
    spoke = comps == idx[order[0]]

    step = 2.0 / R
    bins = np.floor((rho - SPOKE_BAND[0]) / step).astype(np.int64)
    thin, _ = _thinnest_slice(bins[spoke])
    cluster = spoke & (bins == thin)

    centers = cell_centers_mm(R, cell)
    ii, jj, kk = np.nonzero(cluster)
    loc = (centers[ii].mean(), centers[jj].mean(), centers[kk].mean())
    # effective load-path section: thinnest slice averaged over all spokes,
    # which removes the rasterization noise of any single spoke
    min_cells = [_thinnest_slice(bins[comps == k])[1] for k in idx]
    area_mm2 = float(np.mean(min_cells)) * cell * cell

    wall = _rim_wall_at_load(occ, x, y, rho)
    if wall.size == 0:
        # no rim wall over the load point; treat as a single-cell wall
        wall = np.ones(1)
    rim_factor = np.sqrt(RIM_REF_MM / (wall.mean() * cell))
    profile_factor = 1.0 + PROFILE_GAIN * (wall.max() - wall.min()) * step
    vm = KAPPA * sample.mass_kg / np.sqrt(area_mm2) * rim_factor * profile_factor
    return PerformanceLabel(float(loc[0]), float(loc[1]), float(loc[2]), float(vm))


def _thinnest_slice(spoke_bins: np.ndarray) -> tuple[int, int]:
    """(radial bin, cell count) of the smallest slice; ties go to the outermost bin."""
    present, counts = np.unique(spoke_bins, return_counts=True)
    thin = present[counts == counts.min()].max()
    return int(thin), int(counts.min())


def _rim_wall_at_load(occ, x, y, rho) -> np.ndarray:
    """Radial rim wall thickness (cells) per z layer along the +y axis columns; empty layers dropped."""
    R = occ.shape[0]
    near_axis = np.abs(x[:, 0, 0]) < (1.0 / R + 1e-12)
    rim = occ & (rho >= RIM_MIN_RADIUS) & (y > 0)
    per_layer = rim[near_axis].sum(axis=(0, 1)).astype(np.float64) / near_axis.sum()
    return per_layer[per_layer > 0]
