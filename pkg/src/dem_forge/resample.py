"""Refinement of a coarse base raster by directional inverse-distance weighting."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import ElevationGrid

LOG = logging.getLogger(__name__)

ZERO_DISTANCE = 1e-9


@dataclass(frozen=True)
class ResampleParams:
    """
    Parameters
    ----------
    target_dx : float
        Output node spacing, metres. Must not exceed the source spacing.
    n_directions : int
        Number of equally spaced ray azimuths. A source node lies on a ray
        when it is ahead of the output node and within half a source step
        of the ray line.
    search_radius : float, optional
        Maximum source-node distance, metres. Defaults to 3 source steps.
    idw_power : float
        Exponent of the inverse-distance weight.
    """

    target_dx: float
    n_directions: int = 16
    search_radius: Optional[float] = None
    idw_power: float = 1.0

    def resolved_radius(self, source_dx: float) -> float:
        return 3.0 * source_dx if self.search_radius is None else float(self.search_radius)

    def validate(self, source_dx: float) -> None:
        if not self.target_dx > 0:
            raise ValueError(f"target_dx must be > 0, got {self.target_dx}")
        if self.target_dx > source_dx * (1 + 1e-12):
            raise ValueError(
                f"target_dx ({self.target_dx}) exceeds source dx ({source_dx}); "
                "downsampling is not supported"
            )
        if self.n_directions < 4 or self.n_directions % 4:
            raise ValueError(f"n_directions must be >= 4 and divisible by 4, got {self.n_directions}")
        if self.resolved_radius(source_dx) < source_dx:
            raise ValueError("search_radius must be at least the source dx")


def refine(source: ElevationGrid, params: ResampleParams) -> ElevationGrid:
    """Resample ``source`` onto a finer node lattice over the same extent.

    Rays are cast from each output node in ``n_directions`` azimuths; along
    each ray the nearest valid source node within the search radius
    contributes with weight ``1 / distance**idw_power``. A source node met by
    several rays contributes once per ray. Output nodes coinciding with a source node
    copy it. Nodes with no contributor become nodata and are counted in a
    warning.
    """
    params.validate(source.dx)
    if int(source.valid.sum()) < 4:
        raise ValueError("source grid needs at least 4 valid nodes")

    sdx, tdx = source.dx, params.target_dx
    radius = params.resolved_radius(sdx)
    n_out_x = int(math.floor((source.n_cols - 1) * sdx / tdx + 1e-9)) + 1
    n_out_y = int(math.floor((source.n_rows - 1) * sdx / tdx + 1e-9)) + 1

    # fine-node positions relative to the origin, in source-index units
    fu = np.arange(n_out_x) * (tdx / sdx)
    fv = np.arange(n_out_y) * (tdx / sdx)
    FU, FV = np.meshgrid(fu, fv)
    snap_u = np.rint(FU)
    snap_v = np.rint(FV)
    FU = np.where(np.abs(FU - snap_u) * sdx < ZERO_DISTANCE, snap_u, FU)
    FV = np.where(np.abs(FV - snap_v) * sdx < ZERO_DISTANCE, snap_v, FV)
    base_i = np.floor(FU).astype(np.int64)
    base_j = np.floor(FV).astype(np.int64)

    n_dir = params.n_directions
    theta = np.arange(n_dir) * (2.0 * math.pi / n_dir)
    ray_x = np.cos(theta)[:, None]
    ray_y = np.sin(theta)[:, None]
    FU, FV, base_i, base_j = (a.ravel() for a in (FU, FV, base_i, base_j))
    n_fine = FU.size
    best_along = np.full((n_dir, n_fine), np.inf)
    best_d = np.full((n_dir, n_fine), np.inf)
    best_v = np.zeros((n_dir, n_fine))
    exact = np.full(n_fine, np.nan)
    half_width = 0.5 * sdx

    src = source.values
    reach = int(math.ceil(radius / sdx)) + 1
    # scan order: row offset outer, column offset inner; strict '<' keeps the first tie
    for dj in range(-reach, reach + 1):
        for di in range(-reach, reach + 1):
            si = base_i + di
            sj = base_j + dj
            inside = (si >= 0) & (si < source.n_cols) & (sj >= 0) & (sj < source.n_rows)
            vals = src[np.clip(sj, 0, source.n_rows - 1), np.clip(si, 0, source.n_cols - 1)]
            ox = (si - FU) * sdx
            oy = (sj - FV) * sdx
            dist = np.hypot(ox, oy)
            ok = inside & ~np.isnan(vals) & (dist <= radius * (1 + 1e-12))
            zero = ok & (dist < ZERO_DISTANCE)
            exact[zero] = vals[zero]

            along = ox * ray_x + oy * ray_y
            perp = np.abs(oy * ray_x - ox * ray_y)
            hit = ok & (along > 0) & (perp <= half_width * (1 + 1e-12)) & (along < best_along)
            best_along = np.where(hit, along, best_along)
            best_d = np.where(hit, dist, best_d)
            best_v = np.where(hit, vals, best_v)

    found = np.isfinite(best_d)
    with np.errstate(divide="ignore"):
        w = np.where(found, 1.0 / np.where(found, best_d, 1.0) ** params.idw_power, 0.0)
    wsum = w.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (w * best_v).sum(axis=0) / wsum
    out = np.where(np.isnan(exact), out, exact)
    out[(wsum == 0) & np.isnan(exact)] = np.nan

    out = out.reshape(n_out_y, n_out_x)
    missing = int(np.isnan(out).sum())
    if missing:
        LOG.warning("refine: %d node(s) had no contributor within %.3f m", missing, radius)
    return ElevationGrid(out, source.x0, source.y0, tdx, source.nodata)
