"""
Morphometric fields (slope, profile and tangential curvature) and the two
artifact detectors used when debugging a DEM: isolated height spikes and
sills that break the hydraulic continuity of a channel.

With ``p = b_x**2 + b_y**2`` and ``q = 1 + p``::

    slope = (360 / 2 pi) * arctan(sqrt(p))                      [degrees]
    k_t   = (b_xx b_y**2 - 2 b_xy b_x b_y + b_yy b_x**2) / (p * sqrt(q))
    k_s   = (b_xx b_y**2 + 2 b_xy b_x b_y + b_yy b_x**2) / (p * sqrt(q**3))

Note that both curvatures pair ``b_xx`` with ``b_y**2``; many textbook
profile curvatures pair it with ``b_x**2`` instead. The forms above are kept
as they are.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .features import VectorFeature, rasterize_polyline
from .grid import ElevationGrid, derivatives

FLAT_P = 1e-12


@dataclass(frozen=True)
class MorphoFields:
    slope: np.ndarray
    profile_curv: np.ndarray
    tangential_curv: np.ndarray


@dataclass(frozen=True)
class Spike:
    i: int
    j: int
    magnitude: float


@dataclass(frozen=True)
class BrokenLink:
    """A maximal run of path cells whose bed stands above the stage."""

    channel_id: Optional[str]
    i: int
    j: int
    sill_height: float
    run_start: int
    run_end: int


@dataclass
class ArtifactReport:
    spikes: list[Spike] = field(default_factory=list)
    broken_links: list[BrokenLink] = field(default_factory=list)

    def lines(self) -> list[str]:
        out = [f"spike {s.i} {s.j} {s.magnitude:+.6f}" for s in self.spikes]
        out += [
            f"break {b.channel_id} {b.i} {b.j} sill {b.sill_height:.6f}" for b in self.broken_links
        ]
        return out


def morpho_fields(grid: ElevationGrid) -> MorphoFields:
    d = derivatives(grid)
    p = d.p
    q = d.q
    slope = np.degrees(np.arctan(np.sqrt(p)))
    cross = 2.0 * d.b_xy * d.b_x * d.b_y
    axial = d.b_xx * d.b_y**2 + d.b_yy * d.b_x**2
    flat = p < FLAT_P
    with np.errstate(divide="ignore", invalid="ignore"):
        k_t = (axial - cross) / (p * np.sqrt(q))
        k_s = (axial + cross) / (p * np.sqrt(q**3))
    k_t[flat] = 0.0
    k_s[flat] = 0.0
    return MorphoFields(slope, k_t, k_s)


def _neighbour_stack(b: np.ndarray) -> np.ndarray:
    ny, nx = b.shape
    pad = np.full((ny + 2, nx + 2), np.nan)
    pad[1:-1, 1:-1] = b
    return np.stack(
        [
            pad[1 + dj : 1 + dj + ny, 1 + di : 1 + di + nx]
            for dj in (-1, 0, 1)
            for di in (-1, 0, 1)
            if (di, dj) != (0, 0)
        ]
    )


def detect_spikes(grid: ElevationGrid, threshold: float) -> list[Spike]:
    """Nodes deviating from their 8-neighbour median by more than ``threshold``.

    Edge nodes use the neighbours that exist; nodata neighbours are ignored.
    Magnitude is the signed difference node - median.
    """
    if not threshold > 0:
        raise ValueError(f"threshold must be > 0, got {threshold}")
    b = grid.values
    stack = _neighbour_stack(b)
    has_nb = ~np.all(np.isnan(stack), axis=0)
    med = np.full(b.shape, np.nan)
    med[has_nb] = np.nanmedian(stack[:, has_nb], axis=0)
    diff = b - med
    with np.errstate(invalid="ignore"):
        hit = np.abs(diff) > threshold
    js, is_ = np.nonzero(hit)
    return [Spike(int(i), int(j), float(diff[j, i])) for j, i in zip(js, is_)]


def check_connectivity(
    grid: ElevationGrid, channel_path: VectorFeature, stage
) -> list[BrokenLink]:
    """Walk the rasterized channel and report runs of cells above the stage.

    ``stage`` is a water-surface elevation, either one value or one per
    path cell. Each run is reported at its highest cell (first one on ties).
    """
    cells = rasterize_polyline(grid, channel_path.xy)
    if not cells:
        raise ValueError("channel path is empty or lies outside the grid")
    bed = np.array([grid.values[j, i] for i, j in cells])
    stage_arr = np.broadcast_to(np.asarray(stage, dtype=np.float64), bed.shape)
    blocked = bed > stage_arr

    links = []
    k = 0
    n = len(cells)
    while k < n:
        if not blocked[k]:
            k += 1
            continue
        start = k
        while k < n and blocked[k]:
            k += 1
        top = start + int(np.argmax(bed[start:k]))
        i, j = cells[top]
        links.append(BrokenLink(channel_path.feature_id, i, j, float(bed[top]), start, k - 1))
    return links
