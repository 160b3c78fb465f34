"""
Quality checks that close the DEM refinement loop.

* ``coastline_spread``: a coastline mapped at one moment is one water level,
  so the DEM heights sampled along it should agree. Their spread measures
  how wrong the DEM is around that line.
* ``compare_masks``: simulated versus observed flood extent, scored by the
  critical success index (CSI).
* ``propose_corrections``: turns both checks into new height constraints.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .assimilate import Constraint, ConstraintSet, Source
from .features import VectorFeature, densify, rasterize_polyline
from .grid import ElevationGrid, sample_bilinear

log = logging.getLogger(__name__)

DEFAULT_SPREAD_TOL = 0.2
DEFAULT_CSI_TARGET = 0.8


@dataclass(frozen=True)
class SpreadEntry:
    feature_id: Optional[str]
    n_samples: int
    min: float
    max: float
    mean: float
    std: float
    feature: Optional[VectorFeature] = field(default=None, repr=False, compare=False)

    @property
    def spread(self) -> float:
        return self.max - self.min

    def line(self) -> str:
        return (
            f"feature {self.feature_id} spread {self.spread:.6f} min {self.min:.6f} "
            f"max {self.max:.6f} mean {self.mean:.6f} std {self.std:.6f} n {self.n_samples}"
        )


@dataclass
class SpreadReport:
    entries: list[SpreadEntry] = field(default_factory=list)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def max_spread(self) -> float:
        return max((e.spread for e in self.entries), default=0.0)

    def exceeding(self, tol: float) -> list[SpreadEntry]:
        return [e for e in self.entries if e.spread > tol]

    def lines(self) -> list[str]:
        return [e.line() for e in self.entries]


@dataclass(frozen=True)
class MaskComparison:
    hits: int
    misses: int
    false_alarms: int
    # observed wet but simulated dry, the cells correction rule (i) works on
    miss_mask: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def csi(self) -> float:
        """hits / (hits + misses + false alarms); 1.0 when both masks are empty."""
        denom = self.hits + self.misses + self.false_alarms
        return self.hits / denom if denom else 1.0

    @property
    def jaccard(self) -> float:
        # |A & B| / |A | B|, the same ratio for binary masks
        union = self.hits + self.misses + self.false_alarms
        return self.hits / union if union else 1.0

    def line(self) -> str:
        return (
            f"csi {self.csi:.6f} hits {self.hits} misses {self.misses} "
            f"false_alarms {self.false_alarms}"
        )


def coastline_spread(grid: ElevationGrid, coastline: VectorFeature) -> SpreadEntry:
    """Height statistics sampled along ``coastline`` at spacing <= dx/2."""
    xy = coastline.xy
    for x, y in xy:
        if not grid.contains(x, y):
            raise ValueError(
                f"coastline {coastline.feature_id}: vertex ({x}, {y}) outside the grid extent"
            )
    pts = densify(xy, grid.dx / 2)
    if grid.n_nodata:
        # samples touching nodata are skipped: validity interpolates to 1 only
        # when every node with nonzero weight is valid
        validity = grid.with_values(grid.valid.astype(float))
        ok = sample_bilinear(validity, pts[:, 0], pts[:, 1]) > 1.0 - 1e-12
        filled = grid.with_values(np.where(grid.valid, grid.values, 0.0))
        z = np.asarray(sample_bilinear(filled, pts[:, 0], pts[:, 1]), dtype=np.float64)[ok]
    else:
        z = np.asarray(sample_bilinear(grid, pts[:, 0], pts[:, 1]), dtype=np.float64)
    if z.size == 0:
        raise ValueError(f"coastline {coastline.feature_id} lies entirely on nodata")
    return SpreadEntry(
        coastline.feature_id,
        int(z.size),
        float(z.min()),
        float(z.max()),
        math.fsum(z) / z.size,
        float(z.std()),
        coastline,
    )


def spread_report(grid: ElevationGrid, coastlines: Iterable[VectorFeature]) -> SpreadReport:
    return SpreadReport([coastline_spread(grid, c) for c in coastlines])


def compare_masks(
    simulated: np.ndarray, observed: np.ndarray, valid: Optional[np.ndarray] = None
) -> MaskComparison:
    sim = np.asarray(simulated, dtype=bool)
    obs = np.asarray(observed, dtype=bool)
    if sim.shape != obs.shape:
        raise ValueError(f"mask shapes differ: simulated {sim.shape}, observed {obs.shape}")
    if valid is None:
        valid = np.ones(sim.shape, dtype=bool)
    elif valid.shape != sim.shape:
        raise ValueError(f"valid mask shape {valid.shape} differs from {sim.shape}")
    miss = obs & ~sim & valid
    return MaskComparison(
        hits=int(np.count_nonzero(sim & obs & valid)),
        misses=int(np.count_nonzero(miss)),
        false_alarms=int(np.count_nonzero(sim & ~obs & valid)),
        miss_mask=miss,
    )


def _neighbour_max(a: np.ndarray, connectivity: int) -> np.ndarray:
    """Max over the 4- or 8-neighbourhood, ignoring NaN (NaN if none finite)."""
    ny, nx = a.shape
    pad = np.full((ny + 2, nx + 2), -np.inf)
    pad[1:-1, 1:-1] = np.where(np.isnan(a), -np.inf, a)
    offsets = [(0, 1), (0, -1), (1, 0), (-1, 0)]
    if connectivity == 8:
        offsets += [(1, 1), (1, -1), (-1, 1), (-1, -1)]
    elif connectivity != 4:
        raise ValueError("connectivity must be 4 or 8")
    out = np.full(a.shape, -np.inf)
    for dj, di in offsets:
        out = np.maximum(out, pad[1 + dj : 1 + dj + ny, 1 + di : 1 + di + nx])
    out[np.isinf(out)] = np.nan
    return out


def propose_corrections(
    grid: ElevationGrid,
    spreads: Optional[SpreadReport],
    comparison: Optional[MaskComparison],
    free_surface: Optional[np.ndarray],
    h_dry: float = 1e-3,
    spread_tol: float = DEFAULT_SPREAD_TOL,
    connectivity: int = 8,
) -> ConstraintSet:
    """New constraints from the verification results.

    (i) A cell observed wet, simulated dry and next to simulated water gets
        an upper bound at the highest adjacent free surface minus ``h_dry``.
        Cells already at or below that height are left alone: terrain is
        never raised by this rule. When resolved, the bound drops earlier
        constraints on the cell that stand above it, so a conflicting datum
        that fits the observation wins; otherwise the cell sits at the bound.
    (ii) Every cell of a coastline whose spread exceeds ``spread_tol`` is set
        to the coastline's water level.

    ``free_surface`` is the simulated water-surface elevation, NaN where dry.
    """
    out: list[Constraint] = []
    if comparison is not None and comparison.miss_mask is not None and free_surface is not None:
        eta = np.asarray(free_surface, dtype=np.float64)
        if eta.shape != grid.shape or comparison.miss_mask.shape != grid.shape:
            raise ValueError("free surface and masks must match the grid")
        target = _neighbour_max(eta, connectivity) - h_dry
        b = grid.values
        with np.errstate(invalid="ignore"):
            lower = comparison.miss_mask & np.isfinite(target) & (b > target)
        for j, i in zip(*np.nonzero(lower)):
            out.append(
                Constraint(int(i), int(j), float(target[j, i]), Source.CORRECTION, upper_bound=True)
            )

    if spreads is not None:
        for entry in spreads.exceeding(spread_tol):
            feat = entry.feature
            if feat is None or feat.level is None:
                log.warning("coastline %s exceeds spread tolerance but has no level", entry.feature_id)
                continue
            for i, j in rasterize_polyline(grid, feat.xy):
                out.append(
                    Constraint(i, j, float(feat.level), Source.CORRECTION, feat.timestamp, feat.feature_id)
                )
    return ConstraintSet(out)


def constraints_to_feature(cset: ConstraintSet, grid: ElevationGrid, feature_id: str = "corrections"):
    """Package constraints as a ``points`` feature (node coordinates and heights)."""
    pinned = cset.pinned()
    if not pinned:
        return None
    verts = [(grid.x(i), grid.y(j), v) for (i, j), v in sorted(pinned.items(), key=lambda kv: kv[0][::-1])]
    return VectorFeature("points", verts, feature_id=feature_id)


def free_surface(bed: ElevationGrid, depth: np.ndarray, h_threshold: float) -> np.ndarray:
    """Water-surface elevation where ``depth >= h_threshold``, NaN elsewhere."""
    return np.where(depth >= h_threshold, bed.values + depth, np.nan)
