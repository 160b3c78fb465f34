"""
Sparse elevation sources turned into fixed-height node constraints, and the
explicit diffusion relaxation that spreads them over the grid.

The relaxation sweep is the five-point Jacobi update

    b[n,m] <- b[n,m] + alpha*(b[n+1,m] - 2 b[n,m] + b[n-1,m])
                     + alpha*(b[n,m+1] - 2 b[n,m] + b[n,m-1])

applied to free nodes, while constrained nodes are held at their prescribed
heights. Out-of-grid neighbours mirror the edge node (zero-flux edges).
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage

from .features import ChannelSection, VectorFeature, rasterize_polyline
from .grid import ElevationGrid

LOG = logging.getLogger(__name__)

ALPHA_MAX = 0.25
DEFAULT_CONFLICT_TOLERANCE = 0.05

__all__ = [
    "ChannelSection",
    "Conflict",
    "ConflictReport",
    "Constraint",
    "ConstraintSet",
    "RelaxResult",
    "SolverParams",
    "Source",
    "buffer_region",
    "burn_channel",
    "check_constraint_consistency",
    "constraints_from_depth_curve",
    "constraints_from_feature",
    "constraints_from_isoline",
    "constraints_from_points",
    "relax",
]


class Source(str, Enum):
    SOUNDING = "sounding"
    DEPTH_CURVE = "depth_curve"
    COASTLINE = "coastline"
    CHANNEL = "channel"
    GEODETIC_PROFILE = "geodetic_profile"
    CORRECTION = "correction"


@dataclass(frozen=True)
class Constraint:
    i: int
    j: int
    value: float
    source: Source
    timestamp: Optional[datetime] = None
    feature_id: Optional[str] = None
    # an upper bound ("no higher than value") instead of a height
    upper_bound: bool = False

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"constraint value must be finite, got {self.value}")

    @property
    def cell(self) -> tuple[int, int]:
        return (self.i, self.j)


@dataclass(frozen=True)
class Conflict:
    i: int
    j: int
    spread: float
    values: tuple[float, ...]


@dataclass
class ConflictReport:
    entries: list[Conflict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def empty(self) -> bool:
        return not self.entries

    def lines(self) -> list[str]:
        return [f"conflict {c.i} {c.j} spread {c.spread:.6f}" for c in self.entries]


@dataclass
class ConstraintSet:
    """The fixed-height node set with per-constraint provenance.

    ``rejected`` collects report lines for inputs that could not be placed
    (e.g. points outside the grid).
    """

    constraints: list[Constraint] = field(default_factory=list)
    conflict_tolerance: float = DEFAULT_CONFLICT_TOLERANCE
    rejected: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.constraints)

    def __iter__(self):
        return iter(self.constraints)

    def merge(self, *others: "ConstraintSet") -> "ConstraintSet":
        out = ConstraintSet(list(self.constraints), self.conflict_tolerance, list(self.rejected))
        for o in others:
            out.constraints.extend(o.constraints)
            out.rejected.extend(o.rejected)
        return out

    def by_cell(self) -> dict[tuple[int, int], list[Constraint]]:
        cells = defaultdict(list)
        for c in self.constraints:
            cells[c.cell].append(c)
        return dict(cells)

    def pinned(self, precedence: str = "last") -> dict[tuple[int, int], float]:
        """Resolve to one height per node.

        Upper bounds go first: heights above the lowest bound on a node are
        discarded, and a node left with no height is pinned at the bound.
        Remaining values that agree within the conflict tolerance are
        averaged. Conflicting nodes take the last (or first) constraint.
        """
        if precedence not in ("last", "first"):
            raise ValueError(f"precedence must be 'last' or 'first', got {precedence!r}")
        out = {}
        for cell, group in self.by_cell().items():
            vals = [c.value for c in group if not c.upper_bound]
            caps = [c.value for c in group if c.upper_bound]
            if caps:
                cap = min(caps)
                vals = [v for v in vals if v <= cap]
                if not vals:
                    out[cell] = cap
                    continue
            if max(vals) - min(vals) <= self.conflict_tolerance:
                out[cell] = math.fsum(vals) / len(vals)
            else:
                out[cell] = vals[-1] if precedence == "last" else vals[0]
        return out

    def masks(self, shape, precedence: str = "last") -> tuple[np.ndarray, np.ndarray]:
        """Boolean pin mask and pinned-value array for a grid of ``shape``."""
        mask = np.zeros(shape, dtype=bool)
        vals = np.zeros(shape)
        for (i, j), v in self.pinned(precedence).items():
            if not (0 <= j < shape[0] and 0 <= i < shape[1]):
                raise IndexError(f"constraint node ({i}, {j}) outside grid of shape {shape}")
            mask[j, i] = True
            vals[j, i] = v
        return mask, vals

    def apply(self, grid: ElevationGrid, precedence: str = "last") -> ElevationGrid:
        """Write the pinned heights into a copy of ``grid``."""
        mask, vals = self.masks(grid.shape, precedence)
        out = grid.copy_values()
        out[mask] = vals[mask]
        return grid.with_values(out)


def check_constraint_consistency(cset: ConstraintSet) -> ConflictReport:
    """List nodes whose constraints disagree by more than the tolerance."""
    report = ConflictReport()
    for (i, j), group in cset.by_cell().items():
        vals = tuple(c.value for c in group if not c.upper_bound)
        if not vals:
            continue
        spread = max(vals) - min(vals)
        if spread > cset.conflict_tolerance:
            report.entries.append(Conflict(i, j, spread, vals))
    return report


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def constraints_from_points(
    points,
    grid: ElevationGrid,
    source: Source = Source.SOUNDING,
    conflict_tolerance: float = DEFAULT_CONFLICT_TOLERANCE,
    feature_id: Optional[str] = None,
    timestamp: Optional[datetime] = None,
) -> ConstraintSet:
    """Snap ``(x, y, height)`` points to their nearest nodes.

    Points sharing a node are merged into their mean when they agree within
    ``conflict_tolerance``; otherwise all of them are kept so the conflict
    shows up in :func:`check_constraint_consistency`.
    """
    out = ConstraintSet(conflict_tolerance=conflict_tolerance)
    grouped: dict[tuple[int, int], list[float]] = {}
    for x, y, h in np.asarray(points, dtype=np.float64).reshape(-1, 3):
        if not grid.contains(x, y):
            out.rejected.append(f"point ({x}, {y}) outside grid extent")
            continue
        grouped.setdefault(grid.nearest_node(x, y), []).append(float(h))
    for (i, j), vals in grouped.items():
        if max(vals) - min(vals) <= conflict_tolerance:
            vals = [math.fsum(vals) / len(vals)]
        for v in vals:
            out.constraints.append(Constraint(i, j, v, source, timestamp, feature_id))
    return out


def _line_constraints(line: VectorFeature, grid, value, source) -> ConstraintSet:
    if len(line.vertices) < 2:
        raise ValueError("polyline needs at least 2 vertices")
    cells = rasterize_polyline(grid, line.xy)
    return ConstraintSet(
        [Constraint(i, j, value, source, line.timestamp, line.feature_id) for i, j in cells]
    )


def constraints_from_isoline(line: VectorFeature, grid: ElevationGrid) -> ConstraintSet:
    """Every node whose cell the coastline crosses is pinned at the water level."""
    if line.level is None or not math.isfinite(line.level):
        raise ValueError(f"isoline {line.feature_id!r} has no water-level mark")
    return _line_constraints(line, grid, float(line.level), Source.COASTLINE)


def constraints_from_depth_curve(
    curve: VectorFeature, water_surface: float, grid: ElevationGrid
) -> ConstraintSet:
    """Depth contour pinned at bed elevation ``water_surface - depth``."""
    if curve.depth is None or not curve.depth > 0:
        raise ValueError(f"depth curve {curve.feature_id!r} needs a positive depth, got {curve.depth}")
    return _line_constraints(curve, grid, float(water_surface) - curve.depth, Source.DEPTH_CURVE)


def _nearest_on_polyline(px, py, xy):
    """Distance, foot point and unit normal of the nearest polyline segment."""
    best = (np.inf, None, None)
    for a, b in zip(xy[:-1], xy[1:]):
        d = b - a
        L2 = float(d @ d)
        if L2 == 0.0:
            continue
        t = min(1.0, max(0.0, ((px - a[0]) * d[0] + (py - a[1]) * d[1]) / L2))
        foot = a + t * d
        dist = math.hypot(px - foot[0], py - foot[1])
        if dist < best[0]:
            n = np.array([-d[1], d[0]]) / math.sqrt(L2)
            best = (dist, foot, n)
    return best


def burn_channel(
    grid: ElevationGrid, centerline: VectorFeature, section: Optional[ChannelSection] = None
) -> ConstraintSet:
    """Trapezoidal channel constraints along a centerline.

    A node at distance ``d`` from the centerline gets the bed height
    ``bank - depth`` for ``d <= bed_width/2``, rising linearly to ``bank``
    at ``d = top_width/2``. ``bank`` is the pre-burn height at the grid node
    nearest to the channel edge point on the node's own side; nodes on the
    centerline use the lower of the two banks.
    """
    section = section or centerline.section
    if section is None:
        raise ValueError("channel section missing")
    ChannelSection(section.bed_width, section.top_width, section.depth_below_bank)
    xy = centerline.xy
    if len(xy) < 2:
        raise ValueError("centerline needs at least 2 vertices")
    for x, y in xy:
        if not grid.contains(x, y):
            raise ValueError(f"centerline vertex ({x}, {y}) outside grid extent")

    half_top = section.top_width / 2.0
    half_bed = section.bed_width / 2.0
    depth = section.depth_below_bank
    vals = grid.values

    def bank_at(point) -> float:
        i, j = grid.nearest_node(
            min(max(point[0], grid.x0), grid.x_max), min(max(point[1], grid.y0), grid.y_max)
        )
        return float(vals[j, i])

    lo = xy.min(axis=0) - half_top
    hi = xy.max(axis=0) + half_top
    i_lo = max(0, int(math.floor((lo[0] - grid.x0) / grid.dx)))
    i_hi = min(grid.n_cols - 1, int(math.ceil((hi[0] - grid.x0) / grid.dx)))
    j_lo = max(0, int(math.floor((lo[1] - grid.y0) / grid.dx)))
    j_hi = min(grid.n_rows - 1, int(math.ceil((hi[1] - grid.y0) / grid.dx)))

    out = ConstraintSet()
    eps = 1e-9 * grid.dx
    for j in range(j_lo, j_hi + 1):
        py = grid.y0 + j * grid.dx
        for i in range(i_lo, i_hi + 1):
            px = grid.x0 + i * grid.dx
            dist, foot, normal = _nearest_on_polyline(px, py, xy)
            if dist > half_top + eps:
                continue
            if dist <= eps:
                bank = min(bank_at(foot + half_top * normal), bank_at(foot - half_top * normal))
            else:
                side = np.array([px, py]) - foot
                sgn = 1.0 if side @ normal >= 0 else -1.0
                bank = bank_at(foot + sgn * half_top * normal)
            if dist <= half_bed + eps:
                bed = bank - depth
            else:
                bed = bank - depth * (half_top - dist) / (half_top - half_bed)
            if math.isfinite(bed):
                out.constraints.append(
                    Constraint(i, j, bed, Source.CHANNEL, centerline.timestamp, centerline.feature_id)
                )
    return out


def constraints_from_feature(
    feature: VectorFeature,
    grid: ElevationGrid,
    water_surface: Optional[float] = None,
    conflict_tolerance: float = DEFAULT_CONFLICT_TOLERANCE,
) -> ConstraintSet:
    """Dispatch on feature type.

    For depth curves the water surface is the feature's ``LEVEL`` when
    present, else ``water_surface``.
    """
    if feature.kind == "isoline":
        return constraints_from_isoline(feature, grid)
    if feature.kind == "depth_curve":
        surface = feature.level if feature.level is not None else water_surface
        if surface is None:
            raise ValueError(f"depth curve {feature.feature_id!r} has no water surface")
        return constraints_from_depth_curve(feature, surface, grid)
    if feature.kind == "channel":
        return burn_channel(grid, feature)
    return constraints_from_points(
        feature.vertices,
        grid,
        conflict_tolerance=conflict_tolerance,
        feature_id=feature.feature_id,
        timestamp=feature.timestamp,
    )


# ---------------------------------------------------------------------------
# Relaxation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverParams:
    alpha: float = 0.25
    tol: float = 1e-4
    max_iter: int = 100_000

    def validate(self) -> None:
        if not (0.0 < self.alpha <= ALPHA_MAX):
            raise ValueError(f"alpha must lie in (0, {ALPHA_MAX}], got {self.alpha}")
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class RelaxResult:
    grid: ElevationGrid
    iterations: int
    final_residual: float
    converged: bool
    updates: list[float]

    def __iter__(self):
        return iter((self.grid, self.iterations, self.final_residual))


# sweeps over which the contraction rate is measured for the stopping test
RATE_WINDOW = 10


def _laplace(b: np.ndarray, pad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Second differences along x and y with mirrored (zero-flux) edges."""
    pad[1:-1, 1:-1] = b
    pad[0, 1:-1] = b[0]
    pad[-1, 1:-1] = b[-1]
    pad[1:-1, 0] = b[:, 0]
    pad[1:-1, -1] = b[:, -1]
    c = pad[1:-1, 1:-1]
    d_x = pad[1:-1, 2:] - 2.0 * c + pad[1:-1, :-2]
    d_y = pad[2:, 1:-1] - 2.0 * c + pad[:-2, 1:-1]
    return d_x, d_y


def buffer_region(shape, cells: Iterable[tuple[int, int]], buffer_cells: int) -> np.ndarray:
    """Nodes within ``buffer_cells`` (Chebyshev) of any listed ``(i, j)`` node."""
    mask = np.zeros(shape, dtype=bool)
    for i, j in cells:
        mask[j, i] = True
    if buffer_cells > 0 and mask.any():
        mask = ndimage.binary_dilation(mask, np.ones((3, 3), bool), iterations=buffer_cells)
    return mask


def relax(
    grid: ElevationGrid,
    constraints: ConstraintSet,
    params: SolverParams = SolverParams(),
    region: Optional[np.ndarray] = None,
    precedence: str = "last",
) -> RelaxResult:
    """Relax ``grid`` around the constraint set by explicit diffusion sweeps.

    The input grid is the initial guess. ``region`` optionally restricts the
    free nodes; nodes outside it keep their input heights. Nodata nodes
    start from the mean of the valid heights and are filled in.

    Iteration stops once the largest free-node update is below ``tol`` and
    the remaining error extrapolated from the observed contraction rate over
    the last few sweeps is below ``tol`` as well (the update alone
    underestimates the distance to the fixed point by ``1/(1 - rate)``).
    ``final_residual`` is the largest five-point Laplacian over free nodes,
    in metres.
    """
    params.validate()
    pin_mask, pin_vals = constraints.masks(grid.shape, precedence)

    b = grid.copy_values()
    holes = np.isnan(b)
    if holes.any():
        fill = np.nanmean(b) if (~holes).any() else (pin_vals[pin_mask].mean() if pin_mask.any() else 0.0)
        b[holes] = fill
    b[pin_mask] = pin_vals[pin_mask]

    free = ~pin_mask
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if region.shape != grid.shape:
            raise ValueError(f"region shape {region.shape} != grid shape {grid.shape}")
        free &= region | holes

    pad = np.empty((b.shape[0] + 2, b.shape[1] + 2))
    alpha = params.alpha
    updates: list[float] = []
    converged = False
    it = 0

    if not free.any():
        it = 1
        converged = True
    while not converged and it < params.max_iter:
        d_x, d_y = _laplace(b, pad)
        step = alpha * d_x + alpha * d_y
        step[~free] = 0.0
        b += step
        it += 1
        u = float(np.abs(step).max())
        updates.append(u)
        if u == 0.0:
            converged = True
        elif u < params.tol and len(updates) > RATE_WINDOW:
            prev = updates[-1 - RATE_WINDOW]
            rate = (u / prev) ** (1.0 / RATE_WINDOW)
            if rate < 1.0 and u * rate / (1.0 - rate) < params.tol:
                converged = True

    d_x, d_y = _laplace(b, pad)
    lap = np.abs(d_x + d_y)
    residual = float(lap[free].max()) if free.any() else 0.0
    if not converged:
        LOG.warning(
            "relax: not converged after %d sweeps (last update %.3g m, residual %.3g m)",
            it, updates[-1] if updates else 0.0, residual,
        )
    return RelaxResult(grid.with_values(b), it, residual, converged, updates)
