"""
Vector features (isolines, depth curves, channel centerlines, point sets)
and their rasterization onto node-registered grids.

Feature files hold one feature per line::

    TYPE=isoline;ID=lake1;LEVEL=12.5;T=2014-05-06;x1 y1,x2 y2,...
    TYPE=depth_curve;DEPTH=3;LEVEL=-10;x1 y1,x2 y2,...
    TYPE=channel;SECTION=4,12,2;x1 y1,x2 y2,...
    TYPE=points;x1 y1 z1,x2 y2 z2,...

The last ``;``-separated field is the vertex list; the others are
``KEY=value`` attributes. Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .grid import ElevationGrid

FEATURE_KINDS = ("isoline", "depth_curve", "channel", "points")


class FeatureParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class ChannelSection:
    """Trapezoidal channel cross-section."""

    bed_width: float
    top_width: float
    depth_below_bank: float

    def __post_init__(self):
        if not (self.bed_width > 0):
            raise ValueError(f"bed_width must be > 0, got {self.bed_width}")
        if self.top_width < self.bed_width:
            raise ValueError(
                f"top_width ({self.top_width}) must be >= bed_width ({self.bed_width})"
            )
        if not (self.depth_below_bank > 0):
            raise ValueError(f"depth_below_bank must be > 0, got {self.depth_below_bank}")


@dataclass
class VectorFeature:
    kind: str
    vertices: np.ndarray
    level: Optional[float] = None
    depth: Optional[float] = None
    section: Optional[ChannelSection] = None
    timestamp: Optional[datetime] = None
    feature_id: Optional[str] = None
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature type {self.kind!r}")
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] not in (2, 3):
            raise ValueError(f"vertices must be an (n, 2) or (n, 3) array, got shape {v.shape}")
        self.vertices = v

    @property
    def xy(self) -> np.ndarray:
        return self.vertices[:, :2]

    @property
    def is_closed(self) -> bool:
        return len(self.vertices) > 2 and np.array_equal(self.xy[0], self.xy[-1])

    def to_line(self) -> str:
        parts = [f"TYPE={self.kind}"]
        if self.feature_id is not None:
            parts.append(f"ID={self.feature_id}")
        if self.level is not None:
            parts.append(f"LEVEL={self.level!r}")
        if self.depth is not None:
            parts.append(f"DEPTH={self.depth!r}")
        if self.section is not None:
            s = self.section
            parts.append(f"SECTION={s.bed_width!r},{s.top_width!r},{s.depth_below_bank!r}")
        if self.timestamp is not None:
            parts.append(f"T={self.timestamp.isoformat()}")
        parts.append(",".join(" ".join(repr(float(c)) for c in row) for row in self.vertices))
        return ";".join(parts)


def _float(value: str, key: str, lineno: int) -> float:
    try:
        out = float(value)
    except ValueError:
        raise FeatureParseError(f"{key} is not a number: {value!r}", lineno) from None
    if not math.isfinite(out):
        raise FeatureParseError(f"{key} must be finite", lineno)
    return out


def parse_feature_line(text: str, lineno: int = 1) -> VectorFeature:
    fields = [f.strip() for f in text.strip().split(";")]
    if len(fields) < 2:
        raise FeatureParseError("expected attributes followed by a vertex list", lineno)
    attrs = {}
    for f in fields[:-1]:
        if "=" not in f:
            raise FeatureParseError(f"attribute without '=': {f!r}", lineno)
        k, v = f.split("=", 1)
        attrs[k.strip().upper()] = v.strip()

    kind = attrs.pop("TYPE", None)
    if kind is None:
        raise FeatureParseError("missing TYPE", lineno)
    if kind not in FEATURE_KINDS:
        raise FeatureParseError(f"unknown TYPE {kind!r}", lineno)

    width = 3 if kind == "points" else 2
    verts = []
    for chunk in fields[-1].split(","):
        nums = chunk.split()
        if len(nums) != width:
            raise FeatureParseError(
                f"vertex {chunk.strip()!r} must have {width} coordinates", lineno
            )
        verts.append([_float(n, "coordinate", lineno) for n in nums])

    feat = dict(kind=kind, vertices=np.array(verts), feature_id=attrs.pop("ID", None))
    if "LEVEL" in attrs:
        feat["level"] = _float(attrs.pop("LEVEL"), "LEVEL", lineno)
    if "DEPTH" in attrs:
        feat["depth"] = _float(attrs.pop("DEPTH"), "DEPTH", lineno)
    if "SECTION" in attrs:
        raw = attrs.pop("SECTION").split(",")
        if len(raw) != 3:
            raise FeatureParseError("SECTION must be bed_width,top_width,depth", lineno)
        try:
            feat["section"] = ChannelSection(*(_float(r, "SECTION", lineno) for r in raw))
        except ValueError as exc:
            raise FeatureParseError(str(exc), lineno) from None
    if "T" in attrs:
        try:
            feat["timestamp"] = datetime.fromisoformat(attrs.pop("T"))
        except ValueError as exc:
            raise FeatureParseError(f"bad timestamp: {exc}", lineno) from None
    feat["attrs"] = attrs
    return VectorFeature(**feat)


def read_features(path: Union[str, Path]) -> list[VectorFeature]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            feat = parse_feature_line(text, lineno)
            if feat.feature_id is None:
                feat.feature_id = f"{Path(path).stem}:{lineno}"
            out.append(feat)
    return out


def write_features(features: Iterable[VectorFeature], path: Union[str, Path]) -> None:
    Path(path).write_text("".join(f.to_line() + "\n" for f in features))


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

_TIE = 1e-12


def _segment_cells(u0: float, v0: float, u1: float, v1: float) -> list[tuple[int, int]]:
    """Cells crossed by a segment in cell-index space (cell k spans [k, k+1)).

    Amanatides-Woo traversal; when the segment passes exactly through a
    cell corner both indices advance together, so cells touched only at a
    corner are not reported.
    """
    i, j = math.floor(u0), math.floor(v0)
    du, dv = u1 - u0, v1 - v0
    step_i = 1 if du > 0 else -1
    step_j = 1 if dv > 0 else -1
    if du > 0:
        tmax_i, tdelta_i = (i + 1 - u0) / du, 1.0 / du
    elif du < 0:
        tmax_i, tdelta_i = (u0 - i) / -du, -1.0 / du
    else:
        tmax_i, tdelta_i = math.inf, math.inf
    if dv > 0:
        tmax_j, tdelta_j = (j + 1 - v0) / dv, 1.0 / dv
    elif dv < 0:
        tmax_j, tdelta_j = (v0 - j) / -dv, -1.0 / dv
    else:
        tmax_j, tdelta_j = math.inf, math.inf

    cells = [(i, j)]
    while True:
        t = min(tmax_i, tmax_j)
        if t >= 1.0 - _TIE:
            break
        if abs(tmax_i - tmax_j) <= _TIE:
            i += step_i
            j += step_j
            tmax_i += tdelta_i
            tmax_j += tdelta_j
        elif tmax_i < tmax_j:
            i += step_i
            tmax_i += tdelta_i
        else:
            j += step_j
            tmax_j += tdelta_j
        cells.append((i, j))
    return cells


def rasterize_polyline(grid: ElevationGrid, xy) -> list[tuple[int, int]]:
    """Nodes whose cells are crossed by the polyline, in path order.

    Each node owns the dx-by-dx square centred on it. Every crossed cell is
    listed once, at its first visit; cells outside the grid are dropped.
    """
    xy = np.asarray(xy, dtype=np.float64)[:, :2]
    u = (xy[:, 0] - grid.x0) / grid.dx + 0.5
    v = (xy[:, 1] - grid.y0) / grid.dx + 0.5
    seen = set()
    out = []

    def add(cell):
        i, j = cell
        if 0 <= i < grid.n_cols and 0 <= j < grid.n_rows and cell not in seen:
            seen.add(cell)
            out.append(cell)

    if len(xy) == 1:
        add((math.floor(u[0]), math.floor(v[0])))
    for k in range(len(xy) - 1):
        for cell in _segment_cells(u[k], v[k], u[k + 1], v[k + 1]):
            add(cell)
    return out


def densify(xy, spacing: float) -> np.ndarray:
    """Resample a polyline so consecutive points are at most ``spacing`` apart.

    Original vertices are kept.
    """
    xy = np.asarray(xy, dtype=np.float64)[:, :2]
    pts = [xy[0]]
    for a, b in zip(xy[:-1], xy[1:]):
        n = max(1, int(math.ceil(np.hypot(*(b - a)) / spacing)))
        for k in range(1, n):
            pts.append(a + (b - a) * (k / n))
        pts.append(b)
    return np.array(pts)
