"""
Node-registered elevation rasters, finite-difference stencils, bilinear
sampling and ASCII grid I/O.

Storage convention: ``values[j, i] = b(x_i, y_j)`` with ``x_i = x0 + i*dx``
and ``y_j = y0 + j*dx``; row ``j = 0`` is the southernmost row. Files are
written north row first, so the row order flips on I/O. Nodata cells are
held as NaN in memory and mapped to the declared sentinel on disk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

PathLike = Union[str, Path]

DEFAULT_NODATA = -9999.0
HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value")


class GridError(ValueError):
    """Invalid grid geometry or out-of-extent access."""


class GridParseError(ValueError):
    """Malformed ASCII grid file."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class ElevationGrid:
    values: np.ndarray
    x0: float
    y0: float
    dx: float
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise GridError(f"values must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 2 or arr.shape[1] < 2:
            raise GridError(f"grid must be at least 2x2, got {arr.shape[1]}x{arr.shape[0]}")
        if not (self.dx > 0 and math.isfinite(self.dx)):
            raise GridError(f"dx must be positive, got {self.dx}")
        arr[arr == self.nodata] = np.nan
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "x0", float(self.x0))
        object.__setattr__(self, "y0", float(self.y0))
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "nodata", float(self.nodata))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @property
    def n_nodata(self) -> int:
        return int(np.isnan(self.values).sum())

    @property
    def x_max(self) -> float:
        return self.x0 + (self.n_cols - 1) * self.dx

    @property
    def y_max(self) -> float:
        return self.y0 + (self.n_rows - 1) * self.dx

    def x(self, i):
        return self.x0 + np.asarray(i) * self.dx

    def y(self, j):
        return self.y0 + np.asarray(j) * self.dx

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinate arrays ``(X, Y)`` shaped like ``values``."""
        xs = self.x0 + np.arange(self.n_cols) * self.dx
        ys = self.y0 + np.arange(self.n_rows) * self.dx
        return np.meshgrid(xs, ys)

    def contains(self, x: float, y: float, eps: float = 1e-9) -> bool:
        tol = eps * self.dx
        return (
            self.x0 - tol <= x <= self.x_max + tol
            and self.y0 - tol <= y <= self.y_max + tol
        )

    def nearest_node(self, x: float, y: float) -> tuple[int, int]:
        """Return ``(i, j)`` of the node nearest to ``(x, y)``."""
        if not self.contains(x, y, eps=0.5):
            raise GridError(f"point ({x}, {y}) outside grid extent")
        i = int(np.floor((x - self.x0) / self.dx + 0.5))
        j = int(np.floor((y - self.y0) / self.dx + 0.5))
        return min(max(i, 0), self.n_cols - 1), min(max(j, 0), self.n_rows - 1)

    def with_values(self, values: np.ndarray) -> "ElevationGrid":
        return ElevationGrid(values, self.x0, self.y0, self.dx, self.nodata)

    def copy_values(self) -> np.ndarray:
        return np.array(self.values)

    @classmethod
    def from_function(cls, func, n_cols: int, n_rows: int, x0=0.0, y0=0.0, dx=1.0, **kw):
        xs = x0 + np.arange(n_cols) * dx
        ys = y0 + np.arange(n_rows) * dx
        X, Y = np.meshgrid(xs, ys)
        return cls(np.broadcast_to(func(X, Y), X.shape), x0, y0, dx, **kw)


@dataclass(frozen=True)
class DerivativeField:
    b_x: np.ndarray
    b_y: np.ndarray
    b_xx: np.ndarray
    b_yy: np.ndarray
    b_xy: np.ndarray

    @property
    def p(self) -> np.ndarray:
        return self.b_x**2 + self.b_y**2

    @property
    def q(self) -> np.ndarray:
        return 1.0 + self.p


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def read_grid(path: PathLike) -> ElevationGrid:
    """Parse an ASCII grid file.

    ``xllcorner``/``yllcorner`` are taken as the coordinates of the lower-left
    *node* (the grid is node-registered).
    """
    with open(path, "r") as fh:
        lines = fh.read().splitlines()

    header = {}
    for k, key in enumerate(HEADER_KEYS):
        lineno = k + 1
        if k >= len(lines):
            raise GridParseError(f"missing header key {key!r}", lineno)
        parts = lines[k].split()
        if len(parts) != 2 or parts[0] != key:
            raise GridParseError(f"expected '{key} <value>', got {lines[k]!r}", lineno)
        try:
            header[key] = int(parts[1]) if key in ("ncols", "nrows") else float(parts[1])
        except ValueError:
            raise GridParseError(f"bad value for {key}: {parts[1]!r}", lineno) from None

    ncols, nrows = header["ncols"], header["nrows"]
    body = lines[len(HEADER_KEYS):]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != nrows:
        raise GridParseError(
            f"expected {nrows} data rows, found {len(body)}", len(HEADER_KEYS) + len(body) + 1
        )

    data = np.empty((nrows, ncols), dtype=np.float64)
    for r, row in enumerate(body):
        lineno = len(HEADER_KEYS) + r + 1
        parts = row.split()
        if len(parts) != ncols:
            raise GridParseError(f"expected {ncols} values, found {len(parts)}", lineno)
        try:
            data[r] = [float(v) for v in parts]
        except ValueError as exc:
            raise GridParseError(f"non-numeric cell ({exc})", lineno) from None

    try:
        return ElevationGrid(
            data[::-1],
            header["xllcorner"],
            header["yllcorner"],
            header["cellsize"],
            header["NODATA_value"],
        )
    except GridError as exc:
        raise GridParseError(str(exc), 1) from None


def _fmt_header_float(v: float) -> str:
    return repr(float(v))


def format_grid(grid: ElevationGrid) -> str:
    out = [
        f"ncols {grid.n_cols}",
        f"nrows {grid.n_rows}",
        f"xllcorner {_fmt_header_float(grid.x0)}",
        f"yllcorner {_fmt_header_float(grid.y0)}",
        f"cellsize {_fmt_header_float(grid.dx)}",
        f"NODATA_value {_fmt_header_float(grid.nodata)}",
    ]
    nodata_txt = f"{grid.nodata:.6f}"
    for row in grid.values[::-1]:
        cells = [nodata_txt if np.isnan(v) else f"{v:.6f}" for v in row]
        # "-0.000000" would not round-trip textually
        out.append(" ".join("0.000000" if c == "-0.000000" else c for c in cells))
    return "\n".join(out) + "\n"


def write_grid(grid: ElevationGrid, path: PathLike) -> None:
    Path(path).write_text(format_grid(grid))


def write_pgm(array: np.ndarray, path: PathLike) -> None:
    """Write an ASCII P2 graymap preview, min-max scaled to 0..255.

    ``array`` is in grid storage order (south row first); the image is
    written north row first. NaN cells render as 0.
    """
    a = np.asarray(array, dtype=np.float64)[::-1]
    finite = np.isfinite(a)
    scaled = np.zeros(a.shape, dtype=np.int64)
    if finite.any():
        lo, hi = a[finite].min(), a[finite].max()
        if hi > lo:
            scaled[finite] = np.rint((a[finite] - lo) / (hi - lo) * 255).astype(np.int64)
    rows = [" ".join(str(v) for v in row) for row in scaled]
    Path(path).write_text(f"P2\n{a.shape[1]} {a.shape[0]}\n255\n" + "\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# Stencils
# ---------------------------------------------------------------------------


# Edge stencils are written in difference form so constant fields give exact zeros.


def _first(b: np.ndarray, h: float, axis: int) -> np.ndarray:
    a = np.moveaxis(b, axis, 0)
    out = np.empty_like(a)
    out[1:-1] = (a[2:] - a[:-2]) / (2.0 * h)
    out[0] = (4.0 * (a[1] - a[0]) - (a[2] - a[0])) / (2.0 * h)
    out[-1] = -(4.0 * (a[-2] - a[-1]) - (a[-3] - a[-1])) / (2.0 * h)
    return np.moveaxis(out, 0, axis)


def _second(b: np.ndarray, h: float, axis: int) -> np.ndarray:
    a = np.moveaxis(b, axis, 0)
    n = a.shape[0]
    out = np.empty_like(a)
    out[1:-1] = ((a[2:] - a[1:-1]) - (a[1:-1] - a[:-2])) / h**2
    if n >= 4:
        for e, s in ((0, 1), (-1, -1)):
            d1 = a[e + s] - a[e]
            d2 = a[e + 2 * s] - a[e]
            d3 = a[e + 3 * s] - a[e]
            out[e] = (-5.0 * d1 + 4.0 * d2 - d3) / h**2
    else:
        out[0] = out[1]
        out[-1] = out[-2]
    return np.moveaxis(out, 0, axis)


def derivatives(grid: ElevationGrid) -> DerivativeField:
    """First and second partial derivatives of the height field.

    Interior nodes use the standard central stencils (the mixed derivative
    is the four-corner cross stencil); edges use one-sided second-order
    stencils. NaN (nodata) propagates to every stencil that touches it.
    """
    if grid.n_rows < 3 or grid.n_cols < 3:
        raise GridError("derivatives need a grid of at least 3x3 nodes")
    b, h = grid.values, grid.dx
    b_x = _first(b, h, axis=1)
    b_y = _first(b, h, axis=0)
    return DerivativeField(
        b_x=b_x,
        b_y=b_y,
        b_xx=_second(b, h, axis=1),
        b_yy=_second(b, h, axis=0),
        b_xy=_first(b_x, h, axis=0),
    )


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_bilinear(grid: ElevationGrid, x, y):
    """Bilinear interpolation at one or many points.

    Exact at nodes and for planar fields. Raises GridError for points
    outside the grid or when a node with non-zero weight is nodata.
    """
    xa = np.atleast_1d(np.asarray(x, dtype=np.float64))
    ya = np.atleast_1d(np.asarray(y, dtype=np.float64))
    fi = (xa - grid.x0) / grid.dx
    fj = (ya - grid.y0) / grid.dx
    eps = 1e-9
    bad = (fi < -eps) | (fi > grid.n_cols - 1 + eps) | (fj < -eps) | (fj > grid.n_rows - 1 + eps)
    if bad.any():
        k = int(np.argmax(bad))
        raise GridError(f"point ({xa[k]}, {ya[k]}) outside grid extent")
    fi = np.where(np.abs(fi - np.rint(fi)) < eps, np.rint(fi), fi)
    fj = np.where(np.abs(fj - np.rint(fj)) < eps, np.rint(fj), fj)
    fi = np.clip(fi, 0.0, grid.n_cols - 1)
    fj = np.clip(fj, 0.0, grid.n_rows - 1)
    i0 = np.minimum(np.floor(fi).astype(np.int64), grid.n_cols - 2)
    j0 = np.minimum(np.floor(fj).astype(np.int64), grid.n_rows - 2)
    t = fi - i0
    s = fj - j0

    b = grid.values
    corners = (
        ((1 - t) * (1 - s), b[j0, i0]),
        (t * (1 - s), b[j0, i0 + 1]),
        ((1 - t) * s, b[j0 + 1, i0]),
        (t * s, b[j0 + 1, i0 + 1]),
    )
    out = np.zeros_like(fi)
    for w, v in corners:
        used = w != 0.0
        if np.isnan(v[used]).any():
            k = int(np.argmax(used & np.isnan(v)))
            raise GridError(f"nodata neighbour at point ({xa[k]}, {ya[k]})")
        out += np.where(used, w * np.where(used, v, 0.0), 0.0)

    if np.ndim(x) == 0 and np.ndim(y) == 0:
        return float(out[0])
    return out
