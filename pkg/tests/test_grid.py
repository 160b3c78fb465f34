import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dem_forge.grid import (
    ElevationGrid,
    GridError,
    GridParseError,
    derivatives,
    format_grid,
    read_grid,
    sample_bilinear,
    write_grid,
    write_pgm,
)


def plane(a, b, c=0.0, n=7, dx=1.0, x0=0.0, y0=0.0):
    return ElevationGrid.from_function(lambda X, Y: a * X + b * Y + c, n, n, x0, y0, dx)


class TestElevationGrid:
    def test_node_coordinates(self):
        g = ElevationGrid(np.zeros((3, 4)), x0=100.0, y0=-5.0, dx=2.5)
        assert g.n_cols == 4 and g.n_rows == 3
        assert g.x(3) == 100.0 + 3 * 2.5
        assert g.y(2) == -5.0 + 2 * 2.5
        X, Y = g.coords()
        assert X[0, 3] == g.x(3) and Y[2, 0] == g.y(2)

    @pytest.mark.parametrize("shape", [(1, 5), (5, 1)])
    def test_rejects_degenerate_shape(self, shape):
        with pytest.raises(GridError):
            ElevationGrid(np.zeros(shape), 0, 0, 1)

    def test_rejects_nonpositive_dx(self):
        with pytest.raises(GridError):
            ElevationGrid(np.zeros((2, 2)), 0, 0, 0.0)

    def test_values_are_immutable(self):
        g = ElevationGrid(np.zeros((2, 2)), 0, 0, 1)
        with pytest.raises(ValueError):
            g.values[0, 0] = 1.0

    def test_nodata_sentinel_becomes_nan(self):
        g = ElevationGrid(np.array([[1.0, -9999.0], [3.0, 4.0]]), 0, 0, 1)
        assert g.n_nodata == 1
        assert np.isnan(g.values[0, 1])


class TestGridIO:
    def test_parse_2x2(self, tmp_path):
        p = tmp_path / "g.asc"
        p.write_text(
            "ncols 2\nnrows 2\nxllcorner 0.0\nyllcorner 0.0\ncellsize 1.0\n"
            "NODATA_value -9999\n1 2\n3 4\n"
        )
        g = read_grid(p)
        # file is north row first; storage is south row first
        assert g.values[::-1].ravel().tolist() == [1, 2, 3, 4]

    def test_row_length_mismatch_names_line(self, tmp_path):
        p = tmp_path / "g.asc"
        p.write_text(
            "ncols 3\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n"
            "NODATA_value -9999\n1 2 3\n4 5\n"
        )
        with pytest.raises(GridParseError) as exc:
            read_grid(p)
        assert exc.value.line == 8

    def test_non_numeric_cell(self, tmp_path):
        p = tmp_path / "g.asc"
        p.write_text(
            "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n"
            "NODATA_value -9999\n1 2\n3 x\n"
        )
        with pytest.raises(GridParseError, match="line 8"):
            read_grid(p)

    def test_malformed_header(self, tmp_path):
        p = tmp_path / "g.asc"
        p.write_text("ncols 2\nrows 2\n")
        with pytest.raises(GridParseError, match="line 2"):
            read_grid(p)

    def test_constant_zero_grid_format(self, tmp_path):
        g = ElevationGrid(np.zeros((2, 2)), 0, 0, 1)
        text = format_grid(g)
        lines = text.splitlines()
        assert lines[:6] == [
            "ncols 2",
            "nrows 2",
            "xllcorner 0.0",
            "yllcorner 0.0",
            "cellsize 1.0",
            "NODATA_value -9999.0",
        ]
        assert lines[6:] == ["0.000000 0.000000"] * 2

    def test_nodata_written_as_sentinel(self, tmp_path):
        g = ElevationGrid(np.array([[np.nan, 1.0], [2.0, 3.0]]), 0, 0, 1, nodata=-32768.0)
        lines = format_grid(g).splitlines()
        # south row (index 0) is the last line
        assert lines[-1].split()[0] == "-32768.000000"
        p = tmp_path / "g.asc"
        write_grid(g, p)
        back = read_grid(p)
        assert np.isnan(back.values[0, 0]) and back.nodata == -32768.0

    def test_roundtrip_100x100(self, tmp_path):
        rng = np.random.default_rng(7)
        vals = rng.uniform(-50, 150, size=(100, 100))
        g = ElevationGrid(vals, 4.25e5, 5.4e6, 5.0)
        p = tmp_path / "r.asc"
        write_grid(g, p)
        back = read_grid(p)
        expected = np.array([[float(f"{v:.6f}") for v in row] for row in vals])
        assert np.array_equal(back.values, expected)
        assert (back.x0, back.y0, back.dx) == (g.x0, g.y0, g.dx)

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(
            np.float64,
            st.tuples(st.integers(2, 8), st.integers(2, 8)),
            elements=st.floats(-1e5, 1e5, allow_nan=False),
        ),
        st.floats(-1e6, 1e6),
        st.floats(1e-3, 1e3),
    )
    def test_roundtrip_property(self, tmp_path_factory, vals, x0, dx):
        g = ElevationGrid(vals, x0, -x0, dx)
        p = tmp_path_factory.mktemp("rt") / "g.asc"
        write_grid(g, p)
        once = read_grid(p)
        write_grid(once, p)
        twice = read_grid(p)
        assert np.array_equal(once.values, twice.values, equal_nan=True)
        data = ~np.isnan(once.values)
        assert np.allclose(once.values[data], vals[data], atol=5e-7, rtol=0)
        assert np.all(np.abs(vals[~data] - g.nodata) < 5e-7)
        assert (twice.x0, twice.y0, twice.dx) == (g.x0, g.y0, g.dx)

    def test_pgm_preview(self, tmp_path):
        p = tmp_path / "prev.pgm"
        write_pgm(np.array([[0.0, 1.0], [2.0, np.nan]]), p)
        lines = p.read_text().splitlines()
        assert lines[:3] == ["P2", "2 2", "255"]
        assert lines[3] == "255 0"  # north row: 2.0 -> 255, nan -> 0
        assert lines[4] == "0 128"


class TestDerivatives:
    def test_constant(self):
        d = derivatives(ElevationGrid(np.full((5, 6), 3.3), 0, 0, 1))
        for f in (d.b_x, d.b_y, d.b_xx, d.b_yy, d.b_xy, d.p):
            assert np.all(f == 0)
        assert np.all(d.q == 1)

    def test_b_equals_x(self):
        d = derivatives(plane(1.0, 0.0))
        assert np.allclose(d.b_x, 1.0, atol=1e-12)
        assert np.allclose(d.b_y, 0.0, atol=1e-12)
        for f in (d.b_xx, d.b_yy, d.b_xy):
            assert np.allclose(f, 0.0, atol=1e-12)
        assert np.allclose(d.p, 1.0) and np.allclose(d.q, 2.0)

    def test_mixed_derivative_of_xy(self):
        g = ElevationGrid.from_function(lambda X, Y: X * Y, 6, 5, x0=-1.3, y0=0.7, dx=0.5)
        d = derivatives(g)
        assert np.allclose(d.b_xy[1:-1, 1:-1], 1.0, atol=1e-12)

    @pytest.mark.parametrize("a,b,c", [(0.3, -2.0, 5.0), (-1e-3, 4e-3, 12.0), (7.0, 7.0, -3.0)])
    def test_plane_exact(self, a, b, c):
        d = derivatives(plane(a, b, c, n=9, dx=2.0, x0=1000.0, y0=2000.0))
        inner = (slice(1, -1), slice(1, -1))
        assert np.allclose(d.b_x[inner], a, atol=1e-9)
        assert np.allclose(d.b_y[inner], b, atol=1e-9)
        for f in (d.b_xx, d.b_yy, d.b_xy):
            assert np.max(np.abs(f[inner])) < 1e-9

    def test_second_order_convergence(self):
        exact = {
            "b_x": lambda X, Y: np.cos(X) * np.cos(Y),
            "b_y": lambda X, Y: -np.sin(X) * np.sin(Y),
            "b_xx": lambda X, Y: -np.sin(X) * np.cos(Y),
            "b_yy": lambda X, Y: -np.sin(X) * np.cos(Y),
            "b_xy": lambda X, Y: -np.cos(X) * np.sin(Y),
        }
        errs = {k: [] for k in exact}
        for n in (21, 41, 81):
            dx = 1.0 / (n - 1)
            g = ElevationGrid.from_function(lambda X, Y: np.sin(X) * np.cos(Y), n, n, 0.2, 0.1, dx)
            d = derivatives(g)
            X, Y = g.coords()
            for k, f in exact.items():
                errs[k].append(np.max(np.abs(getattr(d, k) - f(X, Y))))
        for k, e in errs.items():
            for coarse, fine in zip(e[:-1], e[1:]):
                assert 3.0 < coarse / fine < 5.0, (k, e)

    def test_nodata_propagates_locally(self):
        vals = np.arange(49, dtype=float).reshape(7, 7)
        vals[3, 3] = np.nan
        d = derivatives(ElevationGrid(vals, 0, 0, 1))
        assert np.isnan(d.b_x[3, 2]) and np.isnan(d.b_x[3, 4])
        assert not np.isnan(d.b_x[0, 0])
        assert np.isfinite(d.b_x[3, 0])

    def test_too_small(self):
        with pytest.raises(GridError):
            derivatives(ElevationGrid(np.zeros((2, 5)), 0, 0, 1))


class TestSampleBilinear:
    def test_exact_at_nodes(self):
        rng = np.random.default_rng(1)
        g = ElevationGrid(rng.normal(size=(5, 6)), 0.1, 0.2, 0.3)
        for j in range(5):
            for i in range(6):
                assert sample_bilinear(g, g.x0 + i * g.dx, g.y0 + j * g.dx) == g.values[j, i]

    def test_cell_midpoint_on_plane_b_eq_x(self):
        g = plane(1.0, 0.0, n=4)
        v = sample_bilinear(g, 1.5, 2.5)
        assert v == pytest.approx((1 + 2 + 1 + 2) / 4)

    def test_random_points_on_plane(self):
        g = plane(2.0, 3.0, n=11, dx=0.7, x0=-3.0, y0=4.0)
        rng = np.random.default_rng(3)
        xs = rng.uniform(g.x0, g.x_max, 500)
        ys = rng.uniform(g.y0, g.y_max, 500)
        assert np.allclose(sample_bilinear(g, xs, ys), 2 * xs + 3 * ys, atol=1e-10)

    def test_outside(self):
        g = plane(1, 1, n=3)
        with pytest.raises(GridError):
            sample_bilinear(g, -0.5, 1.0)

    def test_nodata_neighbour(self):
        vals = np.ones((3, 3))
        vals[1, 1] = np.nan
        g = ElevationGrid(vals, 0, 0, 1)
        with pytest.raises(GridError, match="nodata"):
            sample_bilinear(g, 0.5, 0.5)
        # a node far from the void is still readable
        assert sample_bilinear(g, 0.0, 0.0) == 1.0
