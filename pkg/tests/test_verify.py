import numpy as np
import pytest

from dem_forge.assimilate import Source
from dem_forge.features import VectorFeature
from dem_forge.grid import ElevationGrid
from dem_forge.verify import (
    SpreadReport,
    coastline_spread,
    compare_masks,
    constraints_to_feature,
    free_surface,
    propose_corrections,
    spread_report,
)


def circle(cx, cy, r, n=720):
    t = np.linspace(0, 2 * np.pi, n + 1)
    t[-1] = 0.0
    return np.column_stack([cx + r * np.cos(t), cy + r * np.sin(t)])


class TestSpread:
    def test_contour_of_plane_has_zero_spread(self):
        g = ElevationGrid.from_function(lambda X, Y: X, 20, 20, 0, 0, 1.0)
        e = coastline_spread(g, VectorFeature("isoline", [[7.3, 0], [7.3, 19]], feature_id="c"))
        assert e.spread == pytest.approx(0.0, abs=1e-12) and e.mean == pytest.approx(7.3)
        assert e.line().startswith("feature c spread 0.000000")

    def test_circle_on_tilted_plane(self):
        slope, d = 0.01, 80.0
        g = ElevationGrid.from_function(lambda X, Y: slope * X, 41, 41, 0, 0, 5.0)
        e = coastline_spread(g, VectorFeature("isoline", circle(100, 100, d / 2)))
        assert e.spread == pytest.approx(slope * d, rel=1e-3)
        assert e.n_samples >= np.pi * d / (g.dx / 2)

    def test_vertex_outside_extent(self):
        g = ElevationGrid(np.zeros((5, 5)), 0, 0, 1.0)
        with pytest.raises(ValueError, match="outside"):
            coastline_spread(g, VectorFeature("isoline", [[1, 1], [9, 1]]))

    def test_nodata_samples_ignored(self):
        v = np.ones((5, 5))
        v[:, 4] = np.nan
        g = ElevationGrid(v, 0, 0, 1.0)
        assert coastline_spread(g, VectorFeature("isoline", [[0, 2], [4, 2]])).spread == 0.0

    def test_report(self):
        g = ElevationGrid.from_function(lambda X, Y: 0.1 * X, 10, 10, 0, 0, 1.0)
        rep = spread_report(g, [VectorFeature("isoline", [[2, 0], [2, 9]], feature_id="a"),
                                VectorFeature("isoline", [[0, 1], [9, 1]], feature_id="b")])
        assert rep.max_spread == pytest.approx(0.9)
        assert [e.feature_id for e in rep.exceeding(0.2)] == ["b"]
        assert len(rep.lines()) == 2


class TestCompareMasks:
    def test_identical(self):
        m = np.random.default_rng(0).random((10, 10)) > 0.5
        assert compare_masks(m, m).csi == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), bool)
        b = a.copy()
        a[0] = True
        b[3] = True
        assert compare_masks(a, b).csi == 0.0

    def test_half_vs_three_quarters(self):
        sim = np.zeros((100, 100), bool)
        obs = sim.copy()
        sim[:, :50] = True
        obs[:, :75] = True
        c = compare_masks(sim, obs)
        assert (c.hits, c.misses, c.false_alarms) == (5000, 2500, 0)
        assert c.csi == pytest.approx(2 / 3) and c.jaccard == c.csi

    def test_both_empty(self):
        z = np.zeros((3, 3), bool)
        assert compare_masks(z, z).csi == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            compare_masks(np.zeros((3, 3), bool), np.zeros((3, 4), bool))

    def test_valid_mask_excludes(self):
        sim = np.zeros((3, 3), bool)
        obs = np.ones((3, 3), bool)
        valid = np.zeros((3, 3), bool)
        valid[0, 0] = True
        assert compare_masks(sim, obs, valid).misses == 1

    def test_swap_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = rng.random((2, 12, 9)) > 0.4
            ab, ba = compare_masks(a, b), compare_masks(b, a)
            assert ab.hits == ba.hits
            assert (ab.misses, ab.false_alarms) == (ba.false_alarms, ba.misses)
            assert ab.csi == ba.csi

    def test_csi_monotone_as_simulation_grows(self):
        rng = np.random.default_rng(2)
        obs = rng.random((15, 15)) > 0.3
        order = rng.permutation(np.flatnonzero(obs))
        sim = np.zeros_like(obs)
        last = compare_masks(sim, obs).csi
        for k in order:
            sim.flat[k] = True
            cur = compare_masks(sim, obs).csi
            assert cur >= last
            last = cur
        assert last == 1.0


class TestCorrections:
    def test_perfect_agreement_is_empty(self):
        g = ElevationGrid(np.zeros((5, 5)), 0, 0, 1.0)
        m = np.zeros((5, 5), bool)
        m[2, 2] = True
        eta = np.where(m, 1.0, np.nan)
        coast = VectorFeature("isoline", [[0, 0], [0, 4]], level=0.0)
        spreads = spread_report(g, [coast])
        assert len(propose_corrections(g, spreads, compare_masks(m, m), eta)) == 0

    def test_rule_i_arithmetic(self):
        v = np.full((5, 5), 13.0)
        g = ElevationGrid(v, 0, 0, 1.0)
        sim = np.zeros((5, 5), bool)
        sim[2, 1] = True
        obs = sim.copy()
        obs[2, 2] = True
        eta = np.where(sim, 12.0, np.nan)
        cs = propose_corrections(g, None, compare_masks(sim, obs), eta, h_dry=0.001)
        (c,) = cs.constraints
        assert (c.i, c.j, c.source) == (2, 2, Source.CORRECTION)
        assert c.value == pytest.approx(11.999, abs=1e-12)

    def test_rule_i_resolves_sill_conflict(self):
        from dem_forge.assimilate import Constraint as C, ConstraintSet as CS
        v = np.full((5, 5), 13.0)
        v[2, 2] = 14.0  # erroneous sill
        g = ElevationGrid(v, 0, 0, 1.0)
        history = CS([C(2, 2, 10.0, Source.CHANNEL), C(2, 2, 14.0, Source.SOUNDING)])
        sim = np.zeros((5, 5), bool)
        sim[2, 1] = True
        obs = sim.copy()
        obs[2, 2] = True
        eta = np.where(sim, 12.0, np.nan)
        fix = propose_corrections(g, None, compare_masks(sim, obs), eta)
        assert history.pinned()[(2, 2)] == 14.0
        assert history.merge(fix).pinned()[(2, 2)] == 10.0

    def test_rule_i_never_raises(self):
        v = np.full((5, 5), 13.0)
        v[2, 2] = 5.0
        g = ElevationGrid(v, 0, 0, 1.0)
        sim = np.zeros((5, 5), bool)
        sim[2, 1] = True
        obs = sim.copy()
        obs[2, 2] = True
        eta = np.where(sim, 12.0, np.nan)
        assert len(propose_corrections(g, None, compare_masks(sim, obs), eta)) == 0

    def test_rule_i_needs_adjacent_water(self):
        g = ElevationGrid(np.full((6, 6), 13.0), 0, 0, 1.0)
        sim = np.zeros((6, 6), bool)
        sim[0, 0] = True
        obs = sim.copy()
        obs[4, 4] = True
        eta = np.where(sim, 12.0, np.nan)
        assert len(propose_corrections(g, None, compare_masks(sim, obs), eta)) == 0

    @pytest.mark.parametrize("connectivity,expected", [(4, 0), (8, 1)])
    def test_diagonal_adjacency(self, connectivity, expected):
        g = ElevationGrid(np.full((5, 5), 13.0), 0, 0, 1.0)
        sim = np.zeros((5, 5), bool)
        sim[1, 1] = True
        obs = sim.copy()
        obs[2, 2] = True
        eta = np.where(sim, 12.0, np.nan)
        cs = propose_corrections(g, None, compare_masks(sim, obs), eta, connectivity=connectivity)
        assert len(cs) == expected

    def test_rule_ii_coastline_mark(self):
        g = ElevationGrid.from_function(lambda X, Y: 0.1 * X, 10, 10, 0, 0, 1.0)
        coast = VectorFeature("isoline", [[0, 3], [9, 3]], level=0.4, feature_id="c")
        spreads = spread_report(g, [coast])
        cs = propose_corrections(g, spreads, None, None, spread_tol=0.2)
        assert len(cs) == 10
        assert {c.value for c in cs} == {0.4} and {c.j for c in cs} == {3}
        assert len(propose_corrections(g, spreads, None, None, spread_tol=1.0)) == 0

    def test_empty_inputs(self):
        g = ElevationGrid(np.zeros((3, 3)), 0, 0, 1.0)
        assert len(propose_corrections(g, SpreadReport(), None, None)) == 0


def test_free_surface_and_feature_export():
    g = ElevationGrid(np.array([[1.0, 9.0], [9.0, 4.0]]), 10, 20, 5.0)
    eta = free_surface(g, np.array([[0.5, 0.0], [0.0, 2.0]]), 0.01)
    assert eta[0, 0] == 1.5 and np.isnan(eta[0, 1]) and eta[1, 1] == 6.0
    cs = propose_corrections(g, None, compare_masks(np.isfinite(eta), np.ones((2, 2), bool)), eta)
    feat = constraints_to_feature(cs, g)
    assert feat.kind == "points"
    assert sorted(map(tuple, feat.vertices.tolist())) == sorted(
        [(g.x(c.i), g.y(c.j), c.value) for c in cs]
    )
    assert constraints_to_feature(propose_corrections(g, None, None, None), g) is None
