import numpy as np
import pytest

from floodcal.grid import (DemGrid, GridError, assign_latents, build_grid, build_incidence,
                           build_localization, dump_dem_ascii, hline_edges, load_dem_ascii,
                           mask_edges, vline_edges)


def case1_field():
    elev = np.full((30, 30), 1.0)
    elev[:15, 15:] = 0.8
    elev[15:, :15] = 0.8
    return build_grid(30, 30, 10.0, elev, 0.02)


def case1_layout(field):
    return assign_latents(field, vline_edges(field, range(30), 14)
                          + hline_edges(field, range(30), 14))


class TestBuildGrid:
    def test_case1_field(self):
        f = case1_field()
        assert f.n_cells == 900
        assert f.n_edges == 2 * 30 * 29
        assert f.elevation[f.cell(0, 0)] == 1.0
        assert f.elevation[f.cell(0, 29)] == 0.8
        assert f.elevation[f.cell(29, 0)] == 0.8
        assert f.elevation[f.cell(29, 29)] == 1.0
        assert np.all(f.manning == 0.02)
        assert np.all(f.area == 100.0)

    def test_single_cell(self):
        f = build_grid(1, 1, 5.0)
        assert f.n_cells == 1
        assert f.adjacency() == [[]]

    def test_two_by_two(self):
        f = build_grid(2, 2, 1.0)
        assert [len(nb) for nb in f.adjacency()] == [2, 2, 2, 2]

    def test_adjacency_symmetric_and_valid(self):
        f = build_grid(7, 5, 1.0)
        adj = f.adjacency()
        for i, nb in enumerate(adj):
            for j in nb:
                assert 0 <= j < f.n_cells
                assert i in adj[j]

    def test_source_size_mismatch_names_counts(self):
        with pytest.raises(GridError, match="12 values.*3x5 = 15"):
            build_grid(3, 5, 1.0, elevation=np.zeros(12))

    @pytest.mark.parametrize("rows,cols,spacing", [(0, 3, 1.0), (3, -1, 1.0), (2, 2, 0.0)])
    def test_rejects_bad_dimensions(self, rows, cols, spacing):
        with pytest.raises(GridError):
            build_grid(rows, cols, spacing)

    def test_nan_cells_dropped(self):
        elev = np.arange(9.0).reshape(3, 3)
        elev[1, 1] = np.nan
        f = build_grid(3, 3, 1.0, elev)
        assert f.n_cells == 8
        assert f.index_grid[1, 1] == -1
        # the hole cuts four edges out of the twelve
        assert f.n_edges == 8

    def test_edge_index_lookup(self):
        f = build_grid(3, 3, 1.0)
        e = f.edge_index(4, 1)
        assert tuple(f.edges[e]) == (1, 4)
        with pytest.raises(GridError, match="not adjacent"):
            f.edge_index(0, 4)


class TestDem:
    def test_minimal_file(self):
        text = ("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 2\n"
                "NODATA_value -9999\n1 2\n3 -9999\n")
        dem = load_dem_ascii(text)
        assert dem.shape == (2, 2)
        assert dem.cellsize == 2.0
        assert dem.elevation[0, 1] == 2.0
        assert np.isnan(dem.elevation[1, 1])

    def test_count_mismatch_names_line(self):
        text = "ncols 2\nnrows 2\ncellsize 1\n1 2\n3\n"
        with pytest.raises(GridError, match=r"line 5: expected 2x2 = 4 values, found 3"):
            load_dem_ascii(text)

    def test_malformed_header(self):
        with pytest.raises(GridError, match="line 2"):
            load_dem_ascii("ncols 2\nnrows two\ncellsize 1\n1 2 3 4\n")
        with pytest.raises(GridError, match="missing 'cellsize'"):
            load_dem_ascii("ncols 2\nnrows 2\n1 2 3 4\n")

    def test_bad_value_token(self):
        with pytest.raises(GridError, match="line 4: non-numeric value 'x'"):
            load_dem_ascii("ncols 2\nnrows 2\ncellsize 1\n1 x\n3 4\n")

    def test_round_trip(self):
        elev = np.array([[1.25, np.nan, 3.0], [0.1, 0.2, 0.3]])
        dem = DemGrid(elev, 2.0, 10.0, 20.0, -9999.0)
        back = load_dem_ascii(dump_dem_ascii(dem))
        np.testing.assert_array_equal(np.isnan(back.elevation), np.isnan(elev))
        np.testing.assert_array_equal(np.nan_to_num(back.elevation), np.nan_to_num(elev))
        assert (back.xllcorner, back.yllcorner, back.cellsize) == (10.0, 20.0, 2.0)

    def test_full_scale_cell_count(self):
        rows, cols = 483, 201
        vals = np.linspace(10, 20, rows * cols).reshape(rows, cols)
        dem = load_dem_ascii(dump_dem_ascii(DemGrid(vals, 2.0)))
        f = build_grid(rows, cols, dem.cellsize, dem.elevation)
        assert f.n_cells == 97083


class TestLatents:
    def test_case1_numbering(self):
        f = case1_field()
        lay = case1_layout(f)
        assert lay.n_groups == 60
        # 0..29 down the vertical line, 30..59 left to right on the horizontal one
        e7 = lay.latent_edges[7]
        assert tuple(f.edges[e7]) == (f.cell(7, 14), f.cell(7, 15))
        e37 = lay.latent_edges[37]
        assert tuple(f.edges[e37]) == (f.cell(14, 7), f.cell(15, 7))

    def test_empty_selector(self):
        f = build_grid(3, 3, 1.0)
        lay = assign_latents(f)
        assert lay.n_groups == 0
        np.testing.assert_array_equal(lay.edge_multipliers(np.zeros(0)), np.ones(f.n_edges))

    def test_duplicate_edge_rejected(self):
        f = build_grid(3, 3, 1.0)
        with pytest.raises(GridError, match="again"):
            assign_latents(f, [(0, 1), (1, 0)])

    def test_latent_in_two_groups_rejected(self):
        f = build_grid(3, 3, 1.0)
        with pytest.raises(GridError, match="groups 0 and 1"):
            assign_latents(f, [(0, 1), (1, 2)], sharing=[[0, 1], [1]])

    def test_ungrouped_latent_rejected(self):
        f = build_grid(3, 3, 1.0)
        with pytest.raises(GridError, match="no sharing group"):
            assign_latents(f, [(0, 1), (1, 2)], sharing=[[0]])

    def test_latent_matrix_symmetric_with_constants(self):
        f = build_grid(3, 3, 1.0)
        lay = assign_latents(f, [(0, 1), (3, 4)], constants={(4, 5): 0.0})
        Z = lay.latent_matrix([2.0, 0.5])
        np.testing.assert_array_equal(Z, Z.T)
        assert Z[0, 1] == 2.0 and Z[4, 3] == 0.5
        assert Z[4, 5] == 0.0
        assert Z[1, 2] == 1.0

    def test_road_sharing_single_group(self):
        f = build_grid(6, 6, 1.0)
        road = np.zeros((6, 6), bool)
        road[2:4, :] = True
        sel = mask_edges(f, road)
        lay = assign_latents(f, sel, sharing=[list(range(len(sel)))])
        assert lay.n_groups == 1
        assert len(sel) == 6 * 1 + 5 * 2


class TestIncidence:
    def test_case1_cell_next_to_latent7(self):
        f = case1_field()
        inc = build_incidence(case1_layout(f))
        E = inc.matrix()
        row = E[f.cell(7, 14)]
        assert np.flatnonzero(row).tolist() == [7]

    def test_road_patch_multiplicity(self):
        f = build_grid(3, 3, 1.0)
        road = np.zeros((3, 3), bool)
        road[1, :] = True
        road[:, 1] = True
        sel = mask_edges(f, road)
        lay = assign_latents(f, sel, sharing=[list(range(len(sel)))])
        inc = build_incidence(lay)
        # the centre of a plus-shaped patch has four road neighbours
        assert len(inc.edges_of(4, 0)) == 4
        road[0, 1] = False
        sel = mask_edges(f, road)
        lay = assign_latents(f, sel, sharing=[list(range(len(sel)))])
        inc = build_incidence(lay)
        assert len(inc.edges_of(4, 0)) == 3
        assert inc.multiplicity()[4, 0] == 3
        assert inc.matrix()[4, 0] == 1

    def test_cell_without_latents(self):
        f = case1_field()
        E = build_incidence(case1_layout(f)).matrix()
        assert not E[f.cell(0, 0)].any()

    def test_nonzero_cells_match_group_edges(self):
        f = case1_field()
        lay = case1_layout(f)
        E = build_incidence(lay).matrix()
        for s in (0, 14, 37, 59):
            cells = set(f.edges[lay.group_edges(s)].ravel().tolist())
            assert set(np.flatnonzero(E[:, s]).tolist()) == cells


class TestLocalization:
    def test_whole_raster(self):
        f = build_grid(6, 6, 1.0)
        lay = assign_latents(f, [(f.cell(2, 2), f.cell(2, 3))])
        m = build_localization(lay, 10)
        assert len(m.domain[0]) == 36
        assert len(m.boundary[0]) == 0

    def test_single_edge_block(self):
        f = build_grid(30, 30, 1.0)
        lay = assign_latents(f, [(f.cell(10, 10), f.cell(10, 11))])
        m = build_localization(lay, 2)
        rc = f.cell_rc[m.domain[0]]
        # 2*hw cells across the edge, 2*hw + 1 along it
        assert sorted(set(rc[:, 1].tolist())) == [9, 10, 11, 12]
        assert sorted(set(rc[:, 0].tolist())) == [8, 9, 10, 11, 12]
        assert len(m.domain[0]) == 20
        # one-cell ring around a 5x4 block
        assert len(m.boundary[0]) == 2 * 5 + 2 * 4

    def test_domain_contains_edge_cells_and_ring_is_disjoint(self):
        f = case1_field()
        lay = case1_layout(f)
        m = build_localization(lay, 3)
        adj = f.adjacency()
        for s in range(lay.n_groups):
            dom = set(m.domain[s].tolist())
            ring = set(m.boundary[s].tolist())
            assert set(f.edges[lay.group_edges(s)].ravel().tolist()) <= dom
            assert not dom & ring
            expected = {j for i in dom for j in adj[i]} - dom
            assert ring == expected

    def test_rejects_zero_halfwidth(self):
        f = build_grid(3, 3, 1.0)
        with pytest.raises(GridError):
            build_localization(assign_latents(f, [(0, 1)]), 0)
