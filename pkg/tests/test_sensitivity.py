from collections import deque

import numpy as np
import pytest

from floodcal.forcing import ForcingSpec, uniform_hyetograph
from floodcal.grid import assign_latents, build_grid, build_localization, hline_edges, vline_edges
from floodcal.integrator import IntegratorConfig, integrate
from floodcal.io import write_sensitivity_diagnostics
from floodcal.model import FloodModel, FluxParams, edge_flux, edge_flux_derivs, simulate
from floodcal.sensitivity import (CoupledSystem, SensitivityError, dense_sensitivity_rhs,
                                  integrate_coupled, observation_gradient, total_gradient)

TIGHT = IntegratorConfig(rtol=1e-10, atol=1e-13, atol_sens=1e-13)
RAIN = ForcingSpec(uniform_hyetograph(0.040, 600.0))


def small_case(rows=4, cols=4, seed=0):
    rng = np.random.default_rng(seed)
    f = build_grid(rows, cols, 10.0, rng.uniform(0.8, 1.0, rows * cols), 0.02)
    lay = assign_latents(f, vline_edges(f, range(rows), cols // 2 - 1)
                         + hline_edges(f, range(cols // 2), rows // 2 - 1))
    return f, lay, rng


class TestRhs:
    def test_dry_state_is_inert(self):
        f, lay, rng = small_case()
        sys_ = CoupledSystem(FloodModel(f, lay, RAIN), np.ones(lay.n_groups))
        g = rng.normal(size=sys_.n_sens)
        np.testing.assert_array_equal(sys_.sensitivity_rhs(0.0, np.zeros(f.n_cells), g), 0.0)

    def test_two_cell_hand_expansion(self):
        f = build_grid(1, 2, 10.0, np.array([1.0, 0.8]), 0.02)
        lay = assign_latents(f, [(0, 1)])
        z = 1.3
        sys_ = CoupledSystem(FloodModel(f, lay, RAIN), [z])
        h = np.array([0.12, 0.05])
        G = np.array([0.4, -0.1])
        p = FluxParams()
        a = edge_flux(h[0], h[1], 1.0, 0.8, 0.02, 0.02, 10.0, p)
        d0, d1 = edge_flux_derivs(h[0], h[1], 1.0, 0.8, 0.02, 0.02, 10.0, p)
        s = 100.0
        # cell 0 loses z*a, cell 1 gains it
        expect0 = -a / s - z * d0 / s * G[0] - z * d1 / s * G[1]
        expect1 = a / s + z * d0 / s * G[0] + z * d1 / s * G[1]
        got = sys_.sensitivity_rhs(0.0, h, G)
        np.testing.assert_allclose(got, [expect0, expect1], rtol=1e-13)

    def test_dense_oracle(self):
        f, lay, rng = small_case()
        model = FloodModel(f, lay, RAIN)
        z = rng.uniform(0.2, 2.0, lay.n_groups)
        h = rng.uniform(0.0, 0.2, f.n_cells)
        h[3] = 0.0
        G = rng.normal(size=(f.n_cells, lay.n_groups))
        sparse_val = CoupledSystem(model, z).sensitivity_rhs(0.0, h, G.ravel())
        dense_val = dense_sensitivity_rhs(model, z, h, G).ravel()
        np.testing.assert_allclose(sparse_val, dense_val, rtol=1e-12,
                                   atol=1e-14 * np.abs(dense_val).max())

    def test_source_antisymmetric(self):
        f, lay, rng = small_case()
        sys_ = CoupledSystem(FloodModel(f, lay, RAIN), np.ones(lay.n_groups))
        a = FloodModel(f, lay, RAIN).edge_terms(rng.uniform(0, 0.2, f.n_cells))
        S = sys_.source(a).reshape(f.n_cells, lay.n_groups)
        for s in range(lay.n_groups):
            i, j = f.edges[lay.group_edges(s)[0]]
            assert S[i, s] == -S[j, s]
            assert S[i, s] != 0.0
            np.testing.assert_allclose(S[:, s].sum(), 0.0, atol=1e-18)

    def test_non_finite_reports_location(self):
        f, lay, _ = small_case()
        sys_ = CoupledSystem(FloodModel(f, lay, RAIN), np.ones(lay.n_groups))
        g = np.zeros(sys_.n_sens)
        g[5] = np.inf
        with pytest.raises(SensitivityError, match=r"cell \d+, group \d+, t=2.5"):
            sys_.sensitivity_rhs(2.5, np.full(f.n_cells, 0.1), g)


class TestCoupledSolve:
    def test_no_rain_stays_zero(self):
        f, lay, _ = small_case()
        model = FloodModel(f, lay, ForcingSpec(uniform_hyetograph(0.0, 600.0)))
        st = integrate_coupled(CoupledSystem(model, np.ones(lay.n_groups)), (0, 600), [300, 600])
        np.testing.assert_array_equal(st.G, 0.0)
        np.testing.assert_array_equal(st.h, 0.0)

    def test_matches_finite_differences(self, twin5, rng):
        z = np.array([0.7, 1.2, 0.3, 1.8])
        model = FloodModel(twin5.field, twin5.layout, twin5.forcing(), twin5.flux_params())
        G = integrate_coupled(CoupledSystem(model, z), (0, 600), [600.0], TIGHT).G[-1]
        pairs = [(int(i), int(s)) for i, s in zip(rng.integers(0, 25, 20), rng.integers(0, 4, 20))]
        fd_cache = {}
        for i, s in pairs:
            if s not in fd_cache:
                d = 1e-4 * z[s]
                zp, zm = z.copy(), z.copy()
                zp[s] += d
                zm[s] -= d
                hp = simulate(twin5.field, twin5.layout, zp, twin5.forcing(), (0, 600), [600.0],
                              TIGHT, model=model).trajectory.states[-1]
                hm = simulate(twin5.field, twin5.layout, zm, twin5.forcing(), (0, 600), [600.0],
                              TIGHT, model=model).trajectory.states[-1]
                fd_cache[s] = (hp - hm) / (2 * d)
            assert G[i, s] == pytest.approx(fd_cache[s][i], rel=1e-4)

    def test_scalar_linear_system(self):
        # dh/dt = z h, g = dh/dz obeys dg/dt = z g + h; exact g(T) = T e^{zT}
        z, T = 0.7, 2.0

        def aug(t, y):
            return np.array([z * y[0], z * y[1] + y[0]])

        tr = integrate(aug, [1.0, 0.0], (0, T), [T], IntegratorConfig(rtol=1e-10, atol=1e-12))
        d = 1e-5
        hp = integrate(lambda t, y: (z + d) * y, [1.0], (0, T), [T],
                       IntegratorConfig(rtol=1e-12, atol=1e-14)).states[-1, 0]
        hm = integrate(lambda t, y: (z - d) * y, [1.0], (0, T), [T],
                       IntegratorConfig(rtol=1e-12, atol=1e-14)).states[-1, 0]
        assert tr.states[-1, 1] == pytest.approx((hp - hm) / (2 * d), rel=1e-6)
        assert tr.states[-1, 1] == pytest.approx(T * np.exp(z * T), rel=1e-8)

    def test_uncontrolled_sensitivity_block_reproduces_forward(self, twin5):
        model = FloodModel(twin5.field, twin5.layout, twin5.forcing(), twin5.flux_params())
        cfg = IntegratorConfig(rtol=1e-6, atol=1e-9, atol_sens=np.inf)
        z = twin5.truth
        times = np.arange(60.0, 601.0, 60.0)
        fwd = simulate(twin5.field, twin5.layout, z, twin5.forcing(), (0, 600), times, cfg,
                       model=model)
        st = integrate_coupled(CoupledSystem(model, z), (0, 600), times, cfg)
        np.testing.assert_array_equal(st.h, fwd.trajectory.states)

    def test_conservation_from_nonzero_start(self):
        f, lay, rng = small_case()
        model = FloodModel(f, lay, RAIN)
        G0 = rng.normal(size=(f.n_cells, lay.n_groups))
        sigma0 = G0.sum(axis=0)
        st = integrate_coupled(CoupledSystem(model, np.ones(lay.n_groups)), (0, 600),
                               [200.0, 600.0], TIGHT, G0=G0)
        for G in st.G:
            np.testing.assert_allclose(total_gradient(G), sigma0, atol=1e-10)


class TestSharing:
    def test_group_is_sum_of_members(self):
        rng = np.random.default_rng(4)
        f = build_grid(5, 5, 10.0, rng.uniform(0.8, 1.0, 25), 0.03)
        sel = vline_edges(f, range(3), 1)
        shared = assign_latents(f, sel, sharing=[[0, 1, 2]])
        single = assign_latents(f, sel)
        v = 1.4
        Gs = integrate_coupled(CoupledSystem(FloodModel(f, shared, RAIN), [v]), (0, 600),
                               [600.0], TIGHT).G[-1, :, 0]
        Gi = integrate_coupled(CoupledSystem(FloodModel(f, single, RAIN), [v, v, v]), (0, 600),
                               [600.0], TIGHT).G[-1]
        np.testing.assert_allclose(Gs, Gi.sum(axis=1), rtol=1e-6,
                                   atol=1e-6 * np.abs(Gs).max())


class TestLocalization:
    def test_whole_field_mask_is_identity(self, twin5):
        model = FloodModel(twin5.field, twin5.layout, twin5.forcing(), twin5.flux_params())
        z = twin5.truth + 0.2
        full = integrate_coupled(CoupledSystem(model, z), (0, 600), [300.0, 600.0], TIGHT).G
        mask = build_localization(twin5.layout, 10)
        loc = integrate_coupled(CoupledSystem(model, z, mask), (0, 600), [300.0, 600.0], TIGHT).G
        np.testing.assert_allclose(loc, full, rtol=1e-12, atol=1e-18)

    def test_outside_mask_is_zero(self):
        f = build_grid(12, 12, 10.0, np.linspace(1.0, 0.8, 144), 0.02)
        lay = assign_latents(f, [(f.cell(5, 5), f.cell(5, 6))])
        mask = build_localization(lay, 2)
        st = integrate_coupled(CoupledSystem(FloodModel(f, lay, RAIN), [1.0], mask), (0, 600),
                               [300.0, 600.0])
        outside = np.setdiff1d(np.arange(f.n_cells), mask.domain[0])
        assert np.all(st.G[:, outside, 0] == 0.0)
        assert np.any(st.G[:, mask.domain[0], 0] != 0.0)

    def test_mask_group_count_checked(self, twin5):
        model = FloodModel(twin5.field, twin5.layout, twin5.forcing(), twin5.flux_params())
        other = assign_latents(twin5.field, [(0, 1)])
        with pytest.raises(ValueError, match="does not match"):
            CoupledSystem(model, twin5.truth, build_localization(other, 2))


def graph_distance(field, sources):
    dist = np.full(field.n_cells, -1)
    adj = field.adjacency()
    queue = deque(sources)
    dist[list(sources)] = 0
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


@pytest.fixture(scope="module")
def case1_full(case1):
    model = FloodModel(case1.field, case1.layout, case1.forcing(), case1.flux_params())
    return {tag: integrate_coupled(CoupledSystem(model, z), (0, 600), [600.0],
                                   case1.integrator()).G[-1]
            for tag, z in (("prior", case1.prior()), ("truth", case1.truth))}


class TestCase1Localization:
    def test_edge_cell_matches_full_solve(self, case1, case1_full):
        z = case1.prior()
        model = FloodModel(case1.field, case1.layout, case1.forcing(), case1.flux_params())
        mask = build_localization(case1.layout, 6)
        loc = integrate_coupled(CoupledSystem(model, z, mask), (0, 600), [600.0],
                                case1.integrator()).G[-1]
        full = case1_full["prior"]
        cells = case1.field.edges[case1.layout.latent_edges[37]]
        rel = [abs(loc[c, 37] - full[c, 37]) / abs(full[c, 37]) for c in cells]
        assert min(rel) <= 0.05

    @pytest.mark.parametrize("tag", ["prior", "truth"])
    @pytest.mark.parametrize("group", [7, 37])
    def test_decays_with_distance(self, case1, case1_full, tag, group):
        G = case1_full[tag][:, group]
        dist = graph_distance(case1.field, case1.field.edges[case1.layout.latent_edges[group]])
        rings = np.array([np.abs(G[dist == d]).mean() for d in range(dist.max() + 1)])
        assert np.all(np.diff(rings) <= 0)


class TestObservationGradient:
    def test_selection(self):
        G = np.arange(24.0).reshape(2, 4, 3)
        np.testing.assert_array_equal(observation_gradient(G, [3, 1]), G[:, [3, 1], :])
        np.testing.assert_array_equal(observation_gradient(np.zeros((5, 2)), [0]), 0.0)

    def test_unknown_cell(self):
        with pytest.raises(IndexError, match="cell ids"):
            observation_gradient(np.zeros((4, 2)), [4])

    def test_downstream_cell_gains(self):
        f = build_grid(1, 2, 10.0, np.array([1.0, 0.8]), 0.02)
        lay = assign_latents(f, [(0, 1)])
        st = integrate_coupled(CoupledSystem(FloodModel(f, lay, RAIN), [0.5]), (0, 600),
                               [120.0, 600.0])
        g = observation_gradient(st.G, [1])
        assert np.all(g > 0)
        assert np.all(observation_gradient(st.G, [0]) < 0)


def test_diagnostics_csv(tmp_path):
    G = np.zeros((2, 3, 2))
    G[1, 0, 1] = 2.0
    G[1, 2, 1] = -2.0
    path = write_sensitivity_diagnostics(tmp_path / "d.csv", [60.0, 120.0], G)
    lines = path.read_text().splitlines()
    assert lines[0] == "time_s,group,total_gradient,max_abs_gradient"
    assert lines[-1] == "120,1,0,2"
