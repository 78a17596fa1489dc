"""Forward sensitivity of water depths to the free latent values.

For every cell ``i`` and group ``s`` the sensitivity ``G[i, s] = dh_i/dz_s``
obeys

    dG/dt = J(h) G + S(h)

where ``J`` is the Jacobian of the depth RHS and ``S[i, s]`` is the flux
through cell ``i``'s group-``s`` edges, divided by the cell area and signed
as an outflow. The forward state and ``G`` are integrated together.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .grid import IncidenceStructure, LocalizationMask, build_incidence
from .integrator import IntegratorConfig, Trajectory, integrate
from .model import FloodModel, edge_flux, edge_flux_derivs


class SensitivityError(FloatingPointError):
    pass


class CoupledSystem:
    """Augmented RHS for ``y = [h ; G]``.

    Without a mask ``G`` is stored dense, row-major ``(N, groups)``. With a
    mask only the domain cells of each group are stored, group after group;
    ring cells hold zero and are not part of the state.
    """

    def __init__(self, model: FloodModel, z, mask: LocalizationMask | None = None,
                 incidence: IncidenceStructure | None = None):
        self.model = model
        self.layout = model.layout
        self.z = np.asarray(z, dtype=float)
        self.mult = self.layout.edge_multipliers(self.z)
        self.n = model.n
        self.w = self.layout.n_groups
        self.mask = mask
        self.incidence = incidence or build_incidence(self.layout)
        eg = self.layout.edge_group
        self._lat_edges = np.flatnonzero(eg >= 0)
        self._lat_group = eg[self._lat_edges]
        inv = model.inv_area
        ei, ej = model.ei[self._lat_edges], model.ej[self._lat_edges]
        self._src_inv_i = inv[ei]
        self._src_inv_j = inv[ej]
        if mask is None:
            self.n_sens = self.n * self.w
            self._src_pos_i = ei * self.w + self._lat_group
            self._src_pos_j = ej * self.w + self._lat_group
            self._build_source_map()
        else:
            if mask.n_groups != self.w:
                raise ValueError("localization mask does not match the layout groups")
            self._setup_local(ei, ej)

    # -- localized layout ------------------------------------------------------
    def _setup_local(self, ei, ej):
        model, mask = self.model, self.mask
        offsets = np.concatenate([[0], np.cumsum([len(d) for d in mask.domain])])
        self.n_sens = int(offsets[-1])
        self._offsets = offsets
        local_of = np.full(self.n, -1, dtype=np.int64)
        jrows = model._jac_rows
        jcols = model._jac_indices.astype(np.int64)
        gather, rows, cols = [], [], []
        pos_i = np.empty(len(ei), dtype=np.int64)
        pos_j = np.empty(len(ej), dtype=np.int64)
        for s, dom in enumerate(mask.domain):
            local_of[:] = -1
            local_of[dom] = np.arange(len(dom))
            keep = (local_of[jrows] >= 0) & (local_of[jcols] >= 0)
            slots = np.flatnonzero(keep)
            gather.append(slots)
            rows.append(local_of[jrows[slots]] + offsets[s])
            cols.append(local_of[jcols[slots]] + offsets[s])
            sel = self._lat_group == s
            pi, pj = local_of[ei[sel]], local_of[ej[sel]]
            if np.any(pi < 0) or np.any(pj < 0):
                raise ValueError(f"group {s} has latent edges outside its localization domain")
            pos_i[sel] = pi + offsets[s]
            pos_j[sel] = pj + offsets[s]
        self._src_pos_i, self._src_pos_j = pos_i, pos_j
        self._build_source_map()
        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        self._gather = np.concatenate(gather) if gather else np.zeros(0, dtype=np.int64)
        # rows are already sorted within each group block, so CSR order holds
        order = np.lexsort((cols, rows))
        self._gather = self._gather[order]
        rows, cols = rows[order], cols[order]
        counts = np.bincount(rows, minlength=self.n_sens)
        self._loc_indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self._loc_indices = cols.astype(np.int64)

    def _build_source_map(self):
        k = len(self._lat_edges)
        pos = np.concatenate([self._src_pos_i, self._src_pos_j])
        vals = np.concatenate([-self._src_inv_i, self._src_inv_j])
        cols = np.concatenate([np.arange(k), np.arange(k)])
        self._src_rows, inverse = np.unique(pos, return_inverse=True)
        self._src_map = sparse.csr_matrix((vals, (inverse, cols)),
                                          shape=(len(self._src_rows), k))

    # -- evaluation --------------------------------------------------------------
    def source(self, a: np.ndarray) -> np.ndarray:
        """Flat source vector for edge fluxes ``a`` (unscaled by z)."""
        out = np.zeros(self.n_sens)
        out[self._src_rows] = self._src_map @ a[self._lat_edges]
        return out

    def _add_source(self, dg: np.ndarray, a: np.ndarray) -> None:
        dg[self._src_rows] += self._src_map @ a[self._lat_edges]

    def sensitivity_rhs(self, t: float, h: np.ndarray, g: np.ndarray, terms=None) -> np.ndarray:
        model = self.model
        if terms is None:
            terms = model.edge_terms(h, derivs=True)
        J = model.jacobian(t, h, self.mult, terms)
        if self.mask is None:
            dg = (J @ g.reshape(self.n, self.w)).ravel()
        else:
            Jl = sparse.csr_matrix((J.data[self._gather], self._loc_indices, self._loc_indptr),
                                   shape=(self.n_sens, self.n_sens))
            dg = Jl @ g
        self._add_source(dg, terms[0])
        if not np.all(np.isfinite(dg)):
            k = int(np.flatnonzero(~np.isfinite(dg))[0])
            cell, group = self.locate(k)
            raise SensitivityError(f"non-finite sensitivity derivative at cell {cell}, "
                                   f"group {group}, t={t}")
        return dg

    def rhs(self, t: float, y: np.ndarray) -> np.ndarray:
        n = self.n
        h, g = y[:n], y[n:]
        model = self.model
        terms = model.edge_terms(h, derivs=True)
        q = self.mult * terms[0]
        if not np.all(np.isfinite(q)):
            bad = int(np.flatnonzero(~np.isfinite(q))[0])
            raise SensitivityError(f"non-finite flux on edge {bad} at t={t}")
        dh = (np.bincount(model.ej, q, n) - np.bincount(model.ei, q, n)) * model.inv_area
        dh += model.source_terms(t, h)
        out = np.empty_like(y)
        out[:n] = dh
        out[n:] = self.sensitivity_rhs(t, h, g, terms)
        return out

    def locate(self, k: int) -> tuple[int, int]:
        if self.mask is None:
            return divmod(k, self.w)
        s = int(np.searchsorted(self._offsets, k, side="right") - 1)
        return int(self.mask.domain[s][k - self._offsets[s]]), s

    def expand(self, g: np.ndarray) -> np.ndarray:
        """Full ``(N, groups)`` array from a flat sensitivity vector."""
        if self.mask is None:
            return g.reshape(self.n, self.w).copy()
        G = np.zeros((self.n, self.w))
        for s, dom in enumerate(self.mask.domain):
            G[dom, s] = g[self._offsets[s]:self._offsets[s + 1]]
        return G

    def pack(self, G: np.ndarray) -> np.ndarray:
        G = np.asarray(G, dtype=float).reshape(self.n, self.w)
        if self.mask is None:
            return G.ravel().copy()
        return np.concatenate([G[dom, s] for s, dom in enumerate(self.mask.domain)])


@dataclass
class SensitivityTrajectory:
    times: np.ndarray
    h: np.ndarray  # (T, N)
    G: np.ndarray  # (T, N, groups)
    stats: dict


def integrate_coupled(system: CoupledSystem, t_span, sample_times,
                      config: IntegratorConfig | None = None, h0=None, G0=None
                      ) -> SensitivityTrajectory:
    cfg = config or IntegratorConfig()
    n = system.n
    h0 = np.zeros(n) if h0 is None else np.asarray(h0, dtype=float)
    g0 = np.zeros(system.n_sens) if G0 is None else system.pack(G0)
    y0 = np.concatenate([h0, g0])
    atol = np.concatenate([np.full(n, cfg.atol), np.full(system.n_sens, cfg.atol_sens)])
    traj: Trajectory = integrate(system.rhs, y0, t_span, sample_times, cfg, atol=atol)
    G = np.stack([system.expand(s[n:]) for s in traj.states]) if traj.times.size \
        else np.zeros((0, n, system.w))
    return SensitivityTrajectory(traj.times, traj.states[:, :n], G, traj.stats)


def total_gradient(G: np.ndarray, group: int | None = None):
    """Cell-sum of the sensitivity, per group (or for one group)."""
    G = np.asarray(G)
    tot = G.sum(axis=-2)
    return tot if group is None else tot[..., group]


def observation_gradient(G_t: np.ndarray, points) -> np.ndarray:
    """Rows of ``G`` at the observed cells: d(prediction)/dz, shape (J, groups)."""
    G_t = np.asarray(G_t)
    pts = np.asarray(points, dtype=np.int64)
    n = G_t.shape[-2]
    if np.any(pts < 0) or np.any(pts >= n):
        raise IndexError(f"observation cell ids must lie in [0, {n}), got {pts.tolist()}")
    return G_t[..., pts, :]


def dense_sensitivity_rhs(model: FloodModel, z, h: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Matrix form of the sensitivity RHS for small fields (test oracle).

    Builds the outflow matrix A, the derivative matrix A'[i, j] = da_ij/dh_j
    and the latent matrix Z, then evaluates

        dG/dt = ( -S + [diag((Z*A')^T 1) - Z*A'] G ) / s

    with ``*`` elementwise. ``S[i, s]`` sums a_ij over the group-``s`` edges
    of cell ``i``. Infiltration and inflow are not included.
    """
    fld, layout = model.field, model.layout
    n = fld.n_cells
    if n > 400:
        raise ValueError("dense oracle is meant for small fields")
    Z = layout.latent_matrix(z)
    A = np.zeros((n, n))
    Ap = np.zeros((n, n))
    for i, j in fld.edges:
        for a, b in ((i, j), (j, i)):
            args = (h[a], h[b], fld.elevation[a], fld.elevation[b],
                    fld.manning[a], fld.manning[b], fld.spacing, model.params,
                    0.5 * (fld.area[a] + fld.area[b]))
            A[a, b] = edge_flux(*args)
            Ap[a, b] = edge_flux_derivs(*args)[1]
    ZA = Z * Ap
    S = np.zeros((n, layout.n_groups))
    eg = layout.edge_group
    for e, (i, j) in enumerate(fld.edges):
        if eg[e] >= 0:
            S[i, eg[e]] += A[i, j]
            S[j, eg[e]] += A[j, i]
    op = np.diag(ZA.sum(axis=0)) - ZA
    return (-S + op @ G) / fld.area[:, None]
