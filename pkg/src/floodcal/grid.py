"""Cell field, latent-variable layout, incidence and localization masks.

Cells are the active raster cells in row-major order. Adjacency is
4-connected and the raster border is a closed wall. Edges are stored once,
as unordered pairs ``(i, j)`` with ``i < j``.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Iterable, Sequence

import numpy as np


class GridError(ValueError):
    """Raised for inconsistent raster inputs or latent assignments."""


@dataclass(frozen=True)
class DemGrid:
    """Elevation raster read from an ESRI ASCII grid."""

    elevation: np.ndarray  # (nrows, ncols), NaN where NODATA
    cellsize: float
    xllcorner: float = 0.0
    yllcorner: float = 0.0
    nodata_value: float | None = None

    @property
    def nodata_mask(self) -> np.ndarray:
        return np.isnan(self.elevation)

    @property
    def shape(self) -> tuple[int, int]:
        return self.elevation.shape


@dataclass(frozen=True, eq=False)
class CellField:
    rows: int
    cols: int
    spacing: float
    elevation: np.ndarray
    area: np.ndarray
    manning: np.ndarray
    index_grid: np.ndarray  # (rows, cols) -> active cell id, -1 if inactive
    edges: np.ndarray  # (E, 2), i < j

    @property
    def n_cells(self) -> int:
        return int(self.elevation.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def cell_rc(self) -> np.ndarray:
        """(N, 2) raster coordinates of every active cell."""
        r, c = np.nonzero(self.index_grid >= 0)
        return np.column_stack([r, c])

    def cell(self, r: int, c: int) -> int:
        k = int(self.index_grid[r, c])
        if k < 0:
            raise GridError(f"raster cell ({r}, {c}) is not active")
        return k

    def neighbors(self, i: int) -> list[int]:
        e = self.edges
        out = np.concatenate([e[e[:, 0] == i, 1], e[e[:, 1] == i, 0]])
        return sorted(int(x) for x in out)

    def adjacency(self) -> list[list[int]]:
        nb: list[list[int]] = [[] for _ in range(self.n_cells)]
        for i, j in self.edges:
            nb[i].append(int(j))
            nb[j].append(int(i))
        return [sorted(x) for x in nb]

    def edge_index(self, i: int, j: int) -> int:
        a, b = (i, j) if i < j else (j, i)
        lookup = self._edge_lookup()
        try:
            return lookup[(a, b)]
        except KeyError:
            raise GridError(f"cells {i} and {j} are not adjacent") from None

    def _edge_lookup(self) -> dict[tuple[int, int], int]:
        cache = self.__dict__.get("_lookup")
        if cache is None:
            cache = {(int(a), int(b)): k for k, (a, b) in enumerate(self.edges)}
            object.__setattr__(self, "_lookup", cache)
        return cache


def _as_cell_values(source, rows: int, cols: int, name: str) -> np.ndarray:
    arr = np.asarray(source, dtype=float)
    if arr.ndim == 0:
        return np.full((rows, cols), float(arr))
    if arr.size != rows * cols:
        raise GridError(
            f"{name} source has {arr.size} values but the raster has "
            f"{rows}x{cols} = {rows * cols} cells"
        )
    return arr.reshape(rows, cols)


def raster_edges(index_grid: np.ndarray) -> np.ndarray:
    """Unordered 4-connected pairs between active cells, sorted."""
    pairs = []
    right = (index_grid[:, :-1] >= 0) & (index_grid[:, 1:] >= 0)
    pairs.append(np.column_stack([index_grid[:, :-1][right], index_grid[:, 1:][right]]))
    down = (index_grid[:-1, :] >= 0) & (index_grid[1:, :] >= 0)
    pairs.append(np.column_stack([index_grid[:-1, :][down], index_grid[1:, :][down]]))
    edges = np.concatenate(pairs).astype(np.int64).reshape(-1, 2)
    edges.sort(axis=1)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return edges[order]


def build_grid(rows: int, cols: int, spacing: float, elevation=0.0, manning=0.02,
               active=None) -> CellField:
    """Build a raster cell field.

    ``elevation`` and ``manning`` may be scalars or arrays with ``rows*cols``
    values. NaN elevations, or cells where ``active`` is False, are dropped
    from the active set.
    """
    if rows <= 0 or cols <= 0:
        raise GridError(f"raster dimensions must be positive, got {rows}x{cols}")
    if spacing <= 0:
        raise GridError(f"spacing must be positive, got {spacing}")
    elev = _as_cell_values(elevation, rows, cols, "elevation")
    mann = _as_cell_values(manning, rows, cols, "manning")
    mask = ~np.isnan(elev)
    if active is not None:
        mask &= _as_cell_values(active, rows, cols, "active").astype(bool)
    if np.any(mann[mask] <= 0):
        raise GridError("manning coefficient must be positive on every active cell")

    index_grid = np.full((rows, cols), -1, dtype=np.int64)
    index_grid[mask] = np.arange(int(mask.sum()))
    n = int(mask.sum())
    return CellField(
        rows=rows,
        cols=cols,
        spacing=float(spacing),
        elevation=elev[mask].copy(),
        area=np.full(n, float(spacing) ** 2),
        manning=mann[mask].copy(),
        index_grid=index_grid,
        edges=raster_edges(index_grid),
    )


def load_dem_ascii(text: str) -> DemGrid:
    """Parse an ESRI ASCII grid.

    The first grid row in the file is the northernmost, which becomes
    raster row 0.
    """
    lines = text.splitlines()
    header: dict[str, float] = {}
    required = ("ncols", "nrows", "cellsize")
    known = {"ncols", "nrows", "xllcorner", "yllcorner", "xllcenter",
             "yllcenter", "cellsize", "nodata_value"}
    lineno = 0
    while lineno < len(lines):
        raw = lines[lineno].strip()
        if not raw:
            lineno += 1
            continue
        parts = raw.split()
        key = parts[0].lower()
        if key not in known:
            break
        if len(parts) != 2:
            raise GridError(f"line {lineno + 1}: malformed header entry {raw!r}")
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise GridError(f"line {lineno + 1}: non-numeric header value {raw!r}") from None
        lineno += 1
    for key in required:
        if key not in header:
            raise GridError(f"line {lineno + 1}: header is missing {key!r}")
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    if ncols <= 0 or nrows <= 0 or header["cellsize"] <= 0:
        raise GridError("header dimensions and cellsize must be positive")

    values: list[float] = []
    for k in range(lineno, len(lines)):
        for tok in lines[k].split():
            try:
                values.append(float(tok))
            except ValueError:
                raise GridError(f"line {k + 1}: non-numeric value {tok!r}") from None
    if len(values) != ncols * nrows:
        raise GridError(
            f"line {len(lines)}: expected {nrows}x{ncols} = {ncols * nrows} values, "
            f"found {len(values)}"
        )
    elev = np.array(values, dtype=float).reshape(nrows, ncols)
    nodata = header.get("nodata_value")
    if nodata is not None:
        elev[elev == nodata] = np.nan
    return DemGrid(
        elevation=elev,
        cellsize=header["cellsize"],
        xllcorner=header.get("xllcorner", header.get("xllcenter", 0.0)),
        yllcorner=header.get("yllcorner", header.get("yllcenter", 0.0)),
        nodata_value=nodata,
    )


def dump_dem_ascii(dem: DemGrid, nodata_value: float = -9999.0) -> str:
    nrows, ncols = dem.shape
    out = [
        f"ncols {ncols}",
        f"nrows {nrows}",
        f"xllcorner {dem.xllcorner!r}",
        f"yllcorner {dem.yllcorner!r}",
        f"cellsize {dem.cellsize!r}",
        f"NODATA_value {nodata_value!r}",
    ]
    vals = np.where(np.isnan(dem.elevation), nodata_value, dem.elevation)
    for row in vals:
        out.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# latent layout

@dataclass(frozen=True, eq=False)
class LatentLayout:
    """Edge -> latent assignment with sharing groups.

    ``edge_latent[e]`` is the latent index of edge ``e`` or -1 when the edge
    is a constant; ``edge_const[e]`` holds that constant (1 unless set).
    ``latent_group[k]`` maps latent ``k`` to its free parameter.
    """

    field: CellField
    edge_latent: np.ndarray
    edge_const: np.ndarray
    latent_group: np.ndarray
    n_groups: int
    latent_edges: np.ndarray = dc_field(repr=False)  # (K,) edge id per latent

    @property
    def n_latents(self) -> int:
        return int(self.latent_group.shape[0])

    @property
    def edge_group(self) -> np.ndarray:
        g = np.full(self.edge_latent.shape, -1, dtype=np.int64)
        has = self.edge_latent >= 0
        g[has] = self.latent_group[self.edge_latent[has]]
        return g

    def group_edges(self, s: int) -> np.ndarray:
        return np.flatnonzero(self.edge_group == s)

    def edge_multipliers(self, z) -> np.ndarray:
        """Multiplier applied to every edge flux for free vector ``z``."""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_groups,):
            raise GridError(f"expected {self.n_groups} free values, got shape {z.shape}")
        g = self.edge_group
        mult = self.edge_const.copy()
        has = g >= 0
        mult[has] = z[g[has]]
        return mult

    def latent_matrix(self, z) -> np.ndarray:
        """Dense N x N latent matrix (ones off the adjacency). Small fields only."""
        n = self.field.n_cells
        Z = np.ones((n, n))
        mult = self.edge_multipliers(z)
        i, j = self.field.edges.T
        Z[i, j] = mult
        Z[j, i] = mult
        return Z


def assign_latents(field: CellField, selected: Sequence[tuple[int, int]] = (),
                   sharing: Sequence[Sequence[int]] | None = None,
                   constants: dict[tuple[int, int], float] | None = None) -> LatentLayout:
    """Place latents on edges.

    ``selected`` lists cell pairs in latent-index order. ``sharing`` is a
    partition of the latent indices into groups; by default every latent is
    its own group. ``constants`` pins edges to fixed multipliers (0 = wall).
    """
    n_edges = field.n_edges
    edge_latent = np.full(n_edges, -1, dtype=np.int64)
    edge_const = np.ones(n_edges)
    latent_edges = np.empty(len(selected), dtype=np.int64)
    for k, (a, b) in enumerate(selected):
        e = field.edge_index(int(a), int(b))
        if edge_latent[e] >= 0:
            raise GridError(
                f"edge ({a}, {b}) selected as latent {edge_latent[e]} and again as {k}"
            )
        edge_latent[e] = k
        latent_edges[k] = e
    for (a, b), value in (constants or {}).items():
        e = field.edge_index(int(a), int(b))
        if edge_latent[e] >= 0:
            raise GridError(f"edge ({a}, {b}) is both latent {edge_latent[e]} and a constant")
        edge_const[e] = float(value)

    n_lat = len(selected)
    if sharing is None:
        latent_group = np.arange(n_lat, dtype=np.int64)
        n_groups = n_lat
    else:
        latent_group = np.full(n_lat, -1, dtype=np.int64)
        for s, members in enumerate(sharing):
            for k in members:
                if not 0 <= k < n_lat:
                    raise GridError(f"sharing group {s} names unknown latent {k}")
                if latent_group[k] >= 0:
                    raise GridError(f"latent {k} is in groups {latent_group[k]} and {s}")
                latent_group[k] = s
        if np.any(latent_group < 0):
            missing = np.flatnonzero(latent_group < 0)[:5].tolist()
            raise GridError(f"latents {missing} belong to no sharing group")
        n_groups = len(sharing)
    return LatentLayout(field, edge_latent, edge_const, latent_group, n_groups, latent_edges)


# edge selectors ------------------------------------------------------------

def vline_edges(field: CellField, rows: Iterable[int], col: int) -> list[tuple[int, int]]:
    """Edges crossing the vertical line between columns ``col`` and ``col+1``."""
    return [(field.cell(r, col), field.cell(r, col + 1)) for r in rows]


def hline_edges(field: CellField, cols: Iterable[int], row: int) -> list[tuple[int, int]]:
    """Edges crossing the horizontal line between rows ``row`` and ``row+1``."""
    return [(field.cell(row, c), field.cell(row + 1, c)) for c in cols]


def region_boundary_edges(field: CellField, labels) -> list[tuple[int, int]]:
    """Edges whose two cells carry different region labels."""
    lab = np.asarray(labels).reshape(field.rows, field.cols)[field.index_grid >= 0]
    e = field.edges
    keep = lab[e[:, 0]] != lab[e[:, 1]]
    return [(int(a), int(b)) for a, b in e[keep]]


def mask_edges(field: CellField, mask) -> list[tuple[int, int]]:
    """Edges with both cells inside a boolean raster mask."""
    m = np.asarray(mask, dtype=bool).reshape(field.rows, field.cols)[field.index_grid >= 0]
    e = field.edges
    keep = m[e[:, 0]] & m[e[:, 1]]
    return [(int(a), int(b)) for a, b in e[keep]]


# --------------------------------------------------------------------------
# incidence

@dataclass(frozen=True, eq=False)
class IncidenceStructure:
    """For every (cell, group), the latent edges of that cell in the group.

    Stored as flat COO triples ``(cell, group, edge)``; the same cell may
    appear several times for one group under sharing.
    """

    n_cells: int
    n_groups: int
    cell: np.ndarray
    group: np.ndarray
    edge: np.ndarray

    def edges_of(self, i: int, s: int) -> list[int]:
        sel = (self.cell == i) & (self.group == s)
        return sorted(int(e) for e in self.edge[sel])

    def matrix(self) -> np.ndarray:
        """Dense 0/1 matrix E (N x groups)."""
        E = np.zeros((self.n_cells, self.n_groups))
        E[self.cell, self.group] = 1.0
        return E

    def multiplicity(self) -> np.ndarray:
        M = np.zeros((self.n_cells, self.n_groups))
        np.add.at(M, (self.cell, self.group), 1.0)
        return M


def build_incidence(layout: LatentLayout) -> IncidenceStructure:
    eg = layout.edge_group
    lat = np.flatnonzero(eg >= 0)
    ends = layout.field.edges[lat]
    cell = np.concatenate([ends[:, 0], ends[:, 1]])
    edge = np.concatenate([lat, lat])
    group = eg[edge]
    order = np.lexsort((edge, group, cell))
    return IncidenceStructure(layout.field.n_cells, layout.n_groups,
                              cell[order], group[order], edge[order])


# --------------------------------------------------------------------------
# localization

@dataclass(frozen=True, eq=False)
class LocalizationMask:
    """Per-group localization domain and its one-ring outer boundary."""

    halfwidth: int
    domain: tuple[np.ndarray, ...]  # sorted cell ids per group
    boundary: tuple[np.ndarray, ...]

    @property
    def n_groups(self) -> int:
        return len(self.domain)

    def sizes(self) -> list[tuple[int, int]]:
        return [(len(d), len(b)) for d, b in zip(self.domain, self.boundary)]

    def total_dimension(self, with_boundary: bool = True) -> int:
        n = sum(len(d) for d in self.domain)
        if with_boundary:
            n += sum(len(b) for b in self.boundary)
        return n


def _ring(index_grid: np.ndarray, inside: np.ndarray) -> np.ndarray:
    grown = inside.copy()
    grown[1:, :] |= inside[:-1, :]
    grown[:-1, :] |= inside[1:, :]
    grown[:, 1:] |= inside[:, :-1]
    grown[:, :-1] |= inside[:, 1:]
    return grown & ~inside & (index_grid >= 0)


def build_localization(layout: LatentLayout, halfwidth: int) -> LocalizationMask:
    """Union of squares around each group edge, plus a one-cell ring.

    The square for an edge holds every cell whose centre lies within
    Chebyshev distance ``halfwidth`` of the edge midpoint, i.e. ``2*halfwidth``
    cells across the edge and ``2*halfwidth + 1`` along it.
    """
    if halfwidth < 1:
        raise GridError(f"localization halfwidth must be >= 1, got {halfwidth}")
    fld = layout.field
    rc = fld.cell_rc
    eg = layout.edge_group
    active = fld.index_grid >= 0
    domains, rings = [], []
    for s in range(layout.n_groups):
        ids = np.flatnonzero(eg == s)
        mid = 0.5 * (rc[fld.edges[ids, 0]] + rc[fld.edges[ids, 1]])
        inside = np.zeros((fld.rows, fld.cols), dtype=bool)
        # along each axis the covered cell range is [ceil(m - hw), floor(m + hw)]
        lo = np.ceil(mid - halfwidth).astype(np.int64)
        hi = np.floor(mid + halfwidth).astype(np.int64)
        lo = np.maximum(lo, 0)
        hi[:, 0] = np.minimum(hi[:, 0], fld.rows - 1)
        hi[:, 1] = np.minimum(hi[:, 1], fld.cols - 1)
        # 2-D difference array, then prefix sums
        diff = np.zeros((fld.rows + 1, fld.cols + 1), dtype=np.int64)
        np.add.at(diff, (lo[:, 0], lo[:, 1]), 1)
        np.add.at(diff, (lo[:, 0], hi[:, 1] + 1), -1)
        np.add.at(diff, (hi[:, 0] + 1, lo[:, 1]), -1)
        np.add.at(diff, (hi[:, 0] + 1, hi[:, 1] + 1), 1)
        inside = (diff.cumsum(0).cumsum(1)[:-1, :-1] > 0) & active
        domains.append(np.sort(fld.index_grid[inside]))
        rings.append(np.sort(fld.index_grid[_ring(fld.index_grid, inside)]))
    return LocalizationMask(int(halfwidth), tuple(domains), tuple(rings))
