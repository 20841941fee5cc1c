"""Brushfire places, geodesic basins and the place adjacency graph."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse.csgraph import dijkstra

from ..errors import ValidationError
from .grid import OccupancyGrid, astar, move_graph

EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class PlaceGraph:
    cells: list[tuple[int, int]]  # one grid cell per place
    positions: np.ndarray  # P x 2, metres
    edges: list[tuple[int, int, float]] = field(default_factory=list)
    basins: np.ndarray | None = None  # place index per cell, -1 on occupied cells

    @property
    def n(self) -> int:
        return len(self.cells)

    def to_dict(self) -> dict:
        return {"places": [{"id": i, "cell": list(c), "xy": [float(v) for v in p]}
                           for i, (c, p) in enumerate(zip(self.cells, self.positions))],
                "edges": [{"u": u, "v": v, "length": w} for u, v, w in self.edges]}


def brushfire(grid: OccupancyGrid) -> np.ndarray:
    """Chessboard distance (in cells) from each free cell to the nearest occupied cell or the grid border."""
    grid.require_free()
    padded = np.pad(grid.free, 1, constant_values=False)
    dist = ndimage.distance_transform_cdt(padded, metric="chessboard")
    return dist[1:-1, 1:-1].astype(np.int64)


def extract_places(grid: OccupancyGrid) -> PlaceGraph:
    """Local maxima of the brushfire field; an equal-valued plateau counts once.

    A plateau (8-connected cells of equal distance) is a maximum when no cell
    next to it has a larger value. Its place is the plateau cell closest to the
    plateau centroid, ties by row-major order. Places are numbered row-major.
    """
    dist = brushfire(grid)
    neigh_max = ndimage.maximum_filter(dist, footprint=EIGHT, mode="constant", cval=0)
    cells = []
    for v in np.unique(dist[dist > 0]):
        lab, n = ndimage.label(dist == v, structure=EIGHT)
        if n == 0:
            continue
        top = ndimage.maximum(neigh_max, lab, index=np.arange(1, n + 1))
        for k in np.flatnonzero(np.asarray(top) == v) + 1:
            rc = np.argwhere(lab == k)
            centroid = rc.mean(axis=0)
            d2 = ((rc - centroid) ** 2).sum(axis=1)
            best = rc[np.flatnonzero(d2 == d2.min())[0]]
            cells.append((int(best[0]), int(best[1])))
    cells.sort()
    return PlaceGraph(cells, grid.cell_center(np.array(cells, dtype=np.float64).reshape(-1, 2)))


def assign_basins(grid: OccupancyGrid, places: PlaceGraph) -> np.ndarray:
    """Index of the geodesically nearest place for every free cell (-1 elsewhere)."""
    g, idx = move_graph(grid)
    src = [int(idx[c]) for c in places.cells]
    if not src:
        raise ValidationError("no places to grow basins from")
    _, _, origin = dijkstra(g, directed=False, indices=src, min_only=True, return_predecessors=True)
    place_of = {s: i for i, s in enumerate(src)}
    basins = np.full(idx.size, -1, dtype=np.int64)
    reached = origin >= 0
    basins[reached] = [place_of[int(s)] for s in origin[reached]]
    for i, s in enumerate(src):
        basins[s] = i
    basins = basins.reshape(grid.shape)
    basins[grid.occupied] = -1
    return basins


def basin_adjacency(grid: OccupancyGrid, basins: np.ndarray) -> list[tuple[int, int]]:
    """Place pairs whose basins touch across any allowed move."""
    g, _ = move_graph(grid)
    coo = g.tocoo()
    flat = basins.ravel()
    a, b = flat[coo.row], flat[coo.col]
    keep = (a >= 0) & (b >= 0) & (a < b)
    return sorted(set(zip(a[keep].tolist(), b[keep].tolist())))


def build_place_graph(grid: OccupancyGrid, places: PlaceGraph | None = None) -> PlaceGraph:
    places = places or extract_places(grid)
    basins = assign_basins(grid, places)
    edges = []
    for u, v in basin_adjacency(grid, basins):
        length, _ = astar(grid, places.cells[u], places.cells[v])
        edges.append((u, v, float(length)))
    return PlaceGraph(places.cells, places.positions, edges, basins)
