"""2-D occupancy grids: free-space components, the 8-connected move graph and A*."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse

from ..errors import ValidationError

SQRT2 = math.sqrt(2.0)
# (drow, dcol) for the 8 moves; orthogonal ones first
MOVES = ((0, 1), (1, 0), (0, -1), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1))


@dataclass
class OccupancyGrid:
    """``occupied[row, col]``; cell (row, col) spans x in origin.x + col*cell, y in origin.y + row*cell."""

    occupied: np.ndarray
    cell: float = 0.1
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        occ = np.asarray(self.occupied)
        if occ.ndim != 2 or occ.size == 0:
            raise ValidationError("occupancy grid must be a non-empty 2-D array")
        if self.cell <= 0:
            raise ValidationError("cell size must be positive")
        self.occupied = occ.astype(bool)
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def shape(self) -> tuple[int, int]:
        return self.occupied.shape

    @property
    def free(self) -> np.ndarray:
        return ~self.occupied

    def require_free(self) -> None:
        if not self.free.any():
            raise ValidationError("grid has no free cells")

    def cell_center(self, rc) -> np.ndarray:
        rc = np.asarray(rc, dtype=np.float64)
        return np.stack([self.origin[0] + (rc[..., 1] + 0.5) * self.cell,
                         self.origin[1] + (rc[..., 0] + 0.5) * self.cell], axis=-1)

    def cell_of(self, xy) -> tuple[int, int]:
        x, y = float(xy[0]), float(xy[1])
        return int(math.floor((y - self.origin[1]) / self.cell)), int(math.floor((x - self.origin[0]) / self.cell))

    def is_free_xy(self, xy) -> bool:
        r, c = self.cell_of(xy)
        h, w = self.shape
        return 0 <= r < h and 0 <= c < w and not self.occupied[r, c]


def largest_component(grid: OccupancyGrid) -> tuple[OccupancyGrid, float]:
    """Keep only the largest 4-connected free region; also return its share of all free cells.

    Equal-sized regions resolve to the one containing the first free cell in row-major order.
    """
    grid.require_free()
    labels, n = ndimage.label(grid.free)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    keep = int(np.argmax(sizes)) + 1
    ratio = float(sizes[keep - 1] / sizes.sum())
    return OccupancyGrid(labels != keep, grid.cell, grid.origin), ratio


def move_allowed(free: np.ndarray, r: int, c: int, dr: int, dc: int) -> bool:
    """Target in bounds and free; diagonal moves may not cut an occupied corner."""
    h, w = free.shape
    r2, c2 = r + dr, c + dc
    if not (0 <= r2 < h and 0 <= c2 < w) or not free[r2, c2]:
        return False
    if dr and dc:
        return bool(free[r + dr, c] and free[r, c + dc])
    return True


def move_graph(grid: OccupancyGrid) -> tuple[sparse.csr_matrix, np.ndarray]:
    """Sparse symmetric graph over all cells (row-major index) with metric edge lengths."""
    free = grid.free
    h, w = free.shape
    idx = np.arange(h * w).reshape(h, w)
    rows, cols, vals = [], [], []
    for dr, dc in MOVES:
        r0, r1 = max(0, -dr), h - max(0, dr)
        c0, c1 = max(0, -dc), w - max(0, dc)
        ok = free[r0:r1, c0:c1] & free[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        if dr and dc:
            ok &= free[r0 + dr:r1 + dr, c0:c1] & free[r0:r1, c0 + dc:c1 + dc]
        src = idx[r0:r1, c0:c1][ok]
        rows.append(src)
        cols.append(src + dr * w + dc)
        vals.append(np.full(src.size, (SQRT2 if dr and dc else 1.0) * grid.cell))
    g = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(h * w, h * w))
    return g, idx


def astar(grid: OccupancyGrid, start: tuple[int, int], goal: tuple[int, int]) -> tuple[float, list[tuple[int, int]]]:
    """Shortest 8-connected path length (metres) and its cells; raises if ``goal`` is unreachable."""
    free = grid.free
    for rc in (start, goal):
        if not (0 <= rc[0] < free.shape[0] and 0 <= rc[1] < free.shape[1]) or not free[rc]:
            raise ValidationError(f"cell {rc} is not free")
    cell = grid.cell

    def heur(rc):
        dr, dc = abs(rc[0] - goal[0]), abs(rc[1] - goal[1])
        return cell * (max(dr, dc) + (SQRT2 - 1.0) * min(dr, dc))

    g = {start: 0.0}
    parent = {start: None}
    heap = [(heur(start), 0.0, start)]
    closed = set()
    while heap:
        _, gc, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            path = [cur]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return gc, path[::-1]
        closed.add(cur)
        for dr, dc in MOVES:
            if not move_allowed(free, cur[0], cur[1], dr, dc):
                continue
            nxt = (cur[0] + dr, cur[1] + dc)
            ng = gc + (SQRT2 if dr and dc else 1.0) * cell
            if ng < g.get(nxt, math.inf) - 1e-12:
                g[nxt] = ng
                parent[nxt] = cur
                heapq.heappush(heap, (ng + heur(nxt), ng, nxt))
    raise ValidationError(f"no path from {start} to {goal}")
