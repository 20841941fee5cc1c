"""Grid and trajectory files, plus occupancy rasterised from a box scene."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from ..errors import FormatError
from ..tensor_io import FORMAT_VERSION, read_json, read_tensor, write_json, write_tensor
from .grid import OccupancyGrid
from .motion import AgentTrajectory


def save_grid(grid: OccupancyGrid, path: str | Path) -> Path:
    """``<path>.dten`` (u8, 1 = occupied) next to ``<path>.json`` (cell size, origin)."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    write_tensor(grid.occupied.astype(np.uint8), p.with_suffix(".dten"))
    write_json({"format_version": FORMAT_VERSION, "cell_size": grid.cell, "origin": list(grid.origin),
                "shape": list(grid.shape)}, p.with_suffix(".json"))
    return p.with_suffix(".json")


def load_grid(path: str | Path) -> OccupancyGrid:
    p = Path(path)
    header = read_json(p.with_suffix(".json"))
    occ = read_tensor(p.with_suffix(".dten"))
    if occ.ndim != 2 or occ.dtype != np.uint8:
        raise FormatError("occupancy grid must be a 2-D u8 tensor")
    try:
        return OccupancyGrid(occ != 0, float(header["cell_size"]), tuple(header["origin"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"grid header needs cell_size and origin: {exc}") from exc


def save_trajectory(traj: AgentTrajectory, path: str | Path, extra: dict | None = None) -> Path:
    write_json({"format_version": FORMAT_VERSION, **traj.to_dict(), **(extra or {})}, path)
    return Path(path)


def load_trajectory(path: str | Path) -> AgentTrajectory:
    from .motion import replay

    data = read_json(path)
    try:
        x, y, k = data["start"]
        actions = list(data["actions"])
        step, turn = float(data["step"]), float(data["turn_deg"])
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"malformed trajectory file: {exc}") from exc
    start = (float(x), float(y), int(k))
    return AgentTrajectory(start, actions, replay(start, actions, step, turn), step, turn,
                           float(data.get("sensor_height", 1.2)), bool(data.get("complete", True)))


def occupancy_from_boxes(boxes, lo, hi, cell: float = 0.05, clearance: float = 0.2,
                         margin: float = 1.0) -> OccupancyGrid:
    """Box footprints inflated by ``clearance`` are occupied; the grid spans the bounds plus ``margin``."""
    x0, y0 = float(lo[0]) - margin, float(lo[1]) - margin
    w = int(math.ceil((float(hi[0]) + margin - x0) / cell))
    h = int(math.ceil((float(hi[1]) + margin - y0) / cell))
    xs = x0 + (np.arange(w) + 0.5) * cell
    ys = y0 + (np.arange(h) + 0.5) * cell
    occ = np.zeros((h, w), dtype=bool)
    for b in boxes:
        bx = (xs >= b.min[0] - clearance) & (xs <= b.max[0] + clearance)
        by = (ys >= b.min[1] - clearance) & (ys <= b.max[1] + clearance)
        occ |= by[:, None] & bx[None, :]
    return OccupancyGrid(occ, cell, (x0, y0))
