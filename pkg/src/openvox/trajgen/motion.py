"""Tour polylines, Bezier smoothing and quantization to discrete agent actions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from .grid import OccupancyGrid, astar
from .places import PlaceGraph
from .postman import Tour

FORWARD = "move_forward"
LEFT = "turn_left"
RIGHT = "turn_right"
STEP = 0.25
TURN_DEG = 15.0
TURNS = int(round(360 / TURN_DEG))
SENSOR_HEIGHT = 1.2


@dataclass
class AgentTrajectory:
    start: tuple[float, float, int]  # x, y, yaw as an integer multiple of the turn angle
    actions: list[str]
    poses: list[tuple[float, float, int]] = field(default_factory=list)
    step: float = STEP
    turn_deg: float = TURN_DEG
    sensor_height: float = SENSOR_HEIGHT
    complete: bool = True

    def yaw_rad(self, k: int) -> float:
        return math.radians(k * self.turn_deg)

    def pose_array(self) -> np.ndarray:
        return np.array([(x, y, self.yaw_rad(k)) for x, y, k in self.poses])

    def to_dict(self) -> dict:
        return {"start": [self.start[0], self.start[1], self.start[2]], "actions": self.actions,
                "poses": [[x, y, self.yaw_rad(k)] for x, y, k in self.poses],
                "yaw_index": [k for _, _, k in self.poses], "step": self.step, "turn_deg": self.turn_deg,
                "sensor_height": self.sensor_height, "complete": self.complete}


def apply_action(pose: tuple[float, float, int], action: str, step: float = STEP,
                 turn_deg: float = TURN_DEG) -> tuple[float, float, int]:
    x, y, k = pose
    turns = int(round(360 / turn_deg))
    if action == FORWARD:
        th = math.radians(k * turn_deg)
        return x + step * math.cos(th), y + step * math.sin(th), k
    if action == LEFT:
        return x, y, (k + 1) % turns
    if action == RIGHT:
        return x, y, (k - 1) % turns
    raise ValidationError(f"unknown action {action!r}")


def replay(start: tuple[float, float, int], actions: list[str], step: float = STEP,
           turn_deg: float = TURN_DEG) -> list[tuple[float, float, int]]:
    poses = [start]
    for a in actions:
        poses.append(apply_action(poses[-1], a, step, turn_deg))
    return poses


def tour_polyline(grid: OccupancyGrid, graph: PlaceGraph, tour: Tour) -> np.ndarray:
    """Cell-centre waypoints of the A* paths along the tour, with collinear runs collapsed."""
    if len(tour.walk) < 2:
        return grid.cell_center(np.array(graph.cells[:1], dtype=np.float64).reshape(-1, 2))
    cells: list[tuple[int, int]] = []
    for a, b in zip(tour.walk, tour.walk[1:]):
        _, path = astar(grid, graph.cells[a], graph.cells[b])
        cells += path if not cells else path[1:]
    return simplify(grid.cell_center(np.array(cells, dtype=np.float64)))


def simplify(points: np.ndarray) -> np.ndarray:
    """Drop interior points lying on the straight line through their neighbours."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        return pts
    keep = [0]
    for i in range(1, len(pts) - 1):
        d1 = pts[i] - pts[keep[-1]]
        d2 = pts[i + 1] - pts[i]
        if np.linalg.norm(d1) == 0 or abs(d1[0] * d2[1] - d1[1] * d2[0]) > 1e-9 or d1 @ d2 < 0:
            keep.append(i)
    keep.append(len(pts) - 1)
    return pts[keep]


def _segment_free(grid: OccupancyGrid, pts: np.ndarray) -> bool:
    return all(grid.is_free_xy(p) for p in pts)


def bezier_smooth(points: np.ndarray, grid: OccupancyGrid | None = None, spacing: float = 0.05) -> np.ndarray:
    """Piecewise cubic Bezier through the waypoints, sampled about every ``spacing`` metres.

    Tangent at an interior waypoint follows its two neighbours; the control points
    sit a third of the segment length along the tangents. A span whose samples
    leave free space is replaced by its straight segment.
    """
    p = np.asarray(points, dtype=np.float64)
    if len(p) < 2:
        return p.copy()
    n = len(p)
    tang = np.zeros_like(p)
    for i in range(n):
        d = p[min(i + 1, n - 1)] - p[max(i - 1, 0)]
        nd = np.linalg.norm(d)
        tang[i] = d / nd if nd > 0 else 0.0
    out = [p[:1]]
    for i in range(n - 1):
        a, b = p[i], p[i + 1]
        seg = np.linalg.norm(b - a)
        if seg == 0:
            continue
        m = max(2, int(math.ceil(seg / spacing)) + 1)
        t = np.linspace(0.0, 1.0, m)[:, None]
        c1, c2 = a + tang[i] * seg / 3, b - tang[i + 1] * seg / 3
        curve = (1 - t) ** 3 * a + 3 * (1 - t) ** 2 * t * c1 + 3 * (1 - t) * t ** 2 * c2 + t ** 3 * b
        if grid is not None and not _segment_free(grid, curve):
            curve = (1 - t) * a + t * b
        out.append(curve[1:])
    return np.concatenate(out)


def _snap_yaw(angle: float, turn_deg: float) -> int:
    return int(round(math.degrees(angle) / turn_deg)) % int(round(360 / turn_deg))


def _turns_between(k0: int, k1: int, turns: int) -> list[str]:
    d = (k1 - k0) % turns
    if d == 0:
        return []
    # a half turn goes left
    return [LEFT] * d if d <= turns // 2 else [RIGHT] * (turns - d)


def quantize(curve: np.ndarray, grid: OccupancyGrid | None = None, start_yaw: int | None = None,
             step: float = STEP, turn_deg: float = TURN_DEG, lookahead: float = STEP,
             max_steps: int | None = None) -> AgentTrajectory:
    """Follow ``curve`` with discrete actions by chasing a carrot ``lookahead`` metres ahead.

    Headings are snapped to the turn lattice. When the forward cell is blocked
    the nearest lattice heading that is free is tried instead. Stops within
    half a step of the curve's end, or flags the trajectory incomplete at the
    step cap.
    """
    c = np.asarray(curve, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 2 or len(c) == 0:
        raise ValidationError("curve must be a non-empty N x 2 array")
    turns = int(round(360 / turn_deg))
    seglen = np.linalg.norm(np.diff(c, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seglen)])
    total = arc[-1]
    if total > 0:
        # dense resampling so that nearest-sample progress tracking is accurate
        fine = np.linspace(0.0, total, int(math.ceil(total / (step / 25))) + 1)
        c = np.stack([np.interp(fine, arc, c[:, 0]), np.interp(fine, arc, c[:, 1])], axis=1)
        arc = fine
    if start_yaw is None:
        nxt = np.flatnonzero(arc > 1e-9)
        start_yaw = _snap_yaw(math.atan2(*(c[nxt[0]] - c[0])[::-1]), turn_deg) if nxt.size else 0
    pose = (float(c[0, 0]), float(c[0, 1]), int(start_yaw) % turns)
    if grid is not None and not grid.is_free_xy(pose[:2]):
        raise ValidationError("trajectory starts in occupied space")
    max_steps = max_steps or int(20 * (total / step + 2 * turns)) + 100
    actions: list[str] = []
    poses = [pose]
    progress = 0.0

    def emit(a):
        nonlocal pose
        pose = apply_action(pose, a, step, turn_deg)
        actions.append(a)
        poses.append(pose)

    def free_step(k):
        th = math.radians(k * turn_deg)
        x, y = pose[0], pose[1]
        if grid is None:
            return True
        return all(grid.is_free_xy((x + f * step * math.cos(th), y + f * step * math.sin(th))) for f in (0.5, 1.0))

    while len(actions) < max_steps:
        here = np.array(pose[:2])
        # closest curve point at or beyond the current progress, within a short window
        window = (arc >= progress - 1e-9) & (arc <= progress + 4 * step)
        cand = np.flatnonzero(window)
        if cand.size:
            j = cand[np.argmin(np.linalg.norm(c[cand] - here, axis=1))]
            progress = max(progress, arc[j])
        if progress >= total - 1e-9 or total - progress < step / 2:
            if np.linalg.norm(c[-1] - here) <= step / 2 + 1e-9:
                return AgentTrajectory(poses[0], actions, poses, step, turn_deg)
        target_s = min(progress + lookahead, total)
        target = np.array([np.interp(target_s, arc, c[:, 0]), np.interp(target_s, arc, c[:, 1])])
        if np.linalg.norm(target - here) < 1e-9:
            target = c[-1]
        if np.linalg.norm(target - here) <= step / 2 and target_s >= total - 1e-9:
            return AgentTrajectory(poses[0], actions, poses, step, turn_deg)
        want = _snap_yaw(math.atan2(target[1] - here[1], target[0] - here[0]), turn_deg)
        heading = None
        for off in range(turns // 2 + 1):
            for k in ((want + off) % turns, (want - off) % turns):
                if free_step(k):
                    heading = k
                    break
            if heading is not None:
                break
        if heading is None:
            break
        for a in _turns_between(pose[2], heading, turns):
            emit(a)
        emit(FORWARD)
    return AgentTrajectory(poses[0], actions, poses, step, turn_deg, complete=False)


def smooth_trajectory(grid: OccupancyGrid, graph: PlaceGraph, tour: Tour, spacing: float = 0.05) -> AgentTrajectory:
    curve = bezier_smooth(tour_polyline(grid, graph, tour), grid, spacing)
    return quantize(curve, grid)


def camera_poses(traj: AgentTrajectory) -> list[np.ndarray]:
    """Camera-to-world 4x4 poses (x right, y down, z forward) looking level along each yaw."""
    out = []
    for x, y, k in traj.poses:
        th = traj.yaw_rad(k)
        fwd = np.array([math.cos(th), math.sin(th), 0.0])
        right = np.array([math.sin(th), -math.cos(th), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        pose = np.eye(4)
        pose[:3, 0], pose[:3, 1], pose[:3, 2] = right, down, fwd
        pose[:3, 3] = (x, y, traj.sensor_height)
        out.append(pose)
    return out
