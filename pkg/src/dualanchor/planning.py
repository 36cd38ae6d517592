"""Geodesic distances on an occupancy grid and the shortest-path expert."""
from __future__ import annotations

import heapq
import math

import numpy as np

from .worldsim import (FloorPlan, AgentPose, NavAction, TURN_ANGLE, segment_clear,
                       wrap_angle)

GRID_RES = 0.1
CLEARANCE = 0.3
LOS_CLEARANCE = 0.25
HEADING_TOLERANCE = TURN_ANGLE / 2  # 7.5 degrees
WAYPOINT_RADIUS = 0.3

SQRT2 = math.sqrt(2.0)


class NoPathError(RuntimeError):
    """No collision-free path connects the requested points."""


class OccupancyGrid:
    """Boolean free-space grid; cell (i, j) has center (x0 + (j+.5)res, y0 + (i+.5)res)."""

    def __init__(self, plan: FloorPlan, res: float = GRID_RES, clearance: float = CLEARANCE):
        b = plan.bounds
        self.res = res
        self.x0, self.y0 = b.x, b.y
        self.nx = int(math.ceil(b.w / res))
        self.ny = int(math.ceil(b.h / res))
        xs = self.x0 + (np.arange(self.nx) + 0.5) * res
        ys = self.y0 + (np.arange(self.ny) + 0.5) * res
        X, Y = np.meshgrid(xs, ys)
        free = ((X >= b.x + clearance) & (X <= b.x1 - clearance)
                & (Y >= b.y + clearance) & (Y <= b.y1 - clearance))
        for w in plan.walls:
            free &= ~((X > w.x - clearance) & (X < w.x1 + clearance)
                      & (Y > w.y - clearance) & (Y < w.y1 + clearance))
        self.free = free

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        j = min(max(int((x - self.x0) / self.res), 0), self.nx - 1)
        i = min(max(int((y - self.y0) / self.res), 0), self.ny - 1)
        return i, j

    def center(self, i: int, j: int) -> tuple[float, float]:
        return (self.x0 + (j + 0.5) * self.res, self.y0 + (i + 0.5) * self.res)

    def nearest_free(self, x: float, y: float) -> tuple[int, int]:
        i, j = self.cell_of(x, y)
        if self.free[i, j]:
            return i, j
        fi, fj = np.nonzero(self.free)
        if len(fi) == 0:
            raise NoPathError("grid has no free cells")
        cx = self.x0 + (fj + 0.5) * self.res
        cy = self.y0 + (fi + 0.5) * self.res
        k = int(np.argmin((cx - x) ** 2 + (cy - y) ** 2))
        return int(fi[k]), int(fj[k])


def grid_for(plan: FloorPlan, res: float = GRID_RES, clearance: float = CLEARANCE) -> OccupancyGrid:
    key = ("grid", res, clearance)
    if key not in plan._cache:
        plan._cache[key] = OccupancyGrid(plan, res, clearance)
    return plan._cache[key]


_NEIGHBORS = [(-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0),
              (-1, -1, SQRT2), (-1, 1, SQRT2), (1, -1, SQRT2), (1, 1, SQRT2)]


def astar(grid: OccupancyGrid, start: tuple[int, int], goal: tuple[int, int]) -> list[tuple[int, int]]:
    """8-connected A* with octile heuristic; diagonals may not cut blocked corners."""
    free = grid.free
    ny, nx = free.shape
    if start == goal:
        return [start]
    gi, gj = goal
    open_heap = [(0.0, 0.0, start)]
    g_cost = {start: 0.0}
    parent = {start: None}
    closed = set()
    while open_heap:
        _, g, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        if cur == goal:
            path = [cur]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return path[::-1]
        closed.add(cur)
        ci, cj = cur
        for di, dj, cost in _NEIGHBORS:
            ni, nj = ci + di, cj + dj
            if not (0 <= ni < ny and 0 <= nj < nx) or not free[ni, nj]:
                continue
            if di and dj and not (free[ci + di, cj] and free[ci, cj + dj]):
                continue
            nxt = (ni, nj)
            if nxt in closed:
                continue
            ng = g + cost
            if ng < g_cost.get(nxt, math.inf):
                g_cost[nxt] = ng
                parent[nxt] = cur
                ddi, ddj = abs(ni - gi), abs(nj - gj)
                h = (ddi + ddj) + (SQRT2 - 2.0) * min(ddi, ddj)
                heapq.heappush(open_heap, (ng + h, ng, nxt))
    raise NoPathError(f"no path from cell {start} to cell {goal}")


def smooth(plan: FloorPlan, points: list, clearance: float = LOS_CLEARANCE) -> list:
    """Greedy line-of-sight shortcutting: from each kept vertex jump to the furthest visible one."""
    if len(points) <= 2:
        return list(points)
    out = [points[0]]
    i = 0
    n = len(points)
    while i < n - 1:
        nxt = i + 1
        for j in range(n - 1, i + 1, -1):
            if segment_clear(plan, points[i], points[j], clearance):
                nxt = j
                break
        out.append(points[nxt])
        i = nxt
    return out


def polyline_length(points) -> float:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(p) < 2:
        return 0.0
    return float(np.hypot(*np.diff(p, axis=0).T).sum())


def shortest_path(plan: FloorPlan, a, b) -> list[tuple[float, float]]:
    """Smoothed A* polyline from a to b (endpoints included exactly)."""
    a = (float(a[0]), float(a[1]))
    b = (float(b[0]), float(b[1]))
    if a == b:
        return [a, b]
    for p in (a, b):
        if not plan.is_free(*p):
            raise NoPathError(f"point {p} is not in free space")
    grid = grid_for(plan)
    cells = astar(grid, grid.nearest_free(*a), grid.nearest_free(*b))
    pts = [a] + [grid.center(i, j) for i, j in cells] + [b]
    return smooth(plan, pts)


def geodesic(plan: FloorPlan, a, b) -> float:
    a = (float(a[0]), float(a[1]))
    b = (float(b[0]), float(b[1]))
    if a == b:
        return 0.0
    if segment_clear(plan, a, b, 0.0) and segment_clear(plan, a, b, LOS_CLEARANCE):
        return math.hypot(b[0] - a[0], b[1] - a[1])
    return polyline_length(shortest_path(plan, a, b))


def bearing_error(pose: AgentPose, target) -> float:
    bearing = math.atan2(target[1] - pose.y, target[0] - pose.x)
    return float(wrap_angle(bearing - pose.heading))


def steer(pose: AgentPose, target) -> NavAction:
    err = bearing_error(pose, target)
    if err > HEADING_TOLERANCE:
        return NavAction.TURN_LEFT
    if err < -HEADING_TOLERANCE:
        return NavAction.TURN_RIGHT
    return NavAction.MOVE_FORWARD


def nearest_segment(path, pose_xy, start_index: int = 0) -> int:
    """Index i of the path segment (i, i+1) closest to the point, searching from start_index."""
    p = np.asarray(path, dtype=np.float64)
    if len(p) < 2:
        return 0
    a = p[start_index:-1]
    b = p[start_index + 1:]
    d = b - a
    q = np.asarray(pose_xy, dtype=np.float64)
    l2 = np.maximum((d * d).sum(axis=1), 1e-12)
    t = np.clip(((q - a) * d).sum(axis=1) / l2, 0.0, 1.0)
    proj = a + t[:, None] * d
    dist = np.hypot(*(proj - q).T)
    return start_index + int(np.argmin(dist))


def expert_action(plan: FloorPlan, pose: AgentPose, path, goal, success_radius: float,
                  start_index: int = 0) -> NavAction:
    """Shortest-path expert: stop near the goal, otherwise steer to the next waypoint."""
    seg = nearest_segment(path, pose.xy, start_index)
    if math.hypot(goal[0] - pose.x, goal[1] - pose.y) <= success_radius and seg >= len(path) - 2:
        return NavAction.STOP
    target_idx = min(seg + 1, len(path) - 1)
    target = path[target_idx]
    if math.hypot(target[0] - pose.x, target[1] - pose.y) < WAYPOINT_RADIUS and target_idx < len(path) - 1:
        target = path[target_idx + 1]
    if not segment_clear(plan, pose.xy, target, 0.1):
        try:
            detour = shortest_path(plan, pose.xy, target)
            target = detour[1] if len(detour) > 2 else target
        except NoPathError:
            pass
    return steer(pose, target)


class PathFollower:
    """Stateful expert that walks a reference polyline vertex by vertex.

    Keeps the index of the current target vertex so that self-crossing routes are
    followed in order.  If a wall blocks the straight line to the target vertex
    it plans a detour with A* and follows that first.
    """

    def __init__(self, plan: FloorPlan, path, goal, success_radius: float):
        self.plan = plan
        self.path = [tuple(map(float, p)) for p in path]
        self.goal = (float(goal[0]), float(goal[1]))
        self.success_radius = success_radius
        self.index = 1 if len(self.path) > 1 else 0
        self._detour: list = []
        self._last_turn: NavAction | None = None

    def _advance(self, pose: AgentPose) -> None:
        while (self.index < len(self.path) - 1
               and math.hypot(self.path[self.index][0] - pose.x,
                              self.path[self.index][1] - pose.y) < WAYPOINT_RADIUS):
            self.index += 1
            self._detour = []
            self._last_turn = None

    def target(self, pose: AgentPose):
        self._advance(pose)
        target = self.path[self.index]
        while self._detour and math.hypot(self._detour[0][0] - pose.x,
                                          self._detour[0][1] - pose.y) < WAYPOINT_RADIUS:
            self._detour.pop(0)
        if self._detour:
            return self._detour[0]
        if not segment_clear(self.plan, pose.xy, target, 0.1):
            try:
                detour = shortest_path(self.plan, pose.xy, target)
            except NoPathError:
                return target
            self._detour = [p for p in detour[1:-1]]
            if self._detour:
                return self._detour[0]
        return target

    def act(self, pose: AgentPose) -> NavAction:
        target = self.target(pose)
        if (self.index >= len(self.path) - 1
                and math.hypot(self.goal[0] - pose.x, self.goal[1] - pose.y) <= self.success_radius):
            return NavAction.STOP
        # undoing the previous turn needs a full turn step of error, which stops
        # the left/right chatter when the bearing sits near the threshold
        err = bearing_error(pose, target)
        left_tol = TURN_ANGLE if self._last_turn == NavAction.TURN_RIGHT else HEADING_TOLERANCE
        right_tol = TURN_ANGLE if self._last_turn == NavAction.TURN_LEFT else HEADING_TOLERANCE
        if err > left_tol:
            a = NavAction.TURN_LEFT
        elif err < -right_tol:
            a = NavAction.TURN_RIGHT
        else:
            return NavAction.MOVE_FORWARD
        self._last_turn = a
        return a
