"""Continuous 2D floor-plan world: kinematics and ray-cast observations.

Coordinates are meters, headings are radians measured counter-clockwise from
the +x axis.  Walls are axis-aligned rectangles; landmarks are disks that
block rays but not motion.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TURN_ANGLE = math.pi / 12  # 15 degrees
FORWARD_STEP = 0.25
CONTACT_MARGIN = 0.02

NUM_RAYS = 24
FOV = math.pi / 2
MAX_RANGE = 5.0

TWO_PI = 2.0 * math.pi


class InputError(ValueError):
    """Raised when an operation receives an argument that violates its contract."""


class NavAction(enum.IntEnum):
    MOVE_FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


@dataclass(frozen=True)
class Wall:
    x: float
    y: float
    w: float
    h: float

    @property
    def x1(self) -> float:
        return self.x + self.w

    @property
    def y1(self) -> float:
        return self.y + self.h

    def contains(self, px: float, py: float) -> bool:
        return self.x < px < self.x1 and self.y < py < self.y1


@dataclass(frozen=True)
class Landmark:
    id: str
    category: int
    cx: float
    cy: float
    r: float


@dataclass(eq=False)
class FloorPlan:
    id: str
    bounds: Wall
    walls: tuple[Wall, ...] = ()
    landmarks: tuple[Landmark, ...] = ()
    # planner caches, keyed by clearance; not part of the plan's identity
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.walls = tuple(self.walls)
        self.landmarks = tuple(self.landmarks)
        self._wall_arr = np.array([[w.x, w.y, w.x1, w.y1] for w in self.walls],
                                  dtype=np.float64).reshape(-1, 4)
        self._lm_arr = np.array([[lm.cx, lm.cy, lm.r] for lm in self.landmarks],
                                dtype=np.float64).reshape(-1, 3)
        self._lm_cat = np.array([lm.category for lm in self.landmarks], dtype=np.int64)

    def validate(self, vocab_size: int = 16) -> None:
        ids = [lm.id for lm in self.landmarks]
        if len(set(ids)) != len(ids):
            raise InputError(f"plan {self.id}: duplicate landmark ids")
        for lm in self.landmarks:
            if not 0 <= lm.category < vocab_size:
                raise InputError(f"landmark {lm.id}: category {lm.category} out of range")
            if not self.is_free(lm.cx, lm.cy):
                raise InputError(f"landmark {lm.id}: center not in free space")

    def in_bounds(self, x: float, y: float) -> bool:
        b = self.bounds
        return b.x <= x <= b.x1 and b.y <= y <= b.y1

    def is_free(self, x: float, y: float) -> bool:
        if not self.in_bounds(x, y):
            return False
        if len(self.walls) == 0:
            return True
        a = self._wall_arr
        inside = (a[:, 0] < x) & (x < a[:, 2]) & (a[:, 1] < y) & (y < a[:, 3])
        return not bool(inside.any())

    def landmark_by_category(self, category: int) -> Landmark | None:
        for lm in self.landmarks:
            if lm.category == category:
                return lm
        return None

    # -- serialization --------------------------------------------------
    def to_dict(self) -> dict:
        b = self.bounds
        return {
            "id": self.id,
            "bounds": {"x": b.x, "y": b.y, "w": b.w, "h": b.h},
            "walls": [{"x": w.x, "y": w.y, "w": w.w, "h": w.h} for w in self.walls],
            "landmarks": [{"id": lm.id, "category": lm.category, "cx": lm.cx,
                           "cy": lm.cy, "r": lm.r} for lm in self.landmarks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FloorPlan":
        try:
            plan = cls(
                id=str(d["id"]),
                bounds=Wall(**{k: float(d["bounds"][k]) for k in "xywh"}),
                walls=tuple(Wall(**{k: float(w[k]) for k in "xywh"}) for w in d["walls"]),
                landmarks=tuple(Landmark(id=str(lm["id"]), category=int(lm["category"]),
                                         cx=float(lm["cx"]), cy=float(lm["cy"]), r=float(lm["r"]))
                                for lm in d["landmarks"]),
            )
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed floor plan: {exc}") from exc
        return plan


def save_plans(plans, path) -> None:
    with open(path, "w") as fh:
        for plan in plans:
            fh.write(json.dumps(plan.to_dict(), sort_keys=True) + "\n")


def load_plans(path) -> dict[str, FloorPlan]:
    plans = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            plan = FloorPlan.from_dict(json.loads(line))
            plans[plan.id] = plan
    return plans


@dataclass(frozen=True)
class AgentPose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", self.heading % TWO_PI)

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.heading]


@dataclass(frozen=True)
class Observation:
    """Egocentric ray scan; ray 0 is the leftmost ray of the field of view."""

    depth: np.ndarray  # (W_o,) float64 in (0, R_max]
    category: np.ndarray  # (W_o,) int64, -1 for no landmark

    def __len__(self) -> int:
        return len(self.depth)

    def categories(self) -> set[int]:
        return {int(c) for c in self.category if c >= 0}

    def has_category(self, category: int) -> bool:
        return bool((self.category == category).any())

    def to_wire(self) -> list:
        return [[float(d), (int(c) if c >= 0 else None)]
                for d, c in zip(self.depth, self.category)]

    @classmethod
    def from_wire(cls, rays) -> "Observation":
        depth = np.array([float(r[0]) for r in rays], dtype=np.float64)
        cat = np.array([-1 if r[1] is None else int(r[1]) for r in rays], dtype=np.int64)
        return cls(depth, cat)


@dataclass
class SensorConfig:
    num_rays: int = NUM_RAYS
    fov: float = FOV
    max_range: float = MAX_RANGE

    def ray_angles(self, heading: float) -> np.ndarray:
        i = np.arange(self.num_rays)
        return heading + self.fov / 2 - (i + 0.5) * self.fov / self.num_rays


DEFAULT_SENSOR = SensorConfig()


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return -((-a + math.pi) % TWO_PI - math.pi)


def check_pose(plan: FloorPlan, pose: AgentPose) -> None:
    if not (math.isfinite(pose.x) and math.isfinite(pose.y)):
        raise InputError("pose is not finite")
    if not plan.is_free(pose.x, pose.y):
        raise InputError(f"pose ({pose.x:.3f}, {pose.y:.3f}) is outside free space")


def _ray_box_hits(ox, oy, dx, dy, boxes):
    """Entry distance of rays (ox,oy)+t(dx,dy) into each box; inf where missed.

    dx, dy: (R,) arrays; boxes: (M, 4) [x0, y0, x1, y1].  Returns (R, M).
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_x = 1.0 / dx[:, None]
        inv_y = 1.0 / dy[:, None]
        tx0 = (boxes[None, :, 0] - ox) * inv_x
        tx1 = (boxes[None, :, 2] - ox) * inv_x
        ty0 = (boxes[None, :, 1] - oy) * inv_y
        ty1 = (boxes[None, :, 3] - oy) * inv_y
    # parallel rays: inside slab -> (-inf, inf), outside -> empty
    par_x = dx[:, None] == 0
    par_y = dy[:, None] == 0
    in_x = (boxes[None, :, 0] <= ox) & (ox <= boxes[None, :, 2])
    in_y = (boxes[None, :, 1] <= oy) & (oy <= boxes[None, :, 3])
    tx_lo = np.where(par_x, np.where(in_x, -np.inf, np.inf), np.minimum(tx0, tx1))
    tx_hi = np.where(par_x, np.where(in_x, np.inf, -np.inf), np.maximum(tx0, tx1))
    ty_lo = np.where(par_y, np.where(in_y, -np.inf, np.inf), np.minimum(ty0, ty1))
    ty_hi = np.where(par_y, np.where(in_y, np.inf, -np.inf), np.maximum(ty0, ty1))
    t_enter = np.maximum(tx_lo, ty_lo)
    t_exit = np.minimum(tx_hi, ty_hi)
    hit = (t_enter <= t_exit) & (t_exit >= 0)
    return np.where(hit, np.maximum(t_enter, 0.0), np.inf)


def _ray_bounds_exit(ox, oy, dx, dy, b: Wall):
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(dx > 0, (b.x1 - ox) / dx, np.where(dx < 0, (b.x - ox) / dx, np.inf))
        ty = np.where(dy > 0, (b.y1 - oy) / dy, np.where(dy < 0, (b.y - oy) / dy, np.inf))
    return np.maximum(np.minimum(tx, ty), 0.0)


def _ray_disk_hits(ox, oy, dx, dy, disks):
    """Distance to the first intersection with each disk; inf where missed."""
    cx = disks[None, :, 0] - ox
    cy = disks[None, :, 1] - oy
    r = disks[None, :, 2]
    proj = cx * dx[:, None] + cy * dy[:, None]
    c2 = cx * cx + cy * cy - r * r
    disc = proj * proj - c2
    sq = np.sqrt(np.maximum(disc, 0.0))
    t_near = proj - sq
    inside = c2 <= 0
    t = np.where(inside, 0.0, t_near)
    hit = (disc >= 0) & ((t_near >= 0) | inside)
    return np.where(hit, t, np.inf)


def cast_rays(plan: FloorPlan, x: float, y: float, angles: np.ndarray,
              include_landmarks: bool = True):
    """Return (distance, landmark index or -1) of the first hit for each ray."""
    dx = np.cos(angles)
    dy = np.sin(angles)
    dist = _ray_bounds_exit(x, y, dx, dy, plan.bounds)
    if len(plan.walls):
        dist = np.minimum(dist, _ray_box_hits(x, y, dx, dy, plan._wall_arr).min(axis=1))
    idx = np.full(len(angles), -1, dtype=np.int64)
    if include_landmarks and len(plan.landmarks):
        td = _ray_disk_hits(x, y, dx, dy, plan._lm_arr)
        best = td.argmin(axis=1)
        tbest = td[np.arange(len(angles)), best]
        closer = tbest < dist
        dist = np.where(closer, tbest, dist)
        idx = np.where(closer, best, -1)
    return dist, idx


def step(plan: FloorPlan, pose: AgentPose, action: NavAction) -> AgentPose:
    """Apply one discrete action; forward motion stops short of walls."""
    check_pose(plan, pose)
    action = NavAction(action)
    if action == NavAction.STOP:
        return pose
    if action == NavAction.TURN_LEFT:
        return AgentPose(pose.x, pose.y, pose.heading + TURN_ANGLE)
    if action == NavAction.TURN_RIGHT:
        return AgentPose(pose.x, pose.y, pose.heading - TURN_ANGLE)
    free, _ = cast_rays(plan, pose.x, pose.y, np.array([pose.heading]), include_landmarks=False)
    advance = min(FORWARD_STEP, max(0.0, float(free[0]) - CONTACT_MARGIN))
    return AgentPose(pose.x + advance * math.cos(pose.heading),
                     pose.y + advance * math.sin(pose.heading), pose.heading)


def observe(plan: FloorPlan, pose: AgentPose, sensor: SensorConfig = DEFAULT_SENSOR) -> Observation:
    """Ray-cast scan over the field of view centered on the heading."""
    check_pose(plan, pose)
    angles = sensor.ray_angles(pose.heading)
    dist, idx = cast_rays(plan, pose.x, pose.y, angles)
    depth = np.clip(dist, 1e-3, sensor.max_range)
    beyond = dist > sensor.max_range
    cat = np.where((idx >= 0) & ~beyond, plan._lm_cat[np.maximum(idx, 0)] if len(plan.landmarks) else -1, -1)
    return Observation(depth.astype(np.float64), cat.astype(np.int64))


def segment_clear(plan: FloorPlan, a, b, clearance: float = 0.0) -> bool:
    """True when segment a->b avoids every wall inflated by `clearance` and stays in bounds."""
    ax, ay = a
    bx, by = b
    bnd = plan.bounds
    for px, py in ((ax, ay), (bx, by)):
        if not (bnd.x + clearance <= px <= bnd.x1 - clearance
                and bnd.y + clearance <= py <= bnd.y1 - clearance):
            return False
    if not len(plan.walls):
        return True
    boxes = plan._wall_arr + np.array([-clearance, -clearance, clearance, clearance])
    length = math.hypot(bx - ax, by - ay)
    if length == 0:
        inside = ((boxes[:, 0] < ax) & (ax < boxes[:, 2]) & (boxes[:, 1] < ay) & (ay < boxes[:, 3]))
        return not bool(inside.any())
    t = _ray_box_hits(ax, ay, np.array([(bx - ax) / length]), np.array([(by - ay) / length]), boxes)
    return bool((t[0] > length).all())
