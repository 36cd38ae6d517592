"""Seeded generation of floor plans and instruction-following episodes."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grammar import GenerationError, Instruction, generate, vocab_size
from .planning import CLEARANCE, NoPathError, geodesic, grid_for, polyline_length, shortest_path
from .worldsim import AgentPose, FloorPlan, Landmark, Wall

SIZE = 25.0
WALL_THICKNESS = 0.2
APPROACH_GAP = 0.4  # approach point distance from a landmark's surface
MIN_EPISODE_LENGTH = 3.85
MAX_EPISODE_LENGTH = 21.04


@dataclass(frozen=True)
class WorldConfig:
    size: float = SIZE
    n_walls: int = 6
    n_landmarks: int = 11
    min_landmark_sep: float = 3.0
    route_hops: tuple[int, int] = (2, 4)
    hop_range: tuple[float, float] = (2.5, 7.0)


@dataclass
class EpisodeSpec:
    episode_id: str
    plan_id: str
    start: AgentPose
    goal: tuple[float, float]
    reference_path: list
    geodesic_length: float
    instruction: Instruction
    route: tuple[str, ...] = ()

    @property
    def path_length(self) -> float:
        return polyline_length(self.reference_path)

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "world_id": self.plan_id,
            "start": self.start.to_list(),
            "goal": list(self.goal),
            "reference_path": [list(p) for p in self.reference_path],
            "geodesic_length": self.geodesic_length,
            "instruction": self.instruction.to_dict(),
            "route": list(self.route),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeSpec":
        return cls(
            episode_id=d["episode_id"], plan_id=d["world_id"], start=AgentPose(*d["start"]),
            goal=tuple(d["goal"]), reference_path=[tuple(p) for p in d["reference_path"]],
            geodesic_length=float(d["geodesic_length"]),
            instruction=Instruction.from_dict(d["instruction"]), route=tuple(d.get("route", ())),
        )


def _random_walls(rng, cfg: WorldConfig) -> list[Wall]:
    walls = []
    s = cfg.size
    for _ in range(cfg.n_walls):
        length = rng.uniform(4.0, 9.0)
        if rng.random() < 0.5:
            x = rng.uniform(2.0, s - 2.0 - length)
            y = rng.uniform(3.0, s - 3.0)
            walls.append(Wall(round(x, 2), round(y, 2), round(length, 2), WALL_THICKNESS))
        else:
            x = rng.uniform(3.0, s - 3.0)
            y = rng.uniform(2.0, s - 2.0 - length)
            walls.append(Wall(round(x, 2), round(y, 2), WALL_THICKNESS, round(length, 2)))
    return walls


def _main_component(plan: FloorPlan) -> np.ndarray:
    from scipy import ndimage

    grid = grid_for(plan)
    labels, n = ndimage.label(grid.free, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros_like(grid.free)
    sizes = ndimage.sum(grid.free, labels, index=np.arange(1, n + 1))
    return labels == (1 + int(np.argmax(sizes)))


def generate_plan(plan_id: str, seed: int, cfg: WorldConfig = WorldConfig()) -> FloorPlan:
    rng = np.random.default_rng(seed)
    bounds = Wall(0.0, 0.0, cfg.size, cfg.size)
    for _ in range(100):
        walls = _random_walls(rng, cfg)
        bare = FloorPlan(plan_id, bounds, walls, ())
        comp = _main_component(bare)
        grid = grid_for(bare)
        if comp.sum() < 0.6 * grid.free.size:
            continue
        cats = rng.permutation(vocab_size())[: cfg.n_landmarks]
        landmarks = []
        tries = 0
        while len(landmarks) < cfg.n_landmarks and tries < 2000:
            tries += 1
            r = round(float(rng.uniform(0.25, 0.45)), 2)
            x = round(float(rng.uniform(1.5, cfg.size - 1.5)), 2)
            y = round(float(rng.uniform(1.5, cfg.size - 1.5)), 2)
            i, j = grid.cell_of(x, y)
            if not comp[i, j]:
                continue
            if any(w.x - r - 0.6 < x < w.x1 + r + 0.6 and w.y - r - 0.6 < y < w.y1 + r + 0.6
                   for w in walls):
                continue
            if any(math.hypot(x - lm.cx, y - lm.cy) < cfg.min_landmark_sep for lm in landmarks):
                continue
            k = len(landmarks)
            landmarks.append(Landmark(f"{plan_id}-lm{k}", int(cats[k]), x, y, r))
        if len(landmarks) < cfg.n_landmarks:
            continue
        plan = FloorPlan(plan_id, bounds, walls, landmarks)
        plan._cache.update(bare._cache)
        plan._main = comp
        plan.validate(vocab_size())
        return plan
    raise RuntimeError(f"could not generate plan {plan_id} from seed {seed}")


def _reachable(plan: FloorPlan, x: float, y: float) -> bool:
    grid = grid_for(plan)
    if not plan.is_free(x, y):
        return False
    i, j = grid.cell_of(x, y)
    comp = getattr(plan, "_main", None)
    if comp is None:
        comp = _main_component(plan)
        plan._main = comp
    return bool(grid.free[i, j] and comp[i, j])


def _approach_point(plan: FloorPlan, lm: Landmark, toward, rng):
    base = math.atan2(toward[1] - lm.cy, toward[0] - lm.cx)
    dist = lm.r + APPROACH_GAP
    for off in [0.0] + list(rng.permutation(np.linspace(-math.pi, math.pi, 16, endpoint=False))):
        a = base + off
        p = (lm.cx + dist * math.cos(a), lm.cy + dist * math.sin(a))
        if _reachable(plan, *p) and min(
                math.hypot(p[0] - o.cx, p[1] - o.cy) - o.r for o in plan.landmarks if o is not lm) > 1.5:
            return p
    return None


def generate_episode(plan: FloorPlan, episode_id: str, seed: int,
                     cfg: WorldConfig = WorldConfig(), vary_text: bool = True,
                     validate: bool = True) -> EpisodeSpec:
    """Route through 2-4 landmarks; the reference path visits an approach point at each.

    With validate=True the episode is kept only if the expert, followed to its
    STOP, completes every sub-goal of the instruction in order.
    """
    rng = np.random.default_rng(seed)
    lms = list(plan.landmarks)
    for _ in range(200):
        hops = int(rng.integers(cfg.route_hops[0], cfg.route_hops[1] + 1))
        first = lms[int(rng.integers(len(lms)))]
        route = [first]
        while len(route) < hops:
            prev = route[-1]
            cands = [lm for lm in lms if lm not in route
                     and cfg.hop_range[0] <= math.hypot(lm.cx - prev.cx, lm.cy - prev.cy) <= cfg.hop_range[1]]
            if not cands:
                break
            route.append(cands[int(rng.integers(len(cands)))])
        if len(route) < 2:
            continue
        a = rng.uniform(0, 2 * math.pi)
        d0 = rng.uniform(2.5, 5.0)
        sx, sy = round(first.cx + d0 * math.cos(a), 3), round(first.cy + d0 * math.sin(a), 3)
        if not _reachable(plan, sx, sy):
            continue
        if min(math.hypot(sx - o.cx, sy - o.cy) - o.r for o in lms) < 1.5:
            continue
        waypoints = [(sx, sy)]
        ok = True
        for lm in route:
            p = _approach_point(plan, lm, waypoints[-1], rng)
            if p is None:
                ok = False
                break
            waypoints.append(p)
        if not ok:
            continue
        try:
            path = [waypoints[0]]
            for p0, p1 in zip(waypoints[:-1], waypoints[1:]):
                path.extend(shortest_path(plan, p0, p1)[1:])
            goal = waypoints[-1]
            l = geodesic(plan, waypoints[0], goal)
        except NoPathError:
            continue
        if not MIN_EPISODE_LENGTH <= l <= MAX_EPISODE_LENGTH:
            continue
        if polyline_length(path) > 2.5 * l + 4.0:
            continue
        try:
            instr = generate(plan, path, int(rng.integers(1 << 31)) if vary_text else None)
        except GenerationError:
            continue
        if instr.subgoals[-1].verb != "STOP_AT":
            continue
        start = AgentPose(sx, sy, float(rng.uniform(0, 2 * math.pi)))
        ep = EpisodeSpec(episode_id, plan.id, start, goal, path, l, instr,
                         tuple(lm.id for lm in route))
        if validate and not expert_completes(plan, ep):
            continue
        return ep
    raise GenerationError(f"no valid episode for plan {plan.id} with seed {seed}")


def expert_completes(plan: FloorPlan, episode: EpisodeSpec) -> bool:
    from .datagen import EXPERT_STOP_RADIUS, completion_times, expert_rollout

    traj = expert_rollout(plan, episode)
    end = traj.steps[-1].pose
    if math.hypot(end.x - episode.goal[0], end.y - episode.goal[1]) > EXPERT_STOP_RADIUS + 1e-9:
        return False
    return all(t is not None for t in completion_times(traj, episode.instruction, plan))


def generate_dataset_worlds(n_worlds: int, episodes_per_world: int, seed: int,
                            cfg: WorldConfig = WorldConfig(), prefix: str = "w"):
    """Plans and episodes for a split; world i uses seed (seed, i) via a SeedSequence."""
    plans, episodes = [], []
    ss = np.random.SeedSequence(seed)
    for i, child in enumerate(ss.spawn(n_worlds)):
        wseed = int(child.generate_state(1)[0])
        plan = generate_plan(f"{prefix}{i:03d}", wseed, cfg)
        plans.append(plan)
        erng = np.random.default_rng(wseed)
        for e in range(episodes_per_world):
            episodes.append(generate_episode(plan, f"{plan.id}-e{e:02d}", int(erng.integers(1 << 31)), cfg))
    return plans, episodes
