import math

import numpy as np
import pytest
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from dualanchor.datagen import expert_rollout
from dualanchor.planning import (CLEARANCE, NoPathError, PathFollower, expert_action, geodesic,
                                 polyline_length, shortest_path)
from dualanchor.worldsim import AgentPose, NavAction, Wall, segment_clear, step

from conftest import open_plan


def fine_dijkstra(plan, a, b, res=0.02, clearance=CLEARANCE):
    """Independent oracle: 16-connected Dijkstra on a fine grid with the same wall inflation."""
    bd = plan.bounds
    nx, ny = int(round(bd.w / res)), int(round(bd.h / res))
    xs = bd.x + (np.arange(nx) + 0.5) * res
    ys = bd.y + (np.arange(ny) + 0.5) * res
    X, Y = np.meshgrid(xs, ys)
    free = (X >= clearance) & (X <= bd.x1 - clearance) & (Y >= clearance) & (Y <= bd.y1 - clearance)
    for w in plan.walls:
        free &= ~((X > w.x - clearance) & (X < w.x1 + clearance) & (Y > w.y - clearance) & (Y < w.y1 + clearance))
    idx = np.arange(nx * ny).reshape(ny, nx)
    rows, cols, vals = [], [], []
    moves = [(di, dj) for di in range(-2, 3) for dj in range(-2, 3)
             if (di, dj) != (0, 0) and math.gcd(abs(di), abs(dj)) == 1]
    for di, dj in moves:
        src = free[max(0, -di):ny - max(0, di), max(0, -dj):nx - max(0, dj)]
        dst = free[max(0, di):ny - max(0, -di) or None, max(0, dj):nx - max(0, -dj) or None]
        # for knight moves also require the two cells crossed to be free
        ok = src & dst
        if abs(di) == 2 or abs(dj) == 2:
            mi, mj = (di // 2 if abs(di) == 2 else 0), (dj // 2 if abs(dj) == 2 else 0)
            mi2, mj2 = di - mi, dj - mj
            m1 = np.roll(np.roll(free, -mi, 0), -mj, 1)[max(0, -di):ny - max(0, di), max(0, -dj):nx - max(0, dj)]
            m2 = np.roll(np.roll(free, -mi2, 0), -mj2, 1)[max(0, -di):ny - max(0, di), max(0, -dj):nx - max(0, dj)]
            ok &= m1 & m2
        s = idx[max(0, -di):ny - max(0, di), max(0, -dj):nx - max(0, dj)][ok]
        t = s + di * nx + dj
        rows.append(s)
        cols.append(t)
        vals.append(np.full(len(s), res * math.hypot(di, dj)))
    g = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nx * ny,) * 2)
    ia = idx[int(a[1] / res), int(a[0] / res)]
    ib = idx[int(b[1] / res), int(b[0] / res)]
    d = dijkstra(g.tocsr(), indices=ia)[ib]
    return float(d)


def test_straight_corridor():
    plan = open_plan()
    assert geodesic(plan, (2.0, 5.0), (5.0, 5.0)) == pytest.approx(3.0, abs=0.05)


def test_detour_matches_fine_dijkstra():
    plan = open_plan(walls=[Wall(4.9, 0.0, 0.2, 7.0)])
    a, b = (2.01, 2.01), (8.01, 2.01)
    g = geodesic(plan, a, b)
    oracle = fine_dijkstra(plan, a, b)
    assert abs(g - oracle) / oracle < 0.03


def test_enclosed_goal_has_no_path():
    box = [Wall(6, 6, 3, 0.2), Wall(6, 8.8, 3, 0.2), Wall(6, 6, 0.2, 3), Wall(8.8, 6, 0.2, 3)]
    plan = open_plan(walls=box)
    with pytest.raises(NoPathError):
        geodesic(plan, (2, 2), (7.5, 7.5))


def test_path_is_collision_free_and_no_shorter_than_geodesic(small_split):
    plans, eps = small_split
    for e in eps:
        plan = plans[e.plan_id]
        path = shortest_path(plan, e.start.xy, e.goal)
        for p, q in zip(path, path[1:]):
            assert segment_clear(plan, p, q, 0.0)
        g = geodesic(plan, e.start.xy, e.goal)
        assert g <= polyline_length(path) * 1.03 + 0.05


def test_expert_stops_at_goal(empty_plan):
    path = [(1.0, 1.0), (5.0, 5.0)]
    assert expert_action(empty_plan, AgentPose(5.0, 5.0, 0.0), path, (5.0, 5.0), 0.5) == NavAction.STOP


def test_expert_turns_toward_left_waypoint(empty_plan):
    path = [(5.0, 5.0), (5.0, 8.0)]
    assert expert_action(empty_plan, AgentPose(5.0, 5.0, 0.0), path, (5.0, 8.0), 0.5) == NavAction.TURN_LEFT
    assert expert_action(empty_plan, AgentPose(5.0, 5.0, math.pi), path, (5.0, 8.0), 0.5) == NavAction.TURN_RIGHT


def test_follower_does_not_chatter(empty_plan):
    # undoing the previous turn needs a full action's worth of error
    f = PathFollower(empty_plan, [(1.0, 1.0), (9.0, 1.0)], (9.0, 1.0), 0.3)
    pose = AgentPose(1.0, 1.0, 0.5)
    acts = []
    for _ in range(40):
        a = f.act(pose)
        acts.append(a)
        if a == NavAction.STOP:
            break
        pose = step(empty_plan, pose, a)
    pairs = {(NavAction.TURN_LEFT, NavAction.TURN_RIGHT), (NavAction.TURN_RIGHT, NavAction.TURN_LEFT)}
    assert not any((x, y) in pairs for x, y in zip(acts, acts[1:]))
    assert acts[-1] == NavAction.STOP


def test_expert_rollouts_reach_goal(small_split):
    plans, eps = small_split
    for e in eps:
        traj = expert_rollout(plans[e.plan_id], e)
        end = traj.poses[-1]
        assert traj.terminal
        assert math.hypot(end.x - e.goal[0], end.y - e.goal[1]) <= 3.0
