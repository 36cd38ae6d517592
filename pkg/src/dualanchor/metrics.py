"""Episode-level navigation metrics (SR, SPL, OSR, NE) and length-bucketed reports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .planning import NoPathError, geodesic
from .worldsim import FloorPlan, NavAction

DEFAULT_SUCCESS_RADIUS = 3.0
UNBUCKETED = "Unbucketed"

# (name, low, high); intervals are half-open except the last, which is closed
BUCKETS = (("Short", 3.85, 7.55), ("Medium", 7.55, 9.81), ("Long", 9.81, 21.04))


@dataclass(frozen=True)
class EpisodeResult:
    episode_id: str
    success: bool
    ne: float
    oracle_success: bool
    spl_term: float
    l: float
    p: float
    bucket: str

    def to_dict(self) -> dict:
        return asdict(self)


def bucket_of(l: float, bounds=BUCKETS) -> str:
    for i, (name, lo, hi) in enumerate(bounds):
        last = i == len(bounds) - 1
        if lo <= l < hi or (last and l == hi):
            return name
    return UNBUCKETED


def spl_term(success: bool, l: float, p: float) -> float:
    if not success:
        return 0.0
    return l / max(p, l) if max(p, l) > 0 else 1.0


def _geo(plan: FloorPlan, a, b) -> float:
    try:
        return geodesic(plan, a, b)
    except NoPathError:
        return math.inf


def evaluate_episode(traj, episode, plan: FloorPlan, success_radius: float = DEFAULT_SUCCESS_RADIUS,
                     bounds=BUCKETS) -> EpisodeResult:
    """Score one rollout; success requires a STOP issued by the agent within the radius."""
    goal = episode.goal
    poses = [s.pose for s in traj.steps]
    final = poses[-1]
    ne = _geo(plan, final.xy, goal)
    stopped = bool(traj.terminal and traj.steps[-1].action == NavAction.STOP)
    success = stopped and ne <= success_radius
    oracle = success
    if not oracle:
        for q in poses:
            # the straight-line distance bounds the geodesic from below
            if math.hypot(q.x - goal[0], q.y - goal[1]) <= success_radius \
                    and _geo(plan, q.xy, goal) <= success_radius:
                oracle = True
                break
    xy = np.array([[q.x, q.y] for q in poses])
    p = float(np.hypot(*np.diff(xy, axis=0).T).sum()) if len(xy) > 1 else 0.0
    l = float(episode.geodesic_length)
    return EpisodeResult(episode.episode_id, success, float(ne), oracle, spl_term(success, l, p), l, p,
                         bucket_of(l, bounds))


def _aggregate(results) -> dict:
    n = len(results)
    if n == 0:
        return {"n": 0, "SR": None, "SPL": None, "OSR": None, "NE": None}
    return {
        "n": n,
        "SR": 100.0 * sum(r.success for r in results) / n,
        "SPL": 100.0 * sum(r.spl_term for r in results) / n,
        "OSR": 100.0 * sum(r.oracle_success for r in results) / n,
        "NE": sum(r.ne for r in results) / n,
    }


def bucketize(results, bounds=BUCKETS) -> dict:
    """Aggregates per length bucket, re-deriving each bucket from l."""
    names = [b[0] for b in bounds] + [UNBUCKETED]
    groups = {name: [] for name in names}
    for r in results:
        groups[bucket_of(r.l, bounds)].append(r)
    return {name: _aggregate(groups[name]) for name in names}


def summarize(results, bounds=BUCKETS) -> dict:
    return {"overall": _aggregate(list(results)), "buckets": bucketize(results, bounds)}


RESULT_FIELDS = ("episode_id", "bucket", "success", "oracle_success", "ne", "spl_term", "l", "p")


def aggregate_and_report(results, out_dir, bounds=BUCKETS) -> dict:
    """Write results.csv and summary.json under out_dir; return the summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = sorted(results, key=lambda r: r.episode_id)
    with open(out_dir / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for r in results:
            w.writerow([r.episode_id, r.bucket, int(r.success), int(r.oracle_success), f"{r.ne:.6f}",
                        f"{r.spl_term:.6f}", f"{r.l:.6f}", f"{r.p:.6f}"])
    summary = summarize(results, bounds)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def read_results(path) -> list[EpisodeResult]:
    with open(path, newline="") as fh:
        return [EpisodeResult(r["episode_id"], r["success"] == "1", float(r["ne"]), r["oracle_success"] == "1",
                              float(r["spl_term"]), float(r["l"]), float(r["p"]), r["bucket"])
                for r in csv.DictReader(fh)]
