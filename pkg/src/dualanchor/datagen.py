"""Progress-prefix labels, landmark frame mining and annotation-quality metrics.

Sub-goal completion is decided geometrically from the trajectory:

* landmark clauses complete the first time the agent is within 1.0 m of the
  landmark's surface;
* turn clauses complete when a run of matching turn actions ends near the
  corner the clause describes;
* the final stop clause completes on a STOP issued within 1.0 m of its landmark.

Completions are matched in clause order, so the completed count is a
monotone boundary index into the instruction.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import extract, write_dafm
from .grammar import Instruction, decompose, content_tokens, prefix_text
from .planning import PathFollower
from .worldgen import EpisodeSpec
from .worldsim import AgentPose, FloorPlan, InputError, NavAction, Observation, observe, step

COMPLETION_RADIUS = 1.0
TURN_RADIUS = 1.5
DEFAULT_STRIDE = 4
EXPERT_STOP_RADIUS = 0.3
MAX_STEPS = 200


@dataclass
class Step:
    t: int
    pose: AgentPose
    action: NavAction
    expert_action: NavAction | None = None
    intervened: bool = False


@dataclass
class Trajectory:
    episode_id: str
    plan_id: str
    steps: list[Step]
    terminal: bool = False
    _obs: list | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def poses(self) -> list[AgentPose]:
        return [s.pose for s in self.steps]

    @property
    def actions(self) -> list[NavAction]:
        return [s.action for s in self.steps]

    def observations(self, plan: FloorPlan) -> list[Observation]:
        if self._obs is None:
            self._obs = [observe(plan, s.pose) for s in self.steps]
        return self._obs

    def path_length(self) -> float:
        p = np.array([[s.pose.x, s.pose.y] for s in self.steps])
        return float(np.hypot(*np.diff(p, axis=0).T).sum()) if len(p) > 1 else 0.0


def expert_rollout(plan: FloorPlan, episode: EpisodeSpec, stop_radius: float = EXPERT_STOP_RADIUS,
                   max_steps: int = MAX_STEPS) -> Trajectory:
    follower = PathFollower(plan, episode.reference_path, episode.goal, stop_radius)
    pose = episode.start
    steps = []
    stopped = False
    for t in range(max_steps + 1):
        a = follower.act(pose) if t < max_steps else NavAction.STOP
        stopped = t < max_steps
        steps.append(Step(t, pose, a, a))
        if a == NavAction.STOP:
            break
        pose = step(plan, pose, a)
    # a STOP forced by the step budget is recorded but does not count as terminal
    return Trajectory(episode.episode_id, episode.plan_id, steps, terminal=stopped)


# -- progress labels ---------------------------------------------------------------------

def _surface_distance(plan: FloorPlan, category: int, pose: AgentPose) -> float:
    best = math.inf
    for lm in plan.landmarks:
        if lm.category == category:
            best = min(best, math.hypot(pose.x - lm.cx, pose.y - lm.cy) - lm.r)
    return best


def _turn_completion(steps, verb, anchor, start: int):
    want = NavAction.TURN_LEFT if verb == "TURN_LEFT" else NavAction.TURN_RIGHT
    T = len(steps)
    i = start
    while i < T:
        if steps[i].action != want:
            i += 1
            continue
        j = i
        while j + 1 < T and steps[j + 1].action == want:
            j += 1
        if j + 1 >= T:
            return None
        near = anchor is None or any(
            math.hypot(steps[m].pose.x - anchor[0], steps[m].pose.y - anchor[1]) <= TURN_RADIUS
            for m in range(i, j + 1))
        if near:
            return j + 1
        i = j + 1
    return None


def completion_times(traj: Trajectory, instr: Instruction, plan: FloorPlan) -> list[int | None]:
    """Frame at which each sub-goal completes (None if it never does), matched in order."""
    steps = traj.steps
    T = len(steps)
    out: list[int | None] = []
    cursor = 0
    for sg in instr.subgoals:
        t_done = None
        if sg.completion_event == "reach":
            for t in range(cursor, T):
                if _surface_distance(plan, sg.landmark_category, steps[t].pose) <= COMPLETION_RADIUS:
                    t_done = t
                    break
        elif sg.completion_event == "turn":
            t_done = _turn_completion(steps, sg.verb, sg.anchor, cursor)
        else:
            last = steps[-1]
            if (T - 1 >= cursor and last.action == NavAction.STOP
                    and _surface_distance(plan, sg.landmark_category, last.pose) <= COMPLETION_RADIUS):
                t_done = T - 1
        if t_done is None:
            out.extend([None] * (instr.K - len(out)))
            break
        out.append(t_done)
        cursor = t_done
    return out


def boundary_indices(traj: Trajectory, instr: Instruction, plan: FloorPlan) -> np.ndarray:
    """Completed sub-goal count k_t for every frame."""
    k = np.zeros(len(traj), dtype=np.int64)
    for c in completion_times(traj, instr, plan):
        if c is None:
            break
        k[c:] += 1
    return k


@dataclass(frozen=True)
class ProgressSample:
    t: int
    k: int
    label: str


def _check_aligned(traj: Trajectory, plan: FloorPlan) -> None:
    if traj.plan_id != plan.id:
        raise InputError(f"trajectory {traj.episode_id} belongs to {traj.plan_id}, not {plan.id}")
    if [s.t for s in traj.steps] != list(range(len(traj.steps))):
        raise InputError(f"trajectory {traj.episode_id} has non-consecutive time indices")


def annotate_progress(traj: Trajectory, instr: Instruction, plan: FloorPlan,
                      stride: int = DEFAULT_STRIDE) -> list[ProgressSample]:
    """Verbatim-prefix labels at every stride-th frame (and the terminal frame)."""
    _check_aligned(traj, plan)
    if stride < 1:
        raise InputError("stride must be positive")
    k = boundary_indices(traj, instr, plan)
    times = list(range(0, len(traj), stride))
    if times[-1] != len(traj) - 1:
        times.append(len(traj) - 1)
    return [ProgressSample(t, int(k[t]), prefix_text(instr, int(k[t]))) for t in times]


# -- landmark mining ---------------------------------------------------------------------

@dataclass
class LandmarkIndex:
    frames: list[int | None]  # one entry per sub-goal; None for turns or never-seen landmarks
    accepted: bool
    reason: str = ""

    @property
    def defined(self) -> list[int]:
        return [f for f in self.frames if f is not None]

    def t_star(self, t: int) -> int:
        below = [f for f in self.defined if f <= t]
        return max(below) if below else 0

    def to_dict(self) -> dict:
        return {"frames": self.frames, "accepted": self.accepted, "reason": self.reason}

    @classmethod
    def from_dict(cls, d: dict) -> "LandmarkIndex":
        return cls(list(d["frames"]), bool(d["accepted"]), d.get("reason", ""))


def validate_order(frames) -> tuple[bool, str]:
    defined = [f for f in frames if f is not None]
    for a, b in zip(defined, defined[1:]):
        if not a < b:
            return False, f"landmark frames not strictly increasing ({a} then {b})"
    return True, ""


def mine_landmarks(observations, subgoals) -> LandmarkIndex:
    """First frame showing each sub-goal's landmark category; rejects out-of-order episodes."""
    if not observations:
        raise InputError("trajectory has no observations")
    cats = np.stack([o.category for o in observations])
    frames: list[int | None] = []
    for sg in subgoals:
        if sg.landmark_category is None:
            frames.append(None)
            continue
        hits = np.nonzero((cats == sg.landmark_category).any(axis=1))[0]
        frames.append(int(hits[0]) if len(hits) else None)
    ok, reason = validate_order(frames)
    return LandmarkIndex(frames, ok, reason)


def last_landmark(t: int, index: LandmarkIndex, features):
    """(t*, feature map of frame t*); frame 0 stands in before any landmark is seen.

    `features` maps a frame index to its feature map (dict, list or callable).
    """
    ts = index.t_star(t)
    fmap = features(ts) if callable(features) else features[ts]
    return ts, fmap


# -- data-quality metrics ----------------------------------------------------------------

def is_hallucinated(label: str, instruction_text: str) -> bool:
    return bool(content_tokens(label) - content_tokens(instruction_text))


def consistency_score(label: str, instr: Instruction, k_oracle: int) -> int:
    """Deterministic 1-5 rubric for how well a progress label tracks the instruction.

    5: exact prefix at the oracle boundary; 4: exact prefix one sub-goal off;
    3: exact prefix further off; 2: sub-goals of the instruction in order but
    with gaps; 1: anything else (reordered, foreign or unparseable).
    """
    for k in range(instr.K + 1):
        if label == prefix_text(instr, k):
            off = abs(k - k_oracle)
            return 5 if off == 0 else 4 if off == 1 else 3
    try:
        parsed = decompose(label.strip())
    except ValueError:
        return 1
    keys = [(s.verb, s.landmark_category) for s in instr.subgoals]
    pos = 0
    for s in parsed:
        key = (s.verb, s.landmark_category)
        while pos < len(keys) and keys[pos] != key:
            pos += 1
        if pos == len(keys):
            return 1
        pos += 1
    return 2


@dataclass
class QualityRecord:
    instruction: Instruction
    labels: list[tuple[str, int]]  # (label text, oracle boundary)
    index: LandmarkIndex | None = None
    observations: list | None = None


def quality_metrics(records, seed: int = 0) -> dict:
    """HR and LCS over progress labels; LPR for mined versus uniformly random frames."""
    rng = np.random.default_rng(seed)
    n_labels = halluc = 0
    lcs_total = 0.0
    mined_hits = mined_n = rand_hits = rand_n = 0
    for rec in records:
        for label, k in rec.labels:
            n_labels += 1
            halluc += is_hallucinated(label, rec.instruction.text)
            lcs_total += consistency_score(label, rec.instruction, k)
        if rec.index is None or rec.observations is None or not rec.index.accepted:
            continue
        for sg, f in zip(rec.instruction.subgoals, rec.index.frames):
            if f is None:
                continue
            mined_n += 1
            mined_hits += rec.observations[f].has_category(sg.landmark_category)
            r = int(rng.integers(len(rec.observations)))
            rand_n += 1
            rand_hits += rec.observations[r].has_category(sg.landmark_category)
    return {
        "HR": halluc / n_labels if n_labels else 0.0,
        "LCS": lcs_total / n_labels if n_labels else 0.0,
        "LPR_mined": mined_hits / mined_n if mined_n else 0.0,
        "LPR_random": rand_hits / rand_n if rand_n else 0.0,
        "n_labels": n_labels,
        "n_frames": mined_n,
    }


# -- dataset shards ----------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    """One dataset line: trajectory, labels and landmark index for an episode."""

    episode_id: str
    world_id: str
    instruction: Instruction
    poses: list[AgentPose]
    actions: list[NavAction]
    k: list[int | None]
    t_star: list[int]
    index: LandmarkIndex
    provenance: dict = field(default_factory=dict)
    feature_paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "episode_id": self.episode_id,
            "world_id": self.world_id,
            "instruction": self.instruction.text,
            "subgoals": [s.to_dict() for s in self.instruction.subgoals],
            "steps": [{"t": t, "pose": [round(p.x, 6), round(p.y, 6), round(p.heading, 6)],
                       "action": int(a), "k": k, "t_star": ts}
                      for t, (p, a, k, ts) in enumerate(zip(self.poses, self.actions, self.k, self.t_star))],
            "landmark_index": self.index.to_dict(),
        }
        if self.feature_paths:
            d["landmark_index"]["features"] = {str(k): v for k, v in sorted(self.feature_paths.items())}
        if self.provenance:
            d["provenance"] = self.provenance
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        try:
            from .grammar import SubGoal
            instr = Instruction(d["instruction"], tuple(SubGoal.from_dict(s) for s in d["subgoals"]))
            steps = d["steps"]
            rec = cls(
                episode_id=d["episode_id"], world_id=d["world_id"], instruction=instr,
                poses=[AgentPose(*s["pose"]) for s in steps],
                actions=[NavAction(int(s["action"])) for s in steps],
                k=[s["k"] for s in steps], t_star=[int(s["t_star"]) for s in steps],
                index=LandmarkIndex.from_dict(d["landmark_index"]),
                provenance=d.get("provenance", {}),
                feature_paths={int(k): v for k, v in d["landmark_index"].get("features", {}).items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed dataset line: {exc}") from exc
        return rec

    def trajectory(self) -> Trajectory:
        steps = [Step(t, p, a) for t, (p, a) in enumerate(zip(self.poses, self.actions))]
        return Trajectory(self.episode_id, self.world_id, steps, terminal=True)


def build_record(traj: Trajectory, instr: Instruction, plan: FloorPlan, stride: int = DEFAULT_STRIDE,
                 provenance: dict | None = None, features_dir=None, table=None,
                 feature_cfg=None) -> EpisodeRecord:
    samples = annotate_progress(traj, instr, plan, stride)
    k = [None] * len(traj)
    for s in samples:
        k[s.t] = s.k
    obs = traj.observations(plan)
    index = mine_landmarks(obs, instr.subgoals)
    t_star = [index.t_star(t) for t in range(len(traj))]
    paths = {}
    if features_dir is not None and index.accepted:
        features_dir = Path(features_dir)
        features_dir.mkdir(parents=True, exist_ok=True)
        for f in sorted(set(t_star)):
            p = features_dir / f"{traj.episode_id}_t{f:03d}.dafm"
            write_dafm(p, extract(obs[f], table, feature_cfg) if feature_cfg else extract(obs[f], table))
            paths[f] = str(p)
    return EpisodeRecord(traj.episode_id, traj.plan_id, instr, traj.poses, traj.actions, k, t_star,
                         index, provenance or {}, paths)


def write_jsonl(records, path) -> int:
    n = 0
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
            n += 1
    return n


def read_jsonl(path) -> list[EpisodeRecord]:
    out = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(EpisodeRecord.from_dict(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{ln}: {exc}") from exc
    return out


def write_episodes(episodes, path) -> None:
    with open(path, "w") as fh:
        for e in episodes:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def read_episodes(path) -> list[EpisodeSpec]:
    return [EpisodeSpec.from_dict(json.loads(l)) for l in Path(path).read_text().splitlines() if l.strip()]
