"""Student rollouts with expert intervention, acceptance filtering and aggregation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import (EXPERT_STOP_RADIUS, MAX_STEPS, EpisodeRecord, Step, Trajectory, build_record,
                      write_jsonl)
from .planning import (WAYPOINT_RADIUS, NoPathError, PathFollower, expert_action, geodesic,
                       nearest_segment)
from .policy import HistoryContext, Policy
from .worldgen import EpisodeSpec
from .worldsim import FloorPlan, InputError, NavAction, observe, step

EMPTY_OUTPUT = "empty-output"
PREMATURE_STOP = "premature-stop"
DEVIATION = "deviation"


@dataclass(frozen=True)
class InterventionRule:
    premature_stop_distance: float = 3.0
    deviation_distance: float = 1.5
    deviation_patience: int = 8
    max_steps: int = MAX_STEPS

    def __post_init__(self):
        if min(self.premature_stop_distance, self.deviation_distance) <= 0 \
                or self.deviation_patience < 1 or self.max_steps < 1:
            raise InputError("intervention thresholds must be positive")


@dataclass(frozen=True)
class FilterRule:
    success_distance: float = 0.5
    pl_corrected: float = 0.93
    pl_autonomous: float = 0.85

    def __post_init__(self):
        if not self.pl_autonomous < self.pl_corrected:
            raise InputError("pl_autonomous must be below pl_corrected")
        if self.success_distance <= 0:
            raise InputError("success_distance must be positive")


@dataclass(frozen=True)
class RolloutState:
    """What the intervention rules look at before a student action is executed.

    action is None when the student produced no action.  goal_distance is the
    geodesic distance to the goal and only needs to be known when the action
    is STOP.  off_path_steps counts consecutive steps spent further than the
    deviation distance from the reference path, including the current one.
    """

    action: NavAction | None
    goal_distance: float | None = None
    off_path_steps: int = 0


def should_intervene(state: RolloutState, rule: InterventionRule = InterventionRule()) -> str | None:
    if state.action is None:
        return EMPTY_OUTPUT
    if state.action == NavAction.STOP and state.goal_distance is not None \
            and state.goal_distance >= rule.premature_stop_distance:
        return PREMATURE_STOP
    if state.off_path_steps >= rule.deviation_patience:
        return DEVIATION
    return None


@dataclass
class Intervention:
    t: int
    reason: str
    expert_steps: int


@dataclass
class InterventionRecord:
    interventions: list[Intervention] = field(default_factory=list)

    @property
    def intervened(self) -> bool:
        return bool(self.interventions)

    @property
    def count(self) -> int:
        return len(self.interventions)

    def reasons(self) -> list[str]:
        return [i.reason for i in self.interventions]


# -- students ----------------------------------------------------------------------------

class PolicyStudent:
    """Greedy decoding of a trained policy over each context's history window."""

    def __init__(self, policy: Policy):
        self.policy = policy

    def new_history(self, episode: EpisodeSpec) -> HistoryContext:
        return HistoryContext(episode.instruction, self.policy.cfg)

    def act(self, contexts) -> list[NavAction | None]:
        if not contexts:
            return []
        acts, _ = self.policy.act_batch([c.history for c in contexts])
        return [NavAction(int(a)) for a in acts]


class ExpertStudent:
    """Wraps the reference-path expert so it can stand in for a policy."""

    def __init__(self, stop_radius: float = EXPERT_STOP_RADIUS):
        self.stop_radius = stop_radius

    def new_history(self, episode):
        return None

    def act(self, contexts) -> list[NavAction]:
        out = []
        for c in contexts:
            if c.follower is None:
                c.follower = PathFollower(c.plan, c.episode.reference_path, c.episode.goal, self.stop_radius)
            out.append(c.follower.act(c.pose))
        return out


class ScriptedStudent:
    """Replays a fixed action list (None entries are empty outputs); STOP when it runs out."""

    def __init__(self, actions):
        self.actions = list(actions)

    def new_history(self, episode):
        return None

    def act(self, contexts):
        return [self.actions[c.t] if c.t < len(self.actions) else NavAction.STOP for c in contexts]


# -- rollout -----------------------------------------------------------------------------

@dataclass
class _Context:
    episode: EpisodeSpec
    plan: FloorPlan
    history: HistoryContext | None
    pose: object
    t: int = 0
    off: int = 0
    seg: int = 0
    steps: list = field(default_factory=list)
    record: InterventionRecord = field(default_factory=InterventionRecord)
    done: bool = False
    terminal: bool = False
    follower: PathFollower | None = None

    def observe_now(self):
        if self.history is not None:
            self.history.push(self.t, observe(self.plan, self.pose))


def _path_distance(path, xy) -> float:
    p = np.asarray(path, dtype=np.float64)
    if len(p) == 1:
        return float(np.hypot(*(p[0] - xy)))
    a, b = p[:-1], p[1:]
    d = b - a
    q = np.asarray(xy, dtype=np.float64)
    l2 = np.maximum((d * d).sum(axis=1), 1e-12)
    s = np.clip(((q - a) * d).sum(axis=1) / l2, 0.0, 1.0)
    return float(np.hypot(*(a + s[:, None] * d - q).T).min())


def _goal_distance(plan, pose, goal) -> float:
    try:
        return geodesic(plan, pose.xy, goal)
    except NoPathError:
        return math.inf


def _expert_drive(c: _Context, rule: InterventionRule) -> int:
    """Drive the agent with the expert to the next reference waypoint; returns steps taken.

    The segment cursor only moves forward, so routes that double back are
    still followed in order.
    """
    path = c.episode.reference_path
    last = len(path) - 1
    while True:
        c.seg = nearest_segment(path, c.pose.xy, min(c.seg, max(last - 1, 0)))
        target_idx = min(c.seg + 1, last)
        target = path[target_idx]
        if math.hypot(target[0] - c.pose.x, target[1] - c.pose.y) >= WAYPOINT_RADIUS or target_idx == last:
            break
        c.seg = target_idx
    follower = PathFollower(c.plan, [c.pose.xy, target], target, WAYPOINT_RADIUS)
    n = 0
    while c.t < rule.max_steps:
        a = follower.act(c.pose)
        if a == NavAction.STOP:
            break
        c.steps.append(Step(c.t, c.pose, a, a, intervened=True))
        c.pose = step(c.plan, c.pose, a)
        c.t += 1
        n += 1
        if c.t < rule.max_steps:
            c.observe_now()
    c.seg = min(target_idx, max(last - 1, 0))
    c.off = 0
    return n


def rollout_batch(student, episodes, plans: dict, rule: InterventionRule = InterventionRule(),
                  intervene: bool = True):
    """Roll out the student on several episodes in lockstep (batched policy calls).

    Returns a list of (Trajectory, InterventionRecord).  Without intervention
    the rollout is a plain evaluation run.
    """
    ctxs = []
    for ep in episodes:
        if ep.plan_id not in plans:
            raise InputError(f"episode {ep.episode_id} refers to unknown world {ep.plan_id}")
        c = _Context(ep, plans[ep.plan_id], student.new_history(ep), ep.start)
        c.observe_now()
        ctxs.append(c)
    while True:
        active = [c for c in ctxs if not c.done and c.t < rule.max_steps]
        for c in ctxs:
            if not c.done and c.t >= rule.max_steps:
                c.done = True
        if not active:
            break
        actions = student.act(active)
        for c, a in zip(active, actions):
            reason = None
            if intervene:
                gd = _goal_distance(c.plan, c.pose, c.episode.goal) if a == NavAction.STOP else None
                reason = should_intervene(RolloutState(a, gd, c.off), rule)
            if reason is not None:
                n = _expert_drive(c, rule)
                c.record.interventions.append(Intervention(c.t - n, reason, n))
                if n == 0 and reason != DEVIATION:
                    # the expert has nowhere to go; take its own action to keep moving
                    ea = expert_action(c.plan, c.pose, c.episode.reference_path, c.episode.goal,
                                       EXPERT_STOP_RADIUS)
                    c.steps.append(Step(c.t, c.pose, ea, ea, intervened=True))
                    if ea == NavAction.STOP:
                        c.done = c.terminal = True
                        continue
                    c.pose = step(c.plan, c.pose, ea)
                    c.t += 1
                    if c.t < rule.max_steps:
                        c.observe_now()
                continue
            if a is None:
                # empty output without intervention: the episode cannot continue
                c.done = True
                continue
            c.steps.append(Step(c.t, c.pose, a))
            if a == NavAction.STOP:
                c.done = c.terminal = True
                continue
            c.pose = step(c.plan, c.pose, a)
            c.t += 1
            dist = _path_distance(c.episode.reference_path, c.pose.xy)
            c.off = c.off + 1 if dist > rule.deviation_distance else 0
            if c.t < rule.max_steps:
                c.observe_now()
    out = []
    for c in ctxs:
        steps = c.steps
        if not c.terminal:
            # record the final pose reached when the budget ran out
            steps = steps + [Step(c.t, c.pose, NavAction.STOP)]
        out.append((Trajectory(c.episode.episode_id, c.episode.plan_id, steps, terminal=c.terminal),
                    c.record))
    return out


def rollout(student, episode: EpisodeSpec, plan: FloorPlan, rule: InterventionRule = InterventionRule(),
            intervene: bool = True):
    if isinstance(student, Policy):
        student = PolicyStudent(student)
    return rollout_batch(student, [episode], {episode.plan_id: plan}, rule, intervene)[0]


# -- filtering and aggregation -----------------------------------------------------------

def path_length(traj: Trajectory) -> float:
    return traj.path_length()


def relative_path_length(traj: Trajectory, episode: EpisodeSpec) -> float:
    ref = episode.path_length
    return traj.path_length() / ref if ref > 0 else math.inf


@dataclass(frozen=True)
class FilterDecision:
    accepted: bool
    pl: float
    final_distance: float
    intervened: bool
    reason: str = ""


def accept(final_distance: float, pl: float, intervened: bool, rule: FilterRule = FilterRule()) -> FilterDecision:
    if not final_distance < rule.success_distance:
        return FilterDecision(False, pl, final_distance, intervened,
                              f"final distance {final_distance:.3f} m is not below {rule.success_distance} m")
    limit = rule.pl_corrected if intervened else rule.pl_autonomous
    if not pl < limit:
        kind = "corrected" if intervened else "autonomous"
        return FilterDecision(False, pl, final_distance, intervened, f"{kind} PL {pl:.3f} is not below {limit}")
    return FilterDecision(True, pl, final_distance, intervened)


def filter_trajectory(traj: Trajectory, episode: EpisodeSpec, record: InterventionRecord, plan: FloorPlan,
                      rule: FilterRule = FilterRule()) -> FilterDecision:
    final = traj.steps[-1].pose
    return accept(_goal_distance(plan, final, episode.goal), relative_path_length(traj, episode),
                  record.intervened, rule)


def relabel(traj: Trajectory, episode: EpisodeSpec, plan: FloorPlan,
            stop_radius: float = FilterRule().success_distance) -> Trajectory:
    """Replace every step's label with the expert's action at that pose."""
    steps = []
    for s in traj.steps:
        ea = expert_action(plan, s.pose, episode.reference_path, episode.goal, stop_radius)
        steps.append(Step(s.t, s.pose, ea, ea, s.intervened))
    return Trajectory(traj.episode_id, traj.plan_id, steps, traj.terminal)


def aggregate(accepted, plans: dict, path=None, stop_radius: float = FilterRule().success_distance,
              **record_kw) -> list[EpisodeRecord]:
    """Relabel, annotate and mine accepted (traj, episode, decision) triples; optionally write a shard."""
    records = []
    for traj, episode, decision in accepted:
        plan = plans[episode.plan_id]
        lab = relabel(traj, episode, plan, stop_radius)
        prov = {"intervened": bool(decision.intervened), "pl": round(float(decision.pl), 6),
                "final_distance": round(float(decision.final_distance), 6), "source": "dagger"}
        records.append(build_record(lab, episode.instruction, plan, provenance=prov, **record_kw))
    if path is not None:
        write_jsonl(records, path)
    return records


@dataclass
class DaggerReport:
    episodes: int = 0
    accepted: int = 0
    interventions: dict = field(default_factory=dict)
    rejected: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def collect(student, episodes, plans: dict, irule: InterventionRule = InterventionRule(),
            frule: FilterRule = FilterRule(), path=None, batch: int = 64):
    """One DAgger round: roll out, filter, aggregate.  Returns (records, report)."""
    if isinstance(student, Policy):
        student = PolicyStudent(student)
    report = DaggerReport()
    kept = []
    for i in range(0, len(episodes), batch):
        chunk = episodes[i:i + batch]
        for ep, (traj, rec) in zip(chunk, rollout_batch(student, chunk, plans, irule, True)):
            report.episodes += 1
            for r in rec.reasons():
                report.interventions[r] = report.interventions.get(r, 0) + 1
            dec = filter_trajectory(traj, ep, rec, plans[ep.plan_id], frule)
            if dec.accepted:
                kept.append((traj, ep, dec))
            else:
                report.rejected.append({"episode_id": ep.episode_id, "reason": dec.reason})
    report.accepted = len(kept)
    return aggregate(kept, plans, path, frule.success_distance), report
