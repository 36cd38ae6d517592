"""Ablation harness: baseline versus dual-anchoring training, bucketed evaluation, retro probe."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dagger import InterventionRule, PolicyStudent, rollout_batch
from .datagen import EpisodeRecord, build_record, expert_rollout
from .features import FeatureConfig, category_table, extract
from .grammar import tokenize
from .metrics import BUCKETS, evaluate_episode, summarize
from .policy import Policy, PolicyConfig, encode, make_batch, obs_features, retro_probe, wm_predict
from .trainer import StepDataset, TrainingConfig, prepare, train_stage1
from .worldgen import WorldConfig, generate_dataset_worlds
from .worldsim import observe

# the four rows of the component ablation: (name, progress anchoring, landmark anchoring)
ABLATIONS = (("baseline", False, False), ("+IPA", True, False), ("+MLA", False, True),
             ("dual", True, True))


@dataclass
class Split:
    plans: dict
    episodes: list
    records: list[EpisodeRecord] = field(default_factory=list)


def build_split(n_worlds: int, episodes_per_world: int, seed: int, prefix: str,
                cfg: WorldConfig = WorldConfig(), with_records: bool = True) -> Split:
    plans, episodes = generate_dataset_worlds(n_worlds, episodes_per_world, seed, cfg, prefix)
    byid = {p.id: p for p in plans}
    records = []
    if with_records:
        for e in episodes:
            plan = byid[e.plan_id]
            records.append(build_record(expert_rollout(plan, e), e.instruction, plan))
    return Split(byid, episodes, records)


def ablation_config(base: TrainingConfig, progress: bool, landmark: bool) -> TrainingConfig:
    return replace(base, lambda_prog=base.lambda_prog if progress else 0.0,
                   lambda_wm=base.lambda_wm if landmark else 0.0)


def evaluate_policy(policy: Policy, episodes, plans: dict, success_radius: float = 3.0,
                    max_steps: int = 200, batch: int = 128):
    rule = InterventionRule(max_steps=max_steps)
    student = PolicyStudent(policy)
    results = []
    for i in range(0, len(episodes), batch):
        chunk = episodes[i:i + batch]
        for ep, (traj, _) in zip(chunk, rollout_batch(student, chunk, plans, rule, intervene=False)):
            results.append(evaluate_episode(traj, ep, plans[ep.plan_id], success_radius))
    return results


@dataclass
class RunResult:
    name: str
    seed: int
    summary: dict
    results: list
    policy: Policy
    seconds: float

    def sr(self, bucket: str | None = None) -> float:
        s = self.summary["overall"] if bucket is None else self.summary["buckets"][bucket]
        return s["SR"] if s["SR"] is not None else 0.0


def run_config(name: str, tcfg: TrainingConfig, dataset: StepDataset, heldout: Split, pcfg: PolicyConfig,
               success_radius: float = 3.0, log=None) -> RunResult:
    t0 = time.time()
    res = train_stage1(tcfg, dataset, pcfg)
    results = evaluate_policy(res.policy, heldout.episodes, heldout.plans, success_radius)
    out = RunResult(name, tcfg.seed, summarize(results), results, res.policy, time.time() - t0)
    if log:
        log(f"{name} seed={tcfg.seed} SR={out.sr():.1f} "
            + " ".join(f"{b}={out.sr(b):.1f}" for b, *_ in BUCKETS) + f" ({out.seconds:.0f}s)")
    return out


@dataclass
class DriftOutcome:
    runs: dict  # (name, seed) -> RunResult
    seeds: tuple

    def mean_sr(self, name: str) -> float:
        return float(np.mean([self.runs[(name, s)].sr() for s in self.seeds]))

    def gaps(self, seed: int) -> dict:
        d, b = self.runs[("dual", seed)], self.runs[("baseline", seed)]
        return {bucket: d.sr(bucket) - b.sr(bucket) for bucket, *_ in BUCKETS}

    def long_ge_short(self) -> list[bool]:
        return [self.gaps(s)["Long"] >= self.gaps(s)["Short"] for s in self.seeds]

    def passed(self) -> bool:
        return self.mean_sr("dual") >= self.mean_sr("baseline") and sum(self.long_ge_short()) >= 2

    def table(self) -> list[dict]:
        rows = []
        for (name, seed), r in sorted(self.runs.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            rows.append({"config": name, "seed": seed, "SR": r.sr(), "SPL": r.summary["overall"]["SPL"],
                         **{f"SR_{b}": r.sr(b) for b, *_ in BUCKETS}})
        return rows


def drift_experiment(train: Split, heldout: Split, seeds=(0, 1, 2), base: TrainingConfig = TrainingConfig(),
                     pcfg: PolicyConfig = PolicyConfig(), configs=("baseline", "dual"),
                     success_radius: float = 3.0, log=None) -> DriftOutcome:
    dataset = prepare(train.records, train.plans, pcfg)
    runs = {}
    table = {n: (p, l) for n, p, l in ABLATIONS}
    for seed in seeds:
        for name in configs:
            p, l = table[name]
            tcfg = replace(ablation_config(base, p, l), seed=seed)
            runs[(name, seed)] = run_config(name, tcfg, dataset, heldout, pcfg, success_radius, log)
    return DriftOutcome(runs, tuple(seeds))


# -- retrospective probe -----------------------------------------------------------------

@dataclass
class ProbeResult:
    hits: int
    n: int
    chance: float

    @property
    def accuracy(self) -> float:
        return self.hits / self.n if self.n else 0.0


def probe_accuracy(policy: Policy, records, plans: dict, batch: int = 64) -> ProbeResult:
    """How often the predicted landmark map is most similar to the true t* frame in the window.

    Candidates are the frames in the policy's history window.  Only steps whose
    t* is a mined landmark frame inside the window are scored; chance is the
    mean of 1 / window size over those steps.
    """
    pcfg = policy.cfg
    h = pcfg.history
    fcfg = FeatureConfig(pcfg.d_sam, pcfg.H, pcfg.W)
    table = category_table(pcfg.num_categories, pcfg.d_sam)
    items = []
    for rec in records:
        if not rec.index.accepted or not rec.index.defined:
            continue
        plan = plans[rec.world_id]
        obs = [observe(plan, p) for p in rec.poses]
        feats = [obs_features(o, t, pcfg) for t, o in enumerate(obs)]
        maps = [extract(o, table, fcfg) for o in obs]
        mined = set(rec.index.defined)
        for t in range(len(obs)):
            ts = rec.index.t_star(t)
            lo = max(0, t - h + 1)
            if ts not in mined or ts < lo:
                continue
            items.append((rec.instruction, feats[lo:t + 1], maps[lo:t + 1], ts - lo))
    hits, chance = 0, 0.0
    for i in range(0, len(items), batch):
        chunk = items[i:i + batch]
        enc = make_batch([tokenize(it[0].text) for it in chunk], [it[1] for it in chunk], pcfg,
                         [it[0].K for it in chunk])
        X = encode(enc, policy.params, pcfg)
        F = wm_predict(X, policy.params, pcfg, enc.valid).data
        for f, it in zip(F, chunk):
            _, best = retro_probe(f, it[2])
            hits += int(best == it[3])
            chance += 1.0 / len(it[2])
    n = len(items)
    return ProbeResult(hits, n, chance / n if n else 0.0)
