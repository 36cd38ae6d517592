"""Two-stage imitation training with the gated dual-anchoring objective."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .datagen import EpisodeRecord
from .diffcore import InputError, OptimizerConfig, TrainingFault
from .features import FeatureConfig, category_table, extract
from .grammar import tokenize
from .policy import (Policy, PolicyConfig, action_logits, encode, make_batch, obs_features,
                     params_from_arrays, progress_logits, progress_mask, wm_loss, wm_predict)
from .worldsim import FloorPlan, observe


@dataclass(frozen=True)
class TrainingConfig:
    lambda_prog: float = 1.0
    lambda_wm: float = 0.1
    anchoring_probability: float = 0.5
    lr: float = 1e-3
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    history: int = 8
    max_steps: int | None = None  # caps optimizer steps; None trains full epochs
    warmup_frac: float = 0.03
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.lambda_prog < 0 or self.lambda_wm < 0:
            raise InputError("loss weights must be nonnegative")
        if not 0.0 <= self.anchoring_probability <= 1.0:
            raise InputError("anchoring_probability must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise InputError("batch_size must be positive and epochs nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


# -- dataset -----------------------------------------------------------------------------

@dataclass
class EpisodeArrays:
    """Everything a training window needs from one episode, precomputed."""

    episode_id: str
    tokens: list[int]
    K: int
    feats: np.ndarray      # (T, obs_dim)
    actions: np.ndarray    # (T,)
    k: np.ndarray          # (T,), -1 where unlabelled
    t_star: np.ndarray     # (T,)
    targets: dict          # t* -> (d_sam, H, W)
    wm_weight: float
    source: str = "base"

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class StepDataset:
    episodes: list[EpisodeArrays] = field(default_factory=list)

    def __post_init__(self):
        self._reindex()

    def _reindex(self):
        pairs = [(e, t) for e, ep in enumerate(self.episodes) for t in range(len(ep))]
        self.index = np.array(pairs, dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.index)

    def sources(self) -> list[str]:
        return sorted({e.source for e in self.episodes})

    def source_rows(self, source: str) -> np.ndarray:
        src = np.array([e.source == source for e in self.episodes], dtype=bool)
        if len(self.index) == 0:
            return np.zeros(0, np.int64)
        return np.nonzero(src[self.index[:, 0]])[0]

    def extend(self, other: "StepDataset") -> "StepDataset":
        return StepDataset(self.episodes + other.episodes)


def prepare(records, plans: dict[str, FloorPlan], pcfg: PolicyConfig, source: str = "base",
            table: np.ndarray | None = None) -> StepDataset:
    """Turn dataset records into arrays; observations are re-rendered from stored poses."""
    fcfg = FeatureConfig(pcfg.d_sam, pcfg.H, pcfg.W)
    if table is None:
        table = category_table(pcfg.num_categories, pcfg.d_sam)
    out = []
    for rec in records:
        if not isinstance(rec, EpisodeRecord):
            raise InputError(f"expected an EpisodeRecord, got {type(rec).__name__}")
        if rec.world_id not in plans:
            raise InputError(f"episode {rec.episode_id} refers to unknown world {rec.world_id}")
        if rec.instruction.K > pcfg.k_max:
            raise InputError(f"episode {rec.episode_id} has {rec.instruction.K} sub-goals > k_max")
        plan = plans[rec.world_id]
        obs = [observe(plan, p) for p in rec.poses]
        feats = np.stack([obs_features(o, t, pcfg) for t, o in enumerate(obs)])
        k = np.array([-1 if v is None else int(v) for v in rec.k], dtype=np.int64)
        t_star = np.asarray(rec.t_star, dtype=np.int64)
        targets = {int(ts): extract(obs[ts], table, fcfg) for ts in np.unique(t_star)}
        out.append(EpisodeArrays(rec.episode_id, tokenize(rec.instruction.text), rec.instruction.K,
                                 feats, np.asarray(rec.actions, dtype=np.int64), k, t_star, targets,
                                 1.0 if rec.index.accepted else 0.0, source))
    return StepDataset(out)


@dataclass
class TrainBatch:
    enc: object
    actions: np.ndarray
    k: np.ndarray
    prog_weight: np.ndarray
    targets: np.ndarray
    wm_weight: np.ndarray
    K: np.ndarray


def collate(dataset: StepDataset, rows, pcfg: PolicyConfig) -> TrainBatch:
    """Windows ending at each selected step with up to h history frames."""
    h = pcfg.history
    toks, obs, acts, ks, tg, ww, Ks = [], [], [], [], [], [], []
    for r in rows:
        e, t = dataset.index[r]
        ep = dataset.episodes[e]
        toks.append(ep.tokens)
        obs.append(list(ep.feats[max(0, t - h + 1):t + 1]))
        acts.append(ep.actions[t])
        ks.append(ep.k[t])
        tg.append(ep.targets[int(ep.t_star[t])])
        ww.append(ep.wm_weight)
        Ks.append(ep.K)
    k = np.array(ks, dtype=np.int64)
    return TrainBatch(make_batch(toks, obs, pcfg, Ks), np.array(acts, dtype=np.int64),
                      np.maximum(k, 0), (k >= 0).astype(np.float32), np.stack(tg).astype(np.float32),
                      np.array(ww, dtype=np.float32), np.array(Ks, dtype=np.int64))


# -- loss --------------------------------------------------------------------------------

def stage1_loss(batch: TrainBatch, params: dict, config: TrainingConfig, pcfg: PolicyConfig,
                rng: np.random.Generator):
    """total = L_nav + g * (lambda_prog * L_prog + lambda_wm * L_WM), g ~ Bernoulli(p).

    One gate is drawn per call, so a whole optimizer step is either anchored or
    not.  Returns (total tensor, component floats, gate).
    """
    for name in ("actions", "k", "targets"):
        if getattr(batch, name, None) is None:
            raise InputError(f"batch is missing {name} labels")
    g = bool(rng.random() < config.anchoring_probability)
    X = encode(batch.enc, params, pcfg)
    dt = X.data.dtype
    l_nav = dc.cross_entropy(action_logits(X, params), batch.actions)
    l_prog = dc.cross_entropy(progress_logits(X, params), batch.k, batch.prog_weight.astype(dt),
                              progress_mask(batch.K, pcfg.k_max, dt))
    F = wm_predict(X, params, pcfg, batch.enc.valid)
    l_wm = wm_loss(F, batch.targets.astype(dt), batch.wm_weight.astype(dt))
    if g:
        aux = dc.add(dc.mul(l_prog, dt.type(config.lambda_prog)), dc.mul(l_wm, dt.type(config.lambda_wm)))
        total = dc.add(l_nav, aux)
    else:
        total = l_nav
    comps = {"L_nav": float(l_nav.data), "L_prog": float(l_prog.data), "L_WM": float(l_wm.data),
             "total": float(total.data)}
    return total, comps, g


def assemble_total(l_nav, l_prog, l_wm, g: bool, lambda_prog: float, lambda_wm: float):
    """The logged-total identity evaluated in float32, independent of the graph."""
    f = np.float32
    if not g:
        return f(l_nav)
    return f(f(l_nav) + f(f(l_prog) * f(lambda_prog) + f(l_wm) * f(lambda_wm)))


# -- training loop -----------------------------------------------------------------------

LOG_FIELDS = ("step", "L_nav", "L_prog", "L_WM", "total", "lr", "gated", "source_mix")


@dataclass
class TrainResult:
    policy: Policy
    log: list[dict]
    steps: int


def _clip(params: dict, max_norm: float | None) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm is not None and norm > max_norm and math.isfinite(norm):
        s = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * s).astype(p.grad.dtype)
    return norm


class Sampler:
    """Seeded batch order; with several sources every batch draws from each of them."""

    def __init__(self, dataset: StepDataset, batch_size: int, rng: np.random.Generator):
        self.rng = rng
        self.bs = batch_size
        self.pools = [dataset.source_rows(s) for s in dataset.sources()]
        self.pools = [p for p in self.pools if len(p)]
        self.n = sum(len(p) for p in self.pools)
        self._perm = [self.rng.permutation(p) for p in self.pools]
        self._pos = [0] * len(self.pools)

    def steps_per_epoch(self) -> int:
        return max(1, math.ceil(self.n / self.bs))

    def _take(self, i: int, m: int) -> list[int]:
        out = []
        while len(out) < m:
            if self._pos[i] >= len(self._perm[i]):
                self._perm[i] = self.rng.permutation(self.pools[i])
                self._pos[i] = 0
            j = min(len(self._perm[i]), self._pos[i] + m - len(out))
            out.extend(self._perm[i][self._pos[i]:j].tolist())
            self._pos[i] = j
        return out

    def next(self) -> list[int]:
        if len(self.pools) == 1:
            return self._take(0, min(self.bs, self.n))
        sizes = np.array([len(p) for p in self.pools], dtype=np.float64)
        quota = np.maximum(1, np.floor(self.bs * sizes / sizes.sum())).astype(int)
        quota[int(np.argmax(sizes))] += max(0, self.bs - int(quota.sum()))
        rows = []
        for i, q in enumerate(quota):
            rows.extend(self._take(i, int(q)))
        return rows


def train(policy: Policy, dataset: StepDataset, config: TrainingConfig, log_path=None,
          checkpoint_path=None, stage: int = 1) -> TrainResult:
    if len(dataset) == 0:
        raise InputError("training dataset is empty")
    pcfg = policy.cfg
    if pcfg.history != config.history:
        raise InputError(f"policy history {pcfg.history} differs from training history {config.history}")
    order_rng = np.random.default_rng([config.seed, stage, 0])
    gate_rng = np.random.default_rng([config.seed, stage, 1])
    sampler = Sampler(dataset, config.batch_size, order_rng)
    total_steps = sampler.steps_per_epoch() * config.epochs
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps) if config.epochs else config.max_steps
    opt = dc.Adam(policy.params, OptimizerConfig(base_lr=config.lr, weight_decay=config.weight_decay,
                                                 warmup_frac=config.warmup_frac, total_steps=total_steps))
    src_of = np.array([dataset.episodes[e].source != "base" for e, _ in dataset.index])
    log = []
    last_good = {k: v.data.copy() for k, v in policy.params.items()}
    for step in range(total_steps):
        rows = sampler.next()
        batch = collate(dataset, rows, pcfg)
        dc.zero_grad(policy.params)
        total, comps, g = stage1_loss(batch, policy.params, config, pcfg, gate_rng)
        if not math.isfinite(comps["total"]):
            _abort(policy, last_good, checkpoint_path, config, stage, step)
        dc.backward(total)
        _clip(policy.params, config.clip_norm)
        try:
            lr = opt.step(step)
        except TrainingFault:
            _abort(policy, last_good, checkpoint_path, config, stage, step)
        for k, v in policy.params.items():
            last_good[k][...] = v.data
        comps.update(step=step, lr=lr, gated=int(g), source_mix=round(float(src_of[rows].mean()), 4))
        log.append(comps)
    if log_path is not None:
        write_log(log, log_path)
    if checkpoint_path is not None:
        save_policy(checkpoint_path, policy, config, stage, total_steps)
    return TrainResult(policy, log, total_steps)


def _abort(policy, last_good, checkpoint_path, config, stage, step):
    for k, v in policy.params.items():
        v.data[...] = last_good[k]
    if checkpoint_path is not None:
        save_policy(checkpoint_path, policy, config, stage, step)
    raise TrainingFault(f"non-finite loss at step {step}; restored the last good parameters")


def train_stage1(config: TrainingConfig, dataset: StepDataset, pcfg: PolicyConfig = PolicyConfig(),
                 log_path=None, checkpoint_path=None) -> TrainResult:
    policy = Policy(pcfg, seed=config.seed)
    return train(policy, dataset, config, log_path, checkpoint_path, stage=1)


def train_stage2(config: TrainingConfig, stage1_data: StepDataset, dagger_data: StepDataset,
                 checkpoint, log_path=None, checkpoint_path=None) -> TrainResult:
    """Continue from a Stage 1 checkpoint on base plus DAgger data, anchoring unchanged."""
    policy = checkpoint if isinstance(checkpoint, Policy) else load_policy(checkpoint)
    for ep in dagger_data.episodes:
        if ep.feats.shape[1] != policy.cfg.obs_dim:
            raise InputError(f"DAgger episode {ep.episode_id} has feature width {ep.feats.shape[1]}, "
                             f"expected {policy.cfg.obs_dim}")
        if ep.source == "base":
            ep.source = "dagger"
    return train(policy, stage1_data.extend(dagger_data), config, log_path, checkpoint_path, stage=2)


# -- persistence -------------------------------------------------------------------------

def write_log(log, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_FIELDS)
        for r in log:
            w.writerow([r["step"], repr(r["L_nav"]), repr(r["L_prog"]), repr(r["L_WM"]), repr(r["total"]),
                        repr(r["lr"]), r["gated"], r["source_mix"]])


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"step": int(r["step"]), "L_nav": float(r["L_nav"]), "L_prog": float(r["L_prog"]),
             "L_WM": float(r["L_WM"]), "total": float(r["total"]), "lr": float(r["lr"]),
             "gated": int(r["gated"]), "source_mix": float(r["source_mix"])} for r in rows]


def save_policy(path, policy: Policy, config: TrainingConfig | None = None, stage: int = 1,
                steps: int = 0) -> None:
    meta = {"policy": policy.cfg.to_dict(), "stage": stage, "steps": steps}
    if config is not None:
        meta["training"] = config.to_dict()
    dc.save_checkpoint(path, policy.arrays(), meta)


def load_policy(path) -> Policy:
    arrays, meta = dc.load_checkpoint(Path(path))
    if "policy" not in meta:
        raise InputError(f"{path}: checkpoint has no policy config")
    pcfg = PolicyConfig(**meta["policy"])
    return Policy(pcfg, params_from_arrays(arrays))
