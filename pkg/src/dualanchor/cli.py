"""Command-line entry point; each subcommand wires a module pipeline to files.

Exit codes: 0 success, 1 input error (bad config, flags or data), 2 runtime fault.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .worldsim import InputError

EXIT_OK, EXIT_INPUT, EXIT_FAULT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


# -- shared helpers ----------------------------------------------------------------------

def _load_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else RunConfig()
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _need_seed(cfg: RunConfig) -> int:
    if cfg.seed is None:
        raise InputError("a seed is required: pass --seed or set \"seed\" in the config")
    return cfg.seed


def _path(flag, cfg: RunConfig, key: str, what: str) -> Path:
    p = flag if flag is not None else getattr(cfg.paths, key)
    if p is None:
        raise InputError(f"no {what} given: pass a flag or set paths.{key} in the config")
    return Path(p)


def _existing(p: Path, what: str) -> Path:
    if not p.exists():
        raise InputError(f"{what} {p} does not exist")
    return p


def _versions() -> dict:
    import scipy

    try:
        from importlib.metadata import version
        own = version("artifact")
    except Exception:
        own = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "artifact": own}


def write_manifest(output: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> Path:
    """Machine-readable provenance next to an output file (or inside an output directory)."""
    output = Path(output)
    target = output / "manifest.json" if output.is_dir() else output.with_name(output.name + ".manifest.json")
    doc = {"command": command, "config_sha256": cfg.digest(), "seed": cfg.seed, "versions": _versions(),
           "config": cfg.to_dict()}
    if extra:
        doc.update(extra)
    target.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return target


def _plans(path: Path):
    from .worldsim import load_plans

    return load_plans(_existing(path, "worlds file"))


def _episodes(path: Path):
    from .datagen import read_episodes

    return read_episodes(_existing(path, "episodes file"))


def _records(path: Path):
    from .datagen import read_jsonl

    return read_jsonl(_existing(path, "dataset"))


# -- subcommands -------------------------------------------------------------------------

def cmd_gen_worlds(args) -> int:
    from .worldgen import generate_plan
    from .worldsim import save_plans

    cfg = _load_config(args)
    seed = _need_seed(cfg)
    n = args.n_worlds if args.n_worlds is not None else cfg.data.n_worlds
    prefix = args.prefix or cfg.data.prefix
    if n < 1:
        raise InputError("n_worlds must be positive")
    out = _path(args.out, cfg, "worlds", "output path")
    ss = np.random.SeedSequence(seed)
    plans = [generate_plan(f"{prefix}{i:03d}", int(c.generate_state(1)[0]), cfg.world)
             for i, c in enumerate(ss.spawn(n))]
    out.parent.mkdir(parents=True, exist_ok=True)
    save_plans(plans, out)
    write_manifest(out, "gen-worlds", cfg, {"n_worlds": n})
    _err(f"wrote {n} worlds to {out}")
    return EXIT_OK


def cmd_gen_episodes(args) -> int:
    from .datagen import write_episodes
    from .worldgen import generate_episode

    cfg = _load_config(args)
    seed = _need_seed(cfg)
    plans = _plans(_path(args.worlds, cfg, "worlds", "worlds file"))
    per = args.per_world if args.per_world is not None else cfg.data.episodes_per_world
    out = _path(args.out, cfg, "episodes", "output path")
    eps = []
    for i, pid in enumerate(sorted(plans)):
        rng = np.random.default_rng([seed, i])
        for e in range(per):
            eps.append(generate_episode(plans[pid], f"{pid}-e{e:02d}", int(rng.integers(1 << 31)), cfg.world))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_episodes(eps, out)
    write_manifest(out, "gen-episodes", cfg, {"episodes": len(eps)})
    _err(f"wrote {len(eps)} episodes to {out}")
    return EXIT_OK


def cmd_annotate(args) -> int:
    from .datagen import QualityRecord, build_record, expert_rollout, quality_metrics, write_jsonl
    from .features import FeatureConfig, category_table
    from .grammar import prefix_text

    cfg = _load_config(args)
    plans = _plans(_path(args.worlds, cfg, "worlds", "worlds file"))
    eps = _episodes(_path(args.episodes, cfg, "episodes", "episodes file"))
    out = _path(args.out, cfg, "data", "output path")
    stride = args.stride or cfg.data.stride
    m = cfg.model
    fdir = out.with_suffix("").with_name(out.stem + "_features") if cfg.data.write_features else None
    table = category_table(m.num_categories, m.d_sam)
    fcfg = FeatureConfig(m.d_sam, m.H, m.W)
    records, quality = [], []
    for e in eps:
        if e.plan_id not in plans:
            raise InputError(f"episode {e.episode_id} refers to unknown world {e.plan_id}")
        plan = plans[e.plan_id]
        traj = expert_rollout(plan, e)
        rec = build_record(traj, e.instruction, plan, stride, {"source": "expert"}, fdir, table, fcfg)
        records.append(rec)
        labels = [(prefix_text(e.instruction, k), k) for k in rec.k if k is not None]
        quality.append(QualityRecord(e.instruction, labels, rec.index, traj.observations(plan)))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(records, out)
    q = quality_metrics(quality, cfg.seed or 0)
    rejected = sum(not r.index.accepted for r in records)
    write_manifest(out, "annotate", cfg, {"episodes": len(records), "rejected": rejected, "quality": q})
    _err(f"annotated {len(records)} episodes ({rejected} rejected by landmark ordering); "
         f"HR={q['HR']:.3f} LCS={q['LCS']:.2f} LPR mined={q['LPR_mined']:.3f} random={q['LPR_random']:.3f}")
    return EXIT_OK


def cmd_mine(args) -> int:
    from .datagen import mine_landmarks, validate_order, write_jsonl
    from .worldsim import observe

    cfg = _load_config(args)
    records = _records(Path(args.inp))
    worlds = args.worlds if args.worlds is not None else cfg.paths.worlds
    plans = _plans(Path(worlds)) if worlds else None
    rejected = []
    for rec in records:
        if plans is not None:
            if rec.world_id not in plans:
                raise InputError(f"episode {rec.episode_id} refers to unknown world {rec.world_id}")
            obs = [observe(plans[rec.world_id], p) for p in rec.poses]
            rec.index = mine_landmarks(obs, rec.instruction.subgoals)
            rec.t_star = [rec.index.t_star(t) for t in range(len(rec.poses))]
        else:
            ok, reason = validate_order(rec.index.frames)
            rec.index.accepted, rec.index.reason = ok, reason
        if not rec.index.accepted:
            rejected.append(rec)
    for rec in rejected:
        _err(f"rejected {rec.episode_id}: {rec.index.reason}")
    _err(f"mined {len(records)} episodes: {len(records) - len(rejected)} accepted, {len(rejected)} rejected")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_jsonl(records, out)
        write_manifest(out, "mine", cfg, {"rejected": [r.episode_id for r in rejected]})
    return EXIT_OK


def _train_cfg(cfg: RunConfig, stage: int):
    tc = cfg.training if stage == 1 else cfg.stage2_training()
    return dataclasses.replace(tc, seed=_need_seed(cfg), history=cfg.model.history)


def cmd_train_stage1(args) -> int:
    from .trainer import prepare, train_stage1

    cfg = _load_config(args)
    tcfg = _train_cfg(cfg, 1)
    plans = _plans(_path(args.worlds, cfg, "worlds", "worlds file"))
    records = _records(_path(args.data, cfg, "data", "dataset"))
    out = _path(args.out, cfg, "checkpoint", "checkpoint path") if (args.out or cfg.paths.checkpoint) \
        else Path(cfg.paths.out) / "stage1.ckpt"
    ds = prepare(records, plans, cfg.model)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    res = train_stage1(tcfg, ds, cfg.model, log_path, out)
    write_manifest(out, "train-stage1", cfg, {"steps": res.steps, "log": str(log_path)})
    _err(f"trained {res.steps} steps; checkpoint {out}")
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    from .trainer import load_policy, prepare, train_stage2

    cfg = _load_config(args)
    tcfg = _train_cfg(cfg, 2)
    plans = _plans(_path(args.worlds, cfg, "worlds", "worlds file"))
    ckpt = _existing(Path(args.checkpoint), "checkpoint")
    policy = load_policy(ckpt)
    base = prepare(_records(_path(args.data, cfg, "data", "dataset")), plans, policy.cfg)
    dag = prepare(_records(_path(args.dagger, cfg, "dagger", "DAgger shard")), plans, policy.cfg, "dagger")
    out = Path(args.out) if args.out else Path(cfg.paths.out) / "stage2.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    res = train_stage2(tcfg, base, dag, policy, log_path, out)
    write_manifest(out, "train-stage2", cfg, {"steps": res.steps, "from": str(ckpt)})
    _err(f"stage 2 trained {res.steps} steps on {len(base)} base + {len(dag)} DAgger steps; checkpoint {out}")
    return EXIT_OK


def cmd_dagger(args) -> int:
    from .dagger import collect
    from .trainer import load_policy

    cfg = _load_config(args)
    _need_seed(cfg)
    plans = _plans(_path(args.worlds, cfg, "worlds", "worlds file"))
    eps = _episodes(_path(args.episodes, cfg, "episodes", "episodes file"))
    policy = load_policy(_existing(Path(args.checkpoint), "checkpoint"))
    out = _path(args.out, cfg, "dagger", "output shard")
    out.parent.mkdir(parents=True, exist_ok=True)
    records, report = collect(policy, eps, plans, cfg.intervention, cfg.filter, out)
    write_manifest(out, "dagger", cfg, {"report": report.to_dict()})
    _err(f"DAgger: {report.accepted}/{report.episodes} accepted; interventions {report.interventions}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiment import evaluate_policy
    from .metrics import aggregate_and_report
    from .trainer import load_policy

    cfg = _load_config(args)
    plans = _plans(_path(args.worlds, cfg, "worlds", "worlds file"))
    ep_path = args.episodes or cfg.paths.eval_episodes or cfg.paths.episodes
    eps = _episodes(_path(ep_path, cfg, "eval_episodes", "episodes file"))
    ckpt = _path(args.checkpoint, cfg, "checkpoint", "checkpoint")
    policy = load_policy(_existing(ckpt, "checkpoint"))
    out = Path(args.out) if args.out else Path(cfg.paths.out) / "eval"
    results = evaluate_policy(policy, eps, plans, cfg.eval.success_radius, cfg.eval.max_steps, cfg.eval.batch)
    summary = aggregate_and_report(results, out)
    write_manifest(out, "eval", cfg, {"checkpoint": str(ckpt)})
    o = summary["overall"]
    _err(f"evaluated {o['n']} episodes: SR={o['SR'] or 0:.1f} SPL={o['SPL'] or 0:.1f} "
         f"OSR={o['OSR'] or 0:.1f} NE={o['NE'] or 0:.2f}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .bridge import PolicyService, SessionLogger, serve
    from .trainer import load_policy

    cfg = _load_config(args)
    ckpt = _path(args.checkpoint, cfg, "checkpoint", "checkpoint")
    policy = load_policy(_existing(ckpt, "checkpoint"))
    logger = SessionLogger(args.log_dir) if args.log_dir else None
    svc = PolicyService(policy, cfg.serve.latency, logger)
    host = args.host or cfg.serve.host
    port = args.port if args.port is not None else cfg.serve.port
    _err(f"serving /eval_vln on {host}:{port}")
    try:
        serve(svc, host, port, background=False)
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_sim_robot(args) -> int:
    from .bridge import HttpClient, PolicyService, SessionLogger, http_sender, local_sender, run_robot
    from .metrics import aggregate_and_report, evaluate_episode
    from .datagen import Step, Trajectory
    from .trainer import load_policy
    from .worldsim import NavAction

    cfg = _load_config(args)
    plans = _plans(_path(args.worlds, cfg, "worlds", "worlds file"))
    ep_path = args.episodes or cfg.paths.eval_episodes or cfg.paths.episodes
    eps = _episodes(_path(ep_path, cfg, "eval_episodes", "episodes file"))
    if args.episode_id:
        eps = [e for e in eps if e.episode_id in set(args.episode_id)]
        if not eps:
            raise InputError("no episode matches --episode-id")
    out = Path(args.out) if args.out else Path(cfg.paths.out) / "robot"
    logger = SessionLogger(out / "logs")
    if args.url:
        host, _, port = args.url.partition(":")
        client = HttpClient(host, int(port or 80))
        send = http_sender(client)
    else:
        ckpt = _path(args.checkpoint, cfg, "checkpoint", "checkpoint")
        send = local_sender(PolicyService(load_policy(_existing(ckpt, "checkpoint"))))
    results, worst = [], 0.0
    for e in eps[: args.limit] if args.limit else eps:
        run = run_robot(send, e, plans[e.plan_id], e.episode_id, cfg.eval.max_steps, logger)
        worst = max(worst, run.tracking_error)
        steps = [Step(i, s.pose(), NavAction.MOVE_FORWARD) for i, s in enumerate(run.states)]
        stopped = bool(run.actions) and run.actions[-1] == int(NavAction.STOP)
        if stopped:
            steps[-1] = Step(len(steps) - 1, run.states[-1].pose(), NavAction.STOP)
        traj = Trajectory(e.episode_id, e.plan_id, steps, terminal=stopped)
        results.append(evaluate_episode(traj, e, plans[e.plan_id], cfg.eval.success_radius))
    summary = aggregate_and_report(results, out)
    write_manifest(out, "sim-robot", cfg, {"max_tracking_error": worst})
    _err(f"robot loop on {len(results)} episodes: SR={summary['overall']['SR'] or 0:.1f}, "
         f"worst tracking error {100 * worst:.2f}% of path length")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _load_config(args)
    rows = []
    for d in args.results:
        p = _existing(Path(d) / "summary.json", "summary")
        s = json.loads(p.read_text())
        row = {"run": str(d), **{k: s["overall"][k] for k in ("n", "SR", "SPL", "OSR", "NE")}}
        for b, agg in s["buckets"].items():
            row[f"SR_{b}"] = agg["SR"]
        rows.append(row)
    text = _table(rows)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
        write_manifest(out, "report", cfg)
    print(text)
    return EXIT_OK


def _table(rows) -> str:
    if not rows:
        return "(no runs)"
    cols = list(rows[0])
    fmt = lambda v: "-" if v is None else (f"{v:.2f}" if isinstance(v, float) else str(v))
    widths = [max(len(c), *(len(fmt(r.get(c))) for r in rows)) for c in cols]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    for r in rows:
        lines.append("  ".join(fmt(r.get(c)).ljust(w) for c, w in zip(cols, widths)))
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    from .experiment import ABLATIONS, ablation_config, evaluate_policy
    from .metrics import aggregate_and_report
    from .trainer import prepare, train_stage1

    cfg = _load_config(args)
    base = _train_cfg(cfg, 1)
    plans = _plans(_path(args.worlds, cfg, "worlds", "worlds file"))
    records = _records(_path(args.data, cfg, "data", "dataset"))
    ep_path = args.episodes or cfg.paths.eval_episodes
    eps = _episodes(_path(ep_path, cfg, "eval_episodes", "evaluation episodes"))
    out = Path(args.out) if args.out else Path(cfg.paths.out) / "ablate"
    ds = prepare(records, plans, cfg.model)
    rows = []
    for name, prog, lm in ABLATIONS:
        tcfg = ablation_config(base, prog, lm)
        res = train_stage1(tcfg, ds, cfg.model)
        sub = out / name.replace("+", "plus_")
        summary = aggregate_and_report(evaluate_policy(res.policy, eps, plans, cfg.eval.success_radius,
                                                       cfg.eval.max_steps, cfg.eval.batch), sub)
        row = {"config": name, "IPA": prog, "MLA": lm,
               **{k: summary["overall"][k] for k in ("SR", "SPL", "OSR", "NE")}}
        for b, agg in summary["buckets"].items():
            row[f"SR_{b}"] = agg["SR"]
        rows.append(row)
        _err(f"{name}: SR={row['SR'] or 0:.1f}")
    (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "ablate", cfg)
    print(_table(rows))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dualanchor", description="Dual-anchoring navigation laboratory.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-worlds", cmd_gen_worlds, "generate floor plans")
    sp.add_argument("--out")
    sp.add_argument("--n-worlds", type=int)
    sp.add_argument("--prefix")

    sp = add("gen-episodes", cmd_gen_episodes, "generate episodes with instructions")
    sp.add_argument("--worlds")
    sp.add_argument("--out")
    sp.add_argument("--per-world", type=int)

    sp = add("annotate", cmd_annotate, "expert rollouts with progress labels and mined landmarks")
    sp.add_argument("--worlds")
    sp.add_argument("--episodes")
    sp.add_argument("--out")
    sp.add_argument("--stride", type=int)

    sp = add("mine", cmd_mine, "re-check landmark frame ordering in a dataset shard")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--worlds")
    sp.add_argument("--out")

    sp = add("train-stage1", cmd_train_stage1, "stage 1 training")
    sp.add_argument("--worlds")
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--log")

    sp = add("dagger", cmd_dagger, "collect a DAgger shard with a trained checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--worlds")
    sp.add_argument("--episodes")
    sp.add_argument("--out")

    sp = add("train-stage2", cmd_train_stage2, "stage 2 training on base plus DAgger data")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--worlds")
    sp.add_argument("--data")
    sp.add_argument("--dagger")
    sp.add_argument("--out")
    sp.add_argument("--log")

    sp = add("eval", cmd_eval, "evaluate a checkpoint (results.csv, summary.json)")
    sp.add_argument("--checkpoint")
    sp.add_argument("--worlds")
    sp.add_argument("--episodes")
    sp.add_argument("--out")

    sp = add("serve", cmd_serve, "serve POST /eval_vln")
    sp.add_argument("--checkpoint")
    sp.add_argument("--host")
    sp.add_argument("--port", type=int)
    sp.add_argument("--log-dir")

    sp = add("sim-robot", cmd_sim_robot, "closed-loop PD robot against the service")
    sp.add_argument("--checkpoint")
    sp.add_argument("--url", help="host:port of a running service; omit to run in-process")
    sp.add_argument("--worlds")
    sp.add_argument("--episodes")
    sp.add_argument("--episode-id", action="append")
    sp.add_argument("--limit", type=int)
    sp.add_argument("--out")

    sp = add("report", cmd_report, "compare summary.json files from several runs")
    sp.add_argument("results", nargs="+")
    sp.add_argument("--out")

    sp = add("ablate", cmd_ablate, "train and evaluate the four anchoring ablations")
    sp.add_argument("--worlds")
    sp.add_argument("--data")
    sp.add_argument("--episodes")
    sp.add_argument("--out")
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return EXIT_INPUT
        return args.fn(args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_INPUT
    except (InputError, ValueError, OSError, KeyError) as exc:
        _err(f"error: {exc}")
        return EXIT_INPUT
    except Exception as exc:  # faults from training, control or the simulator
        _err(f"fault: {exc.__class__.__name__}: {exc}")
        return EXIT_FAULT


def main() -> None:
    sys.exit(dispatch())
