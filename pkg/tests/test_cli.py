import json
import subprocess
import sys

import pytest

from dualanchor.cli import EXIT_INPUT, EXIT_OK, dispatch
from dualanchor.datagen import read_jsonl, write_jsonl

CFG = {
    "seed": 5,
    "data": {"n_worlds": 2, "episodes_per_world": 3},
    "model": {"d_llm": 16, "n_heads": 2, "n_layers": 1, "d_attn": 16, "d_sam": 4, "H": 4, "W": 4},
    "training": {"max_steps": 6, "batch_size": 8},
    "eval": {"max_steps": 40},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "c.json"
    cfg.write_text(json.dumps(CFG))
    c = ["--config", str(cfg)]
    assert dispatch(["gen-worlds", *c, "--out", str(d / "worlds.json")]) == EXIT_OK
    assert dispatch(["gen-episodes", *c, "--worlds", str(d / "worlds.json"), "--out", str(d / "eps.jsonl")]) == 0
    assert dispatch(["annotate", *c, "--worlds", str(d / "worlds.json"), "--episodes", str(d / "eps.jsonl"),
                     "--out", str(d / "data.jsonl")]) == 0
    assert dispatch(["train-stage1", *c, "--worlds", str(d / "worlds.json"), "--data", str(d / "data.jsonl"),
                     "--out", str(d / "m.ckpt")]) == 0
    return d, c


def test_manifests_written(run):
    d, _ = run
    for name in ("worlds.json", "eps.jsonl", "data.jsonl", "m.ckpt"):
        m = json.loads((d / f"{name}.manifest.json").read_text())
        assert m["seed"] == 5 and len(m["config_sha256"]) == 64
        assert set(m["versions"]) >= {"python", "numpy", "scipy", "artifact"}
    q = json.loads((d / "data.jsonl.manifest.json").read_text())["quality"]
    assert q["HR"] == 0.0 and q["LCS"] == 5.0


def test_eval_happy_path(run):
    d, c = run
    rc = dispatch(["eval", *c, "--checkpoint", str(d / "m.ckpt"), "--worlds", str(d / "worlds.json"),
                   "--episodes", str(d / "eps.jsonl"), "--out", str(d / "results")])
    assert rc == EXIT_OK
    assert (d / "results" / "results.csv").exists() and (d / "results" / "summary.json").exists()
    assert (d / "results" / "manifest.json").exists()
    s = json.loads((d / "results" / "summary.json").read_text())
    assert s["overall"]["n"] == 6


def test_train_twice_identical(run):
    d, c = run
    for name in ("a", "b"):
        assert dispatch(["train-stage1", *c, "--worlds", str(d / "worlds.json"), "--data", str(d / "data.jsonl"),
                         "--out", str(d / f"{name}.ckpt")]) == 0
    assert (d / "a.ckpt").read_bytes() == (d / "b.ckpt").read_bytes() == (d / "m.ckpt").read_bytes()
    assert (d / "a.log.csv").read_bytes() == (d / "b.log.csv").read_bytes()


def test_generation_deterministic(run, tmp_path):
    d, c = run
    assert dispatch(["gen-worlds", *c, "--out", str(tmp_path / "w.json")]) == 0
    assert (tmp_path / "w.json").read_bytes() == (d / "worlds.json").read_bytes()


def test_mine_reports_rejected(run, capsys):
    d, c = run
    recs = read_jsonl(d / "data.jsonl")
    target = next(r for r in recs if len(r.index.frames) >= 2)
    target.index.frames = [7, 3] + [None] * (len(target.index.frames) - 2)
    write_jsonl(recs, d / "bad.jsonl")
    capsys.readouterr()
    assert dispatch(["mine", *c, "--in", str(d / "bad.jsonl"), "--out", str(d / "mined.jsonl")]) == EXIT_OK
    err = capsys.readouterr().err
    assert f"rejected {target.episode_id}" in err
    mined = {r.episode_id: r for r in read_jsonl(d / "mined.jsonl")}
    assert not mined[target.episode_id].index.accepted
    # re-mining from the worlds restores the true, ordered frames
    assert dispatch(["mine", *c, "--in", str(d / "bad.jsonl"), "--worlds", str(d / "worlds.json")]) == 0
    assert f"rejected {target.episode_id}" not in capsys.readouterr().err


def test_dagger_stage2_report_sim(run, capsys):
    d, c = run
    assert dispatch(["dagger", *c, "--checkpoint", str(d / "m.ckpt"), "--worlds", str(d / "worlds.json"),
                     "--episodes", str(d / "eps.jsonl"), "--out", str(d / "dag.jsonl")]) == 0
    assert dispatch(["train-stage2", *c, "--checkpoint", str(d / "m.ckpt"), "--worlds", str(d / "worlds.json"),
                     "--data", str(d / "data.jsonl"), "--dagger", str(d / "dag.jsonl"),
                     "--out", str(d / "s2.ckpt")]) == 0
    assert dispatch(["sim-robot", *c, "--checkpoint", str(d / "s2.ckpt"), "--worlds", str(d / "worlds.json"),
                     "--episodes", str(d / "eps.jsonl"), "--limit", "1", "--out", str(d / "robot")]) == 0
    assert dispatch(["eval", *c, "--checkpoint", str(d / "s2.ckpt"), "--worlds", str(d / "worlds.json"),
                     "--episodes", str(d / "eps.jsonl"), "--out", str(d / "r2")]) == 0
    capsys.readouterr()
    assert dispatch(["report", str(d / "r2"), "--out", str(d / "rep.csv")]) == 0
    assert (d / "rep.csv").exists()


def test_missing_seed_is_input_error(tmp_path):
    assert dispatch(["gen-worlds", "--out", str(tmp_path / "w.json")]) == EXIT_INPUT
    assert not (tmp_path / "w.json").exists()


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 1, "training": {"lamda_wm": 0.1}}))
    assert dispatch(["gen-worlds", "--config", str(cfg), "--out", str(tmp_path / "w.json")]) == EXIT_INPUT
    assert "lamda_wm" in capsys.readouterr().err
    assert not (tmp_path / "w.json").exists()


def test_unknown_subcommand_and_flag(capsys):
    assert dispatch(["fly"]) == EXIT_INPUT
    assert dispatch(["gen-worlds", "--bogus"]) == EXIT_INPUT
    assert "usage" in capsys.readouterr().err


def test_missing_input_file(tmp_path):
    assert dispatch(["eval", "--seed", "1", "--checkpoint", str(tmp_path / "nope.ckpt"),
                     "--worlds", str(tmp_path / "nope.json"), "--episodes", str(tmp_path / "e.jsonl")]) == EXIT_INPUT


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "dualanchor", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "train-stage1" in out.stdout


def test_ablate_four_rows(run, capsys):
    d, c = run
    assert dispatch(["ablate", *c, "--worlds", str(d / "worlds.json"), "--data", str(d / "data.jsonl"),
                     "--episodes", str(d / "eps.jsonl"), "--out", str(d / "abl")]) == 0
    rows = json.loads((d / "abl" / "ablation.json").read_text())
    assert [r["config"] for r in rows] == ["baseline", "+IPA", "+MLA", "dual"]
    assert (d / "abl" / "manifest.json").exists()
