import re

import numpy as np
import pytest

from armsim.cli import (CommandError, cmd_eval, cmd_gen, cmd_render, cmd_sizecalc, cmd_sweep, cmd_train, csv_body,
                        main, read_csv_rows, rollout, sizecalc_line)
from armsim.config import ConfigError, RunConfig, documented_keys, load_config, parse_config
from armsim.grid import load_scenario
from armsim.observation import actual_flatten_size, flatten_size_literal
from armsim.render import COLORS, TrajectoryError, device_color, render_svg

QUICK = """\
map = reduced16
proj = 9
port = 3
hidden = 16 16 16
budget_min = 20
budget_max = 40
batch_size = 8
replay_capacity = 128
learning_starts = 16
total_steps = 80
eval_episodes = 6
sweep_eval_episodes = 2
sweep_agents = 1
"""


def quick(**kw):
    return parse_config(QUICK).with_overrides(**kw)


# -- config --------------------------------------------------------------------------

def test_config_defaults_documented():
    keys = documented_keys()
    assert len(keys) == len(RunConfig().items())
    assert all(doc for _, _, doc in keys)


def test_config_text_roundtrip():
    cfg = quick(mode="DH", seed=4)
    assert parse_config(cfg.to_text()) == cfg


def test_config_comments_and_whitespace():
    cfg = parse_config("# heading\n  seed=3   # trailing\n\nmode = DH\n")
    assert cfg.seed == 3 and cfg.mode == "DH"


@pytest.mark.parametrize("text", ["sede = 3", "seed = 1\nseed = 2", "seed = x", "no equals sign", "proj = 8"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_unknown_key_aborts_before_work(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("total_stepz = 10\n")
    rc = main(["train", "--config", str(bad), "--out", str(tmp_path / "run")])
    assert rc == 2
    assert "total_stepz" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_load_config_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_config(tmp_path / "nope.cfg")


# -- gen -----------------------------------------------------------------------------

def test_gen_deterministic_and_parseable(tmp_path):
    a = cmd_gen(quick(seed=11), tmp_path / "a.txt")
    b = cmd_gen(quick(seed=11), tmp_path / "b.txt")
    assert a.read_bytes() == b.read_bytes()
    s = load_scenario(a)
    assert s.map.size == 16 and 20 <= s.budget <= 40


def test_gen_dh_device_count(tmp_path):
    for seed in range(5):
        cfg = quick(mode="DH", seed=seed, dh_devices_min=3, dh_devices_max=5)
        s = load_scenario(cmd_gen(cfg, tmp_path / f"s{seed}.txt"))
        assert 3 <= len(s.devices) <= 5


def test_main_gen_seed_override(tmp_path, capsys):
    cfgfile = tmp_path / "q.cfg"
    cfgfile.write_text(QUICK)
    assert main(["gen", "--config", str(cfgfile), "--seed", "5", "--out", str(tmp_path)]) == 0
    direct = cmd_gen(quick(seed=5), tmp_path / "direct.txt")
    assert (tmp_path / "scenario.txt").read_bytes() == direct.read_bytes()


# -- train / eval --------------------------------------------------------------------

def test_train_zero_steps(tmp_path):
    ckpt, metrics = cmd_train(quick(total_steps=0), tmp_path)
    assert [p.name for p in (tmp_path / "checkpoints").iterdir()] == ["step_00000000.qnet"]
    assert ckpt.name == "step_00000000.qnet"
    body = csv_body(metrics).splitlines()
    assert body == ["step,loss,episode_reward,episode_cr,episode_crar,episode_success"]


def test_train_header_echoes_config(tmp_path):
    _, metrics = cmd_train(quick(total_steps=0, seed=17), tmp_path)
    head = [line for line in metrics.read_text().splitlines() if line.startswith("#")]
    assert "# seed = 17" in head and "# proj = 9" in head
    assert load_config(tmp_path / "config.cfg") == quick(total_steps=0, seed=17)


def test_train_checkpoint_cadence(tmp_path):
    ckpt, _ = cmd_train(quick(total_steps=80, checkpoint_every=30), tmp_path)
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == [f"step_{k:08d}.qnet" for k in (0, 30, 60, 80)]
    assert ckpt.name == "step_00000080.qnet"


def test_train_and_eval_rerun_stable(tmp_path):
    cfg = quick(total_steps=120)
    c1, m1 = cmd_train(cfg, tmp_path / "a")
    c2, m2 = cmd_train(cfg, tmp_path / "b")
    assert csv_body(m1) == csv_body(m2)
    assert len(read_csv_rows(m1)) > 0
    assert c1.read_bytes() == c2.read_bytes()
    e1, _ = cmd_eval(cfg, tmp_path / "a", c1)
    e2, _ = cmd_eval(cfg, tmp_path / "b", c2)
    assert csv_body(e1) == csv_body(e2)


def test_eval_rows_and_summary(tmp_path):
    cfg = quick()
    path, report = cmd_eval(cfg, tmp_path, n=7, policy="random")
    rows = read_csv_rows(path)
    assert len(rows) == 8
    assert [r["episode"] for r in rows[:7]] == [str(i) for i in range(7)]
    summary = rows[-1]
    assert summary["episode"] == "summary"
    assert float(summary["crar"]) == report.mean_crar
    assert float(summary["cr"]) == report.mean_cr
    assert float(summary["success"]) == report.success_rate
    assert abs(np.mean([float(r["crar"]) for r in rows[:7]]) - report.mean_crar) <= 1e-12


def test_eval_policy_requires_checkpoint(tmp_path):
    with pytest.raises(CommandError):
        cmd_eval(quick(), tmp_path, n=1)


def test_eval_checkpoint_shape_mismatch(tmp_path):
    ckpt, _ = cmd_train(quick(total_steps=0), tmp_path / "t")
    with pytest.raises(CommandError, match="does not fit"):
        cmd_eval(quick(proj=11), tmp_path / "e", ckpt, n=1)
    assert main(["eval", "--checkpoint", str(ckpt), "--out", str(tmp_path / "e2"), "-n", "1"]) == 2


def test_main_eval_random(tmp_path, capsys):
    cfgfile = tmp_path / "q.cfg"
    cfgfile.write_text(QUICK)
    assert main(["eval", "--config", str(cfgfile), "--random-policy", "-n", "3", "--out", str(tmp_path)]) == 0
    assert "n=3" in capsys.readouterr().out
    assert len(read_csv_rows(tmp_path / "eval.csv")) == 4


# -- sweep ---------------------------------------------------------------------------

def test_sweep_single_cell(tmp_path):
    path = cmd_sweep(quick(total_steps=30), tmp_path, [9], [3])
    rows = read_csv_rows(path)
    assert len(rows) == 1
    assert int(rows[0]["flatten_arch"]) == actual_flatten_size(9, 3, 16)
    assert int(rows[0]["flatten_literal"]) == flatten_size_literal(9, 3, 16)
    assert any(line.startswith("# wall_clock proj=9 port=3") for line in path.read_text().splitlines())


def test_sweep_full_grid_layout(tmp_path):
    # untrained agents keep this fast; the row layout is what matters here
    cfg = quick(total_steps=0, sweep_eval_episodes=1, map="site32")
    path = cmd_sweep(cfg, tmp_path, [9, 17, 25, 33], [2, 3, 5, 7])
    rows = read_csv_rows(path)
    assert len(rows) == 16
    assert {(int(r["proj"]), int(r["port"])) for r in rows} == {(p, q) for p in (9, 17, 25, 33) for q in (2, 3, 5, 7)}
    for r in rows:
        assert int(r["flatten_literal"]) == flatten_size_literal(int(r["proj"]), int(r["port"]), 32)
        assert int(r["flatten_arch"]) == actual_flatten_size(int(r["proj"]), int(r["port"]), 32)


def test_sweep_rerun_stable(tmp_path):
    cfg = quick(total_steps=30)
    a = cmd_sweep(cfg, tmp_path / "a", [9], [3, 5])
    b = cmd_sweep(cfg, tmp_path / "b", [9], [3, 5])
    assert csv_body(a) == csv_body(b)


def test_sweep_empty_lists(tmp_path):
    with pytest.raises(CommandError):
        cmd_sweep(quick(), tmp_path, [], [3])


# -- render --------------------------------------------------------------------------

def _polyline_points(svg):
    m = re.search(r'<polyline[^>]*class="path"[^>]*points="([^"]*)"', svg)
    return None if m is None else m.group(1).split()


def test_render_empty_trajectory(tmp_path):
    scen = cmd_gen(quick(seed=1), tmp_path / "s.txt")
    svg = cmd_render(scen, [], tmp_path / "empty.svg").read_text()
    assert svg.startswith("<svg") or svg.startswith("<?xml")
    assert _polyline_points(svg) is None
    assert svg.count('class="move"') == 0
    assert svg.count("<rect") >= 16 * 16


def test_render_three_steps(tmp_path):
    scen_path = cmd_gen(quick(seed=1), tmp_path / "s.txt")
    steps = rollout(quick(seed=1), scen_path, "random")[:3]
    steps = [s if i < 2 else s.__class__(**{**s.__dict__, "terminal": True}) for i, s in enumerate(steps)]
    svg = cmd_render(scen_path, steps, tmp_path / "three.svg").read_text()
    assert len(_polyline_points(svg)) == 4
    assert svg.count('class="move"') == 3


def test_render_dh_link_colors(tmp_path):
    cfg = quick(mode="DH", seed=3, dh_devices_min=3, dh_devices_max=5, reference_rate=2.0)
    scen_path = cmd_gen(cfg, tmp_path / "s.txt")
    steps = rollout(cfg, scen_path, "greedy")
    svg = cmd_render(scen_path, steps, tmp_path / "dh.svg").read_text()
    moves = re.findall(r'class="move" data-step="(\d+)" data-device="(-?\d*)"[^>]*(?:stroke|fill)="([^"]+)"', svg)
    assert len(moves) == len(steps)
    for (idx, dev, color), step in zip(moves, steps):
        assert int(idx) == step.index
        assert color == (COLORS["idle"] if step.device is None else device_color(step.device))
        assert dev == ("" if step.device is None else str(step.device))
    assert any(s.device is not None for s in steps)


def test_render_trajectory_csv_roundtrip(tmp_path, capsys):
    cfgfile = tmp_path / "q.cfg"
    cfgfile.write_text(QUICK)
    scen = cmd_gen(quick(seed=2), tmp_path / "s.txt")
    assert main(["render", "--config", str(cfgfile), "--scenario", str(scen), "--random-policy",
                 "--out", str(tmp_path), "--name", "r.svg"]) == 0
    traj = tmp_path / "r.trajectory.csv"
    assert traj.exists()
    direct = cmd_render(scen, traj, tmp_path / "again.svg")
    assert direct.read_text() == (tmp_path / "r.svg").read_text()


def test_render_rejects_off_grid(tmp_path):
    scen_path = cmd_gen(quick(seed=1), tmp_path / "s.txt")
    steps = rollout(quick(seed=1), scen_path, "random")
    bad = [steps[0].__class__(**{**steps[0].__dict__, "position": (40, 0)})] + list(steps[1:])
    with pytest.raises(TrajectoryError):
        render_svg(load_scenario(scen_path), bad)


# -- sizecalc ------------------------------------------------------------------------

def test_sizecalc_lines():
    assert sizecalc_line(9, 7, 32) == "proj=9 port=7 C=32: 801 (literal) / 16(1+1)+1 = 33 (arch)"
    assert sizecalc_line(17, 5, 32) == "proj=17 port=5 C=32: 4001 (literal) / 16(81+25)+1 = 1697 (arch)"


def test_sizecalc_degenerate_flags():
    line = sizecalc_line(4, 7, 32)
    assert "[local term 0]" in line
    assert "n/a" in line.split(" / ")[1]


def test_sizecalc_table():
    text = cmd_sizecalc(RunConfig(), [9, 17], [5, 7], 32)
    lines = text.splitlines()
    assert len(lines) == 4
    assert "proj=9 port=7 C=32: 801 (literal)" in text
