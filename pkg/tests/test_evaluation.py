import numpy as np
import pytest

from armsim.ddqn import TrainConfig
from armsim.env import ACTION_COUNT, Action, ChannelParams, Environment
from armsim.evaluation import (GreedyPolicy, RandomPolicy, SequencePolicy, episode_seeds, exhaustive_oracle,
                               monte_carlo_eval, run_episode, sweep)
from armsim.grid import CRA, DH, DeviceSpec, Scenario, ScenarioConfig, load_bundled_map, parse_map
from armsim.qnet import ArchConfig
from fixtures import FIXTURES

NO_FADE = ChannelParams(shadow_sigma=0.0)
SMALL = load_bundled_map("reduced16")
SMALL_CRA = ScenarioConfig(mode=CRA, budget_range=(20, 40))


def test_immediate_assign():
    m = parse_map("L....\n.....\n.....\n.....\n.....")
    target = np.zeros((5, 5), bool)
    target[4, 4] = True
    s = Scenario(m, ScenarioConfig(mode=CRA), (0, 0), 5, target=target)
    r = run_episode(SequencePolicy([Action.ASSIGN]), s, 0, channel=NO_FADE)
    assert r.success and r.cr == 0.0 and r.crar == 0.0 and r.steps_used == 1


def test_perfect_episode():
    f = FIXTURES[0]
    r = run_episode(GreedyPolicy(), f.scenario, 0, channel=f.channel)
    assert r.success and r.cr == 1.0 and r.crar == 1.0


def test_partial_collection_ratio():
    m = parse_map("L....\n.....\n.....\n.....\n.....")
    devices = (DeviceSpec((0, 0), 9.91), DeviceSpec((4, 4), 0.09))
    s = Scenario(m, ScenarioConfig(mode=DH), (0, 0), 5, devices=devices)
    ch = ChannelParams(shadow_sigma=0.0, reference_rate=10.0)
    # landing on the first step drains only the co-located device
    r = run_episode(SequencePolicy([Action.ASSIGN]), s, 0, channel=ch)
    assert r.success
    assert r.cr == pytest.approx(0.991, abs=1e-12)


def test_budget_exhaustion_episode():
    f = FIXTURES[5]
    r = run_episode(SequencePolicy([]), f.scenario, 0, channel=f.channel)
    assert not r.success and r.crar == 0.0
    assert r.steps_used == f.scenario.budget


def test_trajectory_recording():
    f = FIXTURES[8]
    result, traj = run_episode(GreedyPolicy(), f.scenario, 0, channel=f.channel, record=True)
    assert [t.index for t in traj] == list(range(len(traj)))
    assert traj[-1].terminal and not any(t.terminal for t in traj[:-1])
    assert result.steps_used == len(traj)
    assert result.reward_sum == pytest.approx(sum(sum(t.components) for t in traj))


def test_report_aggregation_and_gating():
    rep = monte_carlo_eval(RandomPolicy(), SMALL, SMALL_CRA, 40, 5)
    assert rep.n == 40
    for e in rep.episodes:
        assert e.crar == (e.cr if e.success else 0.0)
        assert 0.0 <= e.cr <= 1.0 and 0.0 <= e.crar <= 1.0
        assert e.steps_used <= 40
    assert abs(rep.mean_cr - sum(e.cr for e in rep.episodes) / 40) <= 1e-12
    assert abs(rep.mean_crar - sum(e.crar for e in rep.episodes) / 40) <= 1e-12
    assert abs(rep.success_rate - sum(e.success for e in rep.episodes) / 40) <= 1e-12


def test_singleton_report():
    rep = monte_carlo_eval(GreedyPolicy(), SMALL, SMALL_CRA, 1, 2)
    e = rep.episodes[0]
    assert (rep.mean_cr, rep.mean_crar, rep.success_rate) == (e.cr, e.crar, float(e.success))


def test_eval_deterministic():
    cfg = ScenarioConfig(mode=DH, budget_range=(20, 40), dh_device_count_range=(3, 5), dh_data_range=(5.0, 10.0))
    a = monte_carlo_eval(RandomPolicy(), SMALL, cfg, 15, 9)
    b = monte_carlo_eval(RandomPolicy(), SMALL, cfg, 15, 9)
    assert a.episodes == b.episodes


def test_episode_seeds_distinct():
    seeds = episode_seeds(0, 1000)
    assert len(set(seeds)) == 1000
    assert seeds == episode_seeds(0, 1000)


def test_random_policy_uniform():
    pol = RandomPolicy(3)
    env = Environment(Scenario(parse_map("L"), ScenarioConfig(mode=CRA), (0, 0), 1, target=np.zeros((1, 1), bool)))
    counts = np.bincount([pol(env) for _ in range(100_000)], minlength=ACTION_COUNT)
    p = 1 / ACTION_COUNT
    sigma = np.sqrt(100_000 * p * (1 - p))
    assert np.all(np.abs(counts - 100_000 * p) < 3 * sigma)


def test_random_policy_trace_deterministic():
    env = Environment(Scenario(parse_map("L"), ScenarioConfig(mode=CRA), (0, 0), 1, target=np.zeros((1, 1), bool)))
    a, b = RandomPolicy(7), RandomPolicy(7)
    assert [a(env) for _ in range(50)] == [b(env) for _ in range(50)]


def test_random_policy_succeeds_sometimes():
    rep = monte_carlo_eval(RandomPolicy(), SMALL, SMALL_CRA, 50, 1)
    assert rep.success_rate > 0


# -- oracle --------------------------------------------------------------------------

def test_oracle_examples():
    assert exhaustive_oracle(FIXTURES[0].scenario, channel=NO_FADE).crar == 1.0
    assert exhaustive_oracle(FIXTURES[3].scenario, channel=NO_FADE).crar == 0.0
    empty = exhaustive_oracle(FIXTURES[1].scenario, channel=NO_FADE)
    assert empty.crar == 0.0 and empty.success and empty.actions == (Action.ASSIGN,)


def test_oracle_rejects_large_budget():
    f = FIXTURES[0]
    big = Scenario(f.scenario.map, f.scenario.config, (0, 0), 11, target=f.scenario.target)
    with pytest.raises(ValueError):
        exhaustive_oracle(big)


def test_oracle_sequence_replays_to_optimum():
    for f in FIXTURES:
        o = exhaustive_oracle(f.scenario, channel=f.channel)
        r = run_episode(SequencePolicy(o.actions), f.scenario, 0, channel=f.channel)
        assert r.crar == pytest.approx(o.crar, abs=1e-12), f.name


def test_oracle_dominates_policies():
    for f in FIXTURES:
        best = exhaustive_oracle(f.scenario, channel=f.channel).crar
        policies = [GreedyPolicy()] + [RandomPolicy(s) for s in range(3)]
        for k, pol in enumerate(policies):
            r = run_episode(pol, f.scenario, k, channel=f.channel)
            assert r.crar <= best + 1e-12, (f.name, k)


def test_greedy_matches_oracle_on_trivial_fixtures():
    trivial = [f for f in FIXTURES if f.trivial]
    assert len(trivial) >= 3
    for f in trivial:
        best = exhaustive_oracle(f.scenario, channel=f.channel).crar
        assert run_episode(GreedyPolicy(), f.scenario, 0, channel=f.channel).crar == pytest.approx(best)


# -- sweep ---------------------------------------------------------------------------

TINY = parse_map("L......\n.......\n..O....\n.......\n....N..\n.......\n......L")
TINY_CFG = ScenarioConfig(mode=CRA, budget_range=(5, 12), cra_shape_count_range=(1, 2),
                          cra_shape_size_range=(1, 3), cra_coverage_range=(0.05, 1.0))
TINY_ARCH = ArchConfig(n_k=2, n_c=4, s_k=3, hidden_sizes=(16, 16, 16))
TINY_TRAIN = TrainConfig(batch_size=8, replay_capacity=64, total_steps=40, learning_starts=8)


def test_single_cell_sweep():
    rows = sweep(TINY, TINY_CFG, [5], [3], TINY_ARCH, TINY_TRAIN, eval_n=5, agents=2)
    assert len(rows) == 1
    row = rows[0]
    assert (row.proj, row.port, row.agents) == (5, 3, 2)
    assert row.flatten_arch == 4 * (1 + 1) + 1
    assert 0 <= row.mean_crar <= 1
    again = sweep(TINY, TINY_CFG, [5], [3], TINY_ARCH, TINY_TRAIN, eval_n=5, agents=2)[0]
    assert (again.mean_crar, again.mean_cr, again.success_rate) == (row.mean_crar, row.mean_cr, row.success_rate)


def test_sweep_grid_shape_and_infeasible_cells():
    rows = sweep(TINY, TINY_CFG, [5, 7], [3, 20], TINY_ARCH, TrainConfig(total_steps=0), eval_n=1, agents=1)
    assert [(r.proj, r.port) for r in rows] == [(5, 3), (7, 3), (5, 20), (7, 20)]
    # port 20 exceeds the 13-cell centered canvas, so that cell is not trained
    assert rows[2].mean_crar is None and rows[2].agents == 0


def test_sweep_rejects_empty():
    with pytest.raises(ValueError):
        sweep(TINY, TINY_CFG, [], [3], TINY_ARCH, TINY_TRAIN, eval_n=1)
