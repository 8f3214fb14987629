"""Episode rollouts, Monte Carlo metrics, baseline policies and the exhaustive oracle."""
from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .ddqn import TrainConfig, Trainer, act, observe
from .env import ACTION_COUNT, Action, ChannelParams, Environment, RewardParams, step
from .grid import CRA, Cell, PortfolioMap, Scenario, ScenarioConfig, generate_scenario
from .observation import ObsConfig, actual_flatten_size, flatten_size_literal, FlattenSizeError
from .qnet import ArchConfig, q_forward


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    cr: float
    crar: float
    steps_used: int
    reward_sum: float
    seed: int = 0


@dataclass(frozen=True)
class TrajectoryStep:
    index: int
    position: Cell
    action: int
    components: tuple[float, float, float, float]
    budget: int
    progress: float
    device: Optional[int]
    terminal: bool


@dataclass
class EvalReport:
    episodes: list[EpisodeResult]
    seed: int
    config: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.episodes)

    @property
    def success_rate(self) -> float:
        return float(np.mean([e.success for e in self.episodes]))

    @property
    def mean_cr(self) -> float:
        return float(np.mean([e.cr for e in self.episodes]))

    @property
    def mean_crar(self) -> float:
        return float(np.mean([e.crar for e in self.episodes]))


# -- policies ------------------------------------------------------------------------
# A policy is a callable ``policy(env) -> action ordinal`` with an optional
# ``reset(seed)`` hook invoked at the start of every episode.

class RandomPolicy:
    def __init__(self, seed: int = 0):
        self.reset(seed)

    def reset(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def __call__(self, env: Environment) -> int:
        return int(self.rng.integers(ACTION_COUNT))


class QPolicy:
    """Greedy (argmax) policy of a trained Q-network."""

    def __init__(self, params: dict, obs_cfg: ObsConfig):
        self.params = params
        self.obs_cfg = obs_cfg
        self._tensors = {}

    def __call__(self, env: Environment) -> int:
        key = id(env.map)
        if key not in self._tensors:
            self._tensors = {key: env.map.tensor()}
        obs = observe(env, self.obs_cfg, self._tensors[key])
        return act(q_forward(self.params, obs))


class SequencePolicy:
    """Replays a fixed action list, then holds."""

    def __init__(self, actions: Sequence[int]):
        self.actions = list(actions)
        self.i = 0

    def reset(self, seed: int):
        self.i = 0

    def __call__(self, env: Environment) -> int:
        a = self.actions[self.i] if self.i < len(self.actions) else Action.HOLD
        self.i += 1
        return int(a)


def _bfs(m: PortfolioMap, sources: Sequence[Cell]) -> np.ndarray:
    dist = np.full((m.size, m.size), -1, dtype=np.int64)
    queue = deque()
    for s in sources:
        dist[s] = 0
        queue.append(s)
    while queue:
        r, c = queue.popleft()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            n = (r + dr, c + dc)
            if m.inside(n) and not m.nogo[n] and dist[n] < 0:
                dist[n] = dist[r, c] + 1
                queue.append(n)
    return dist


_MOVE_ACTIONS = ((Action.PLUS_X, (1, 0)), (Action.MINUS_X, (-1, 0)),
                 (Action.PLUS_Y, (0, 1)), (Action.MINUS_Y, (0, -1)))


class GreedyPolicy:
    """Hand-scripted baseline: head for the nearest remaining target cell (CRA) or
    data-holding device (DH) while the budget still allows getting back to a
    start/finish cell, then return and assign."""

    def __init__(self):
        self._home = None

    def reset(self, seed: int):
        self._home = None

    def _step_towards(self, env: Environment, dist: np.ndarray) -> int:
        p = env.state.position
        best, best_d = Action.HOLD, dist[p]
        for a, (dr, dc) in _MOVE_ACTIONS:
            n = (p[0] + dr, p[1] + dc)
            if env.map.inside(n) and dist[n] >= 0 and dist[n] < best_d:
                best, best_d = a, dist[n]
        return int(best)

    def __call__(self, env: Environment) -> int:
        m = env.map
        if self._home is None or self._home[0] is not m:
            self._home = (m, _bfs(m, m.start_cells()))
        home = self._home[1]
        p = env.state.position
        budget = env.state.budget
        if env.devices is None:
            goals = [tuple(map(int, c)) for c in zip(*np.nonzero(env.target))]
        else:
            goals = [d.position for d, rem in zip(env.devices, env.target) if rem > 0]
            if env.devices and any(d.position == p for d, rem in zip(env.devices, env.target) if rem > 0):
                if budget > home[p] + 1:
                    return int(Action.HOLD)
        if goals:
            here = _bfs(m, [p])
            reachable = [(here[g], g) for g in goals if here[g] >= 0 and home[g] >= 0]
            reachable.sort()
            for d, g in reachable:
                if d + home[g] + 1 <= budget:
                    if d == 0:
                        break
                    return self._step_towards(env, _bfs(m, [g]))
        if m.start[p]:
            return int(Action.ASSIGN)
        return self._step_towards(env, home)


# -- rollouts ------------------------------------------------------------------------

def run_episode(policy: Callable, scenario: Scenario, seed: int = 0, reward: Optional[RewardParams] = None,
                channel: Optional[ChannelParams] = None, record: bool = False):
    """Roll ``policy`` until the episode terminates.

    Returns an :class:`EpisodeResult`, or ``(result, trajectory)`` with ``record``.
    """
    env = Environment(scenario, reward, channel, np.random.default_rng(seed))
    if hasattr(policy, "reset"):
        policy.reset(seed)
    trajectory = []
    total = 0.0
    steps = 0
    while not env.terminal and env.state.budget > 0:
        a = int(policy(env))
        outcome = env.step(a)
        total += outcome.reward
        if record:
            trajectory.append(TrajectoryStep(steps, env.state.position, a, outcome.components, env.state.budget,
                                             outcome.progress, outcome.device, env.terminal))
        steps += 1
    cr = env.coverage_ratio()
    success = env.state.success
    result = EpisodeResult(success=success, cr=cr, crar=cr if success else 0.0, steps_used=steps,
                           reward_sum=total, seed=seed)
    if record:
        return result, trajectory
    return result


def episode_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def monte_carlo_eval(policy: Callable, m: PortfolioMap, cfg: ScenarioConfig, n: int, seed: int,
                     reward: Optional[RewardParams] = None, channel: Optional[ChannelParams] = None,
                     config_echo: Optional[dict] = None) -> EvalReport:
    if n < 1:
        raise ValueError("n must be at least 1")
    reward = reward or RewardParams.for_mode(cfg.mode)
    results = []
    for s in episode_seeds(seed, n):
        scenario = generate_scenario(m, cfg, np.random.default_rng(s))
        results.append(run_episode(policy, scenario, s, reward, channel))
    return EvalReport(results, seed, dict(config_echo or {}))


# -- exhaustive oracle ---------------------------------------------------------------

MAX_ORACLE_BUDGET = 10


@dataclass(frozen=True)
class OracleResult:
    crar: float
    actions: tuple[int, ...]
    success: bool


def exhaustive_oracle(scenario: Scenario, reward: Optional[RewardParams] = None,
                      channel: Optional[ChannelParams] = None) -> OracleResult:
    """Best CRAR over every action sequence, by exhaustive search.

    Preference order: higher CRAR, then a successful ending, then fewer steps.
    Identical intermediate states are memoized, which leaves the search exhaustive.
    Fading is forced off so the dynamics are deterministic.
    """
    if scenario.budget > MAX_ORACLE_BUDGET:
        raise ValueError(f"budget {scenario.budget} too large for exhaustive search (max {MAX_ORACLE_BUDGET})")
    reward = reward or RewardParams.for_mode(scenario.mode)
    channel = channel or ChannelParams()
    if channel.shadow_sigma != 0:
        channel = ChannelParams(channel.los_exponent, channel.nlos_exponent, 0.0, channel.reference_rate,
                                channel.rate_floor, channel.selection)
    env = Environment(scenario, reward, channel)
    m, devices = env.map, env.devices
    total = env.initial_progress

    def cr_of(target, collected):
        if total <= 0:
            return 0.0
        done = total - float(target.sum()) if devices is None else collected
        return min(1.0, max(0.0, done / total))

    memo = {}

    def best(state, target, collected):
        # returns (crar, success, -steps, actions)
        key = (state.position, state.budget, state.link, target.tobytes(), round(collected, 12))
        if key in memo:
            return memo[key]
        result = (0.0, False, 0, ())
        for a in range(ACTION_COUNT):
            nstate, ntarget, outcome = step(m, target, devices, state, a, reward, channel)
            ncollected = collected + outcome.progress
            if nstate.terminal:
                crar = cr_of(ntarget, ncollected) if nstate.success else 0.0
                cand = (crar, nstate.success, -1, (a,))
            else:
                sub = best(nstate, ntarget, ncollected)
                cand = (sub[0], sub[1], sub[2] - 1, (a,) + sub[3])
            if cand[:3] > result[:3]:
                result = cand
        memo[key] = result
        return result

    state = scenario.initial_state()
    if state.budget == 0:
        return OracleResult(0.0, (), False)
    crar, success, _, actions = best(state, env.target, 0.0)
    return OracleResult(crar, actions, success)


# -- (proj, port) sweep --------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    proj: int
    port: int
    flatten_arch: Optional[int]
    flatten_literal: Optional[int]
    mean_crar: Optional[float]
    mean_cr: Optional[float]
    success_rate: Optional[float]
    agents: int
    train_seconds: float


def sweep(m: PortfolioMap, cfg: ScenarioConfig, projs: Sequence[int], ports: Sequence[int], arch: ArchConfig,
          train_cfg: TrainConfig, eval_n: int, agents: int = 3, reward: Optional[RewardParams] = None,
          channel: Optional[ChannelParams] = None, eval_seed: int = 0,
          progress: Optional[Callable[[str], None]] = None) -> list[SweepRow]:
    """Train ``agents`` agents per (proj, port) cell with seeds derived from
    ``train_cfg.seed`` and evaluate each on ``eval_n`` Monte Carlo episodes."""
    if not projs or not ports:
        raise ValueError("sweep needs at least one proj and one port value")
    rows = []
    for port in ports:
        for proj in projs:
            obs_cfg = ObsConfig(proj, port)
            kw = dict(n_c=arch.n_c, n_k=arch.n_k, s_k=arch.s_k)
            try:
                literal = flatten_size_literal(proj, port, m.size, **kw)
            except FlattenSizeError:
                literal = None
            try:
                flat = actual_flatten_size(proj, port, m.size, **kw)
            except FlattenSizeError:
                flat = None
            if flat is None or proj > 2 * m.size - 1 or port > 2 * m.size - 1:
                rows.append(SweepRow(proj, port, flat, literal, None, None, None, 0, 0.0))
                continue
            reports = []
            t0 = time.perf_counter()
            for k in range(agents):
                seed = train_cfg.seed + 1000 * k
                tc = TrainConfig(**{**train_cfg.__dict__, "seed": seed})
                trainer = Trainer(m, cfg, obs_cfg, arch, tc, reward, channel)
                for _ in range(tc.total_steps):
                    trainer.train_step()
                reports.append(monte_carlo_eval(QPolicy(trainer.theta, obs_cfg), m, cfg, eval_n, eval_seed,
                                                reward, channel))
                if progress:
                    progress(f"proj={proj} port={port} agent={k} crar={reports[-1].mean_crar:.3f}")
            elapsed = time.perf_counter() - t0
            rows.append(SweepRow(proj, port, flat, literal,
                                 float(np.mean([r.mean_crar for r in reports])),
                                 float(np.mean([r.mean_cr for r in reports])),
                                 float(np.mean([r.success_rate for r in reports])),
                                 agents, elapsed))
    return rows
