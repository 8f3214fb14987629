"""Double deep Q-learning: replay memory, targets, exploration and the training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .env import ACTION_COUNT, ChannelParams, Environment, RewardParams
from .grid import CRA, PortfolioMap, ScenarioConfig, generate_scenario
from .observation import ObsConfig, Observation, assemble_observation
from .qnet import ArchConfig, ObsBatch, forward, init_params, q_gradient


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.95
    tau: float = 0.005
    learning_rate: float = 1e-3
    batch_size: int = 128
    replay_capacity: int = 50_000
    temperature_initial: float = 1.0
    temperature_final: float = 0.1
    # None: decay over the first 80% of total_steps
    temperature_decay_steps: Optional[int] = None
    total_steps: int = 100_000
    learning_starts: int = 1_000
    grad_clip: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size < 1 or self.replay_capacity < 1:
            raise ValueError("batch_size and replay_capacity must be positive")
        if self.temperature_initial <= 0 or self.temperature_final <= 0:
            raise ValueError("temperatures must be positive")
        if self.total_steps < 0 or self.learning_rate <= 0:
            raise ValueError("invalid total_steps / learning_rate")

    def temperature(self, step: int) -> float:
        """Exponential decay from the initial to the final temperature."""
        decay = self.temperature_decay_steps
        if decay is None:
            decay = int(0.8 * self.total_steps)
        if decay <= 0:
            return self.temperature_final
        frac = min(step, decay) / decay
        return self.temperature_initial * (self.temperature_final / self.temperature_initial) ** frac


def observe(env: Environment, cfg: ObsConfig, map_tensor: Optional[np.ndarray] = None) -> Observation:
    """Observation of the environment's current state, with the target layer
    scaled to [0, 1] and the budget divided by the configured maximum."""
    scenario = env.scenario
    scale = 1.0 if scenario.mode == CRA else scenario.max_device_data
    return assemble_observation(env.map, env.target_layer(), env.state, cfg, target_scale=scale,
                                budget_scale=scenario.config.max_budget, map_tensor=map_tensor)


class ReplayMemory:
    """Bounded FIFO ring of transitions stored in preallocated float32 arrays."""

    def __init__(self, capacity: int, local_shape: tuple, global_shape: tuple):
        self.capacity = capacity
        self.local = np.zeros((capacity, *local_shape), dtype=np.float32)
        self.glob = np.zeros((capacity, *global_shape), dtype=np.float32)
        self.budget = np.zeros(capacity, dtype=np.float32)
        self.next_local = np.zeros_like(self.local)
        self.next_glob = np.zeros_like(self.glob)
        self.next_budget = np.zeros_like(self.budget)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity, dtype=np.float32)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.newest = -1

    def __len__(self):
        return self.size

    def push(self, obs: Observation, action: int, reward: float, next_obs: Observation, terminal: bool):
        if not 0 <= action < ACTION_COUNT:
            raise ValueError(f"action ordinal {action} out of range")
        i = (self.newest + 1) % self.capacity
        self.local[i] = obs.local_stack()
        self.glob[i] = obs.global_stack()
        self.budget[i] = obs.budget
        self.next_local[i] = next_obs.local_stack()
        self.next_glob[i] = next_obs.global_stack()
        self.next_budget[i] = next_obs.budget
        self.action[i] = action
        self.reward[i] = reward
        self.terminal[i] = terminal
        self.newest = i
        self.size = min(self.size + 1, self.capacity)

    def oldest(self) -> int:
        return (self.newest + 1) % self.capacity if self.size == self.capacity else 0

    def batch(self, idx: np.ndarray):
        return (ObsBatch(self.local[idx], self.glob[idx], self.budget[idx]), self.action[idx],
                self.reward[idx], ObsBatch(self.next_local[idx], self.next_glob[idx], self.next_budget[idx]),
                self.terminal[idx])


def sample_batch_combined(memory: ReplayMemory, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Slot indices: the newest transition followed by ``batch_size - 1`` uniform
    draws (with replacement) over the whole memory."""
    if len(memory) == 0:
        raise ValueError("cannot sample from an empty memory")
    rest = rng.integers(0, len(memory), size=batch_size - 1)
    return np.concatenate([[memory.newest], rest]).astype(np.int64)


def ddqn_target(rewards, next_obs: ObsBatch, terminal, theta: dict, theta_bar: dict, gamma: float,
                q_next_online: Optional[np.ndarray] = None) -> np.ndarray:
    """Double-Q targets: the online network picks the bootstrap action and the
    target network values it. Terminal transitions do not bootstrap."""
    if q_next_online is None:
        q_next_online = forward(theta, next_obs)
    best = np.argmax(q_next_online, axis=1)
    q_next_target = forward(theta_bar, next_obs)
    bootstrap = q_next_target[np.arange(len(best)), best]
    rewards = np.asarray(rewards)
    return rewards + gamma * np.where(terminal, 0.0, bootstrap).astype(rewards.dtype)


def soft_update(theta_bar: dict, theta: dict, tau: float, inplace: bool = False) -> dict:
    out = theta_bar if inplace else {}
    for name, target in theta_bar.items():
        online = theta[name]
        if online.shape != target.shape:
            raise ValueError(f"shape mismatch for {name}: {target.shape} vs {online.shape}")
        if inplace:
            target *= (1.0 - tau)
            target += tau * online
        else:
            out[name] = (1.0 - tau) * target + tau * online
    return out


def softmax_probs(q: np.ndarray, temperature: float) -> np.ndarray:
    z = (q - np.max(q)) / temperature
    e = np.exp(z)
    return e / e.sum()


def act(q: np.ndarray, rng: Optional[np.random.Generator] = None, temperature: Optional[float] = None) -> int:
    """Argmax (lowest ordinal on ties) when ``temperature`` is None, otherwise a
    draw from softmax(q / temperature)."""
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValueError("non-finite Q-values")
    if temperature is None:
        return int(np.argmax(q))
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    p = softmax_probs(q, temperature)
    return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), len(q) - 1))


def sgd_update(params: dict, grads: dict, lr: float, clip: Optional[float]) -> float:
    """In-place gradient descent with global-norm clipping. Returns the
    pre-clipping gradient norm."""
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    scale = lr
    if clip is not None and norm > clip:
        scale = lr * clip / norm
    for name, g in grads.items():
        params[name] -= (scale * g).astype(params[name].dtype)
    return norm


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class StepLog:
    step: int
    loss: Optional[float]
    reward: float
    episode_done: bool
    episode_reward: float = 0.0
    episode_cr: float = 0.0
    episode_crar: float = 0.0
    episode_success: bool = False
    episode_loss: Optional[float] = None


@dataclass
class _Episode:
    reward: float = 0.0
    losses: list = field(default_factory=list)


class Trainer:
    """Owns the online/target parameters, replay memory and a training environment."""

    def __init__(self, m: PortfolioMap, scenario_cfg: ScenarioConfig, obs_cfg: ObsConfig,
                 arch: ArchConfig, train_cfg: TrainConfig, reward: Optional[RewardParams] = None,
                 channel: Optional[ChannelParams] = None, params: Optional[dict] = None):
        obs_cfg.check(m.size)
        self.map = m
        self.scenario_cfg = scenario_cfg
        self.obs_cfg = obs_cfg
        self.arch = arch
        self.cfg = train_cfg
        self.reward = reward or RewardParams.for_mode(scenario_cfg.mode)
        self.channel = channel or ChannelParams()
        init_ss, scen_ss, env_ss, act_ss, replay_ss = np.random.SeedSequence(train_cfg.seed).spawn(5)
        self.theta = params if params is not None else init_params(arch, obs_cfg, m.size, np.random.default_rng(init_ss))
        self.theta_bar = {k: v.copy() for k, v in self.theta.items()}
        self.scenario_rng = np.random.default_rng(scen_ss)
        self.act_rng = np.random.default_rng(act_ss)
        self.replay_rng = np.random.default_rng(replay_ss)
        self.map_tensor = m.tensor()
        side = obs_cfg.global_side(m.size)
        self.memory = ReplayMemory(train_cfg.replay_capacity, (obs_cfg.proj, obs_cfg.proj, 4), (side, side, 4))
        self.env = Environment(generate_scenario(m, scenario_cfg, self.scenario_rng), self.reward,
                               self.channel, np.random.default_rng(env_ss))
        self.obs = observe(self.env, obs_cfg, self.map_tensor)
        self.steps = 0
        self._episode = _Episode()

    def _reset_episode(self):
        self.env.reset(generate_scenario(self.map, self.scenario_cfg, self.scenario_rng))
        self.obs = observe(self.env, self.obs_cfg, self.map_tensor)
        self._episode = _Episode()

    def q_values(self, obs: Observation) -> np.ndarray:
        batch = ObsBatch(obs.local_stack()[None].astype(np.float32), obs.global_stack()[None].astype(np.float32),
                         np.array([obs.budget], dtype=np.float32))
        return forward(self.theta, batch)[0]

    def train_step(self) -> StepLog:
        if self.env.terminal:
            self._reset_episode()
        temperature = self.cfg.temperature(self.steps)
        action = act(self.q_values(self.obs), self.act_rng, temperature)
        outcome = self.env.step(action)
        next_obs = observe(self.env, self.obs_cfg, self.map_tensor)
        self.memory.push(self.obs, action, outcome.reward, next_obs, self.env.terminal)
        self.obs = next_obs
        self._episode.reward += outcome.reward

        loss = None
        if len(self.memory) >= max(1, self.cfg.learning_starts):
            idx = sample_batch_combined(self.memory, self.cfg.batch_size, self.replay_rng)
            obs_b, actions, rewards, next_b, terminal = self.memory.batch(idx)
            targets = ddqn_target(rewards, next_b, terminal, self.theta, self.theta_bar, self.cfg.gamma)
            loss, grads = q_gradient(self.theta, obs_b, actions, targets.astype(np.float32))
            if not math.isfinite(loss):
                raise NonFiniteLossError(f"loss became {loss} at step {self.steps}")
            sgd_update(self.theta, grads, self.cfg.learning_rate, self.cfg.grad_clip)
            soft_update(self.theta_bar, self.theta, self.cfg.tau, inplace=True)
            self._episode.losses.append(loss)
        self.steps += 1

        log = StepLog(step=self.steps, loss=loss, reward=outcome.reward, episode_done=self.env.terminal)
        if self.env.terminal:
            cr = self.env.coverage_ratio()
            success = self.env.state.success
            log.episode_reward = self._episode.reward
            log.episode_cr = cr
            log.episode_crar = cr if success else 0.0
            log.episode_success = success
            log.episode_loss = float(np.mean(self._episode.losses)) if self._episode.losses else None
        return log
