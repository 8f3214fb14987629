"""Flat ``key = value`` run configuration shared by every subcommand."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .ddqn import TrainConfig
from .env import ChannelParams, RewardParams
from .grid import CRA, ScenarioConfig
from .observation import ObsConfig
from .qnet import ArchConfig


class ConfigError(ValueError):
    pass


def _f(default, doc: str):
    return field(default=default, metadata={"doc": doc})


@dataclass(frozen=True)
class RunConfig:
    mode: str = _f(CRA, "task mode: CRA or DH")
    map: str = _f("site32", "bundled map name (site32, site50, reduced16) or path to a map file")
    seed: int = _f(0, "master seed for scenario generation and training")
    # observation
    proj: int = _f(17, "local crop side (odd)")
    port: int = _f(3, "global average-pooling kernel")
    # scenario generation
    budget_min: int = _f(50, "smallest initial budget")
    budget_max: int = _f(150, "largest initial budget")
    cra_shapes_min: int = _f(3, "fewest target rectangles")
    cra_shapes_max: int = _f(8, "most target rectangles")
    cra_coverage_min: float = _f(0.2, "lowest target fraction of non-obstacle cells")
    cra_coverage_max: float = _f(0.5, "highest target fraction of non-obstacle cells")
    cra_size_min: int = _f(0, "smallest rectangle side (0: map size / 8)")
    cra_size_max: int = _f(0, "largest rectangle side (0: 2 * map size / 5)")
    dh_devices_min: int = _f(3, "fewest devices")
    dh_devices_max: int = _f(10, "most devices")
    dh_data_min: float = _f(5.0, "smallest device payload")
    dh_data_max: float = _f(20.0, "largest device payload")
    # reward
    r_c: float = _f(0.0, "progress reward (0: 0.4 per cell in CRA, 0.2 per data unit in DH)")
    r_sc: float = _f(-1.0, "safety controller penalty")
    r_dec: float = _f(-5.0, "non-completion penalty")
    r_dec_scale_by_budget: bool = _f(True, "multiply r_dec by the initial budget")
    r_delay: float = _f(-0.1, "per-step penalty")
    # channel
    los_exponent: float = _f(2.3, "path-loss exponent with line of sight")
    nlos_exponent: float = _f(3.6, "path-loss exponent without line of sight")
    shadow_sigma: float = _f(2.0, "shadow fading std-dev in dB")
    reference_rate: float = _f(1.0, "data units per step at unit distance")
    rate_floor: float = _f(0.05, "rates below this yield nothing")
    device_selection: str = _f("rate_first", "rate_first or data_first")
    # network
    n_k: int = _f(2, "conv layers per branch")
    n_c: int = _f(16, "kernels per conv layer")
    s_k: int = _f(5, "conv kernel side")
    hidden: str = _f("256 256 256", "three hidden dense widths")
    # training
    gamma: float = _f(0.95, "discount factor")
    tau: float = _f(0.005, "soft target update rate")
    learning_rate: float = _f(1e-3, "SGD step size")
    batch_size: int = _f(128, "replay batch size")
    replay_capacity: int = _f(50_000, "replay memory capacity")
    temperature_initial: float = _f(1.0, "initial softmax temperature")
    temperature_final: float = _f(0.1, "final softmax temperature")
    temperature_decay_steps: int = _f(0, "temperature decay horizon (0: 80% of total_steps)")
    total_steps: int = _f(100_000, "training steps")
    learning_starts: int = _f(1_000, "transitions collected before the first update")
    grad_clip: float = _f(10.0, "global gradient-norm clip")
    checkpoint_every: int = _f(0, "checkpoint cadence in steps (0: every 10% of total_steps)")
    # evaluation
    eval_episodes: int = _f(1000, "Monte Carlo episodes")
    eval_seed: int = _f(12345, "seed for evaluation scenarios")
    sweep_projs: str = _f("9 17 25 33", "proj values for sweeps")
    sweep_ports: str = _f("2 3 5 7", "port values for sweeps")
    sweep_agents: int = _f(3, "agents trained per sweep cell")
    sweep_eval_episodes: int = _f(200, "Monte Carlo episodes per sweep agent")

    def __post_init__(self):
        # build everything once so invalid values fail early
        self.scenario_config()
        self.reward()
        self.channel()
        self.arch()
        self.obs()
        self.train()

    # -- builders ---------------------------------------------------------------------

    def scenario_config(self) -> ScenarioConfig:
        size_range = None
        if self.cra_size_min or self.cra_size_max:
            size_range = (self.cra_size_min, self.cra_size_max)
        return ScenarioConfig(
            mode=self.mode,
            budget_range=(self.budget_min, self.budget_max),
            cra_shape_count_range=(self.cra_shapes_min, self.cra_shapes_max),
            cra_coverage_range=(self.cra_coverage_min, self.cra_coverage_max),
            cra_shape_size_range=size_range,
            dh_device_count_range=(self.dh_devices_min, self.dh_devices_max),
            dh_data_range=(self.dh_data_min, self.dh_data_max),
            seed=self.seed,
        )

    def reward(self) -> RewardParams:
        overrides = dict(r_sc=self.r_sc, r_dec=self.r_dec, r_delay=self.r_delay,
                         scale_r_dec_by_budget=self.r_dec_scale_by_budget)
        if self.r_c:
            overrides["r_c"] = self.r_c
        return RewardParams.for_mode(self.mode, **overrides)

    def channel(self) -> ChannelParams:
        return ChannelParams(self.los_exponent, self.nlos_exponent, self.shadow_sigma, self.reference_rate,
                             self.rate_floor, self.device_selection)

    def arch(self) -> ArchConfig:
        hidden = tuple(int(v) for v in self.hidden.split())
        return ArchConfig(n_k=self.n_k, n_c=self.n_c, s_k=self.s_k, hidden_sizes=hidden)

    def obs(self) -> ObsConfig:
        return ObsConfig(self.proj, self.port)

    def train(self) -> TrainConfig:
        return TrainConfig(
            gamma=self.gamma, tau=self.tau, learning_rate=self.learning_rate, batch_size=self.batch_size,
            replay_capacity=self.replay_capacity, temperature_initial=self.temperature_initial,
            temperature_final=self.temperature_final,
            temperature_decay_steps=self.temperature_decay_steps or None,
            total_steps=self.total_steps, learning_starts=self.learning_starts, grad_clip=self.grad_clip,
            seed=self.seed,
        )

    @property
    def checkpoint_interval(self) -> int:
        return self.checkpoint_every or max(1, self.total_steps // 10)

    def int_list(self, key: str) -> list[int]:
        return [int(v) for v in getattr(self, key).replace(",", " ").split()]

    # -- text form --------------------------------------------------------------------

    def items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(name: str, kind, raw: str):
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment). Unknown keys and
    duplicate keys are errors."""
    known = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, known[key], value)
    try:
        return replace(base or RunConfig(), **values)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def documented_keys() -> list[tuple[str, str, str]]:
    """(key, default, description) for every config key."""
    return [(f.name, _format(f.default), f.metadata.get("doc", "")) for f in fields(RunConfig)]
