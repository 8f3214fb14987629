"""Transition dynamics for the CRA and DH task modes."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .grid import CRA, DH, AgentState, Cell, DeviceSpec, PortfolioMap, Scenario

VIEW_RADIUS = 2  # 5x5 sensor window


class Action(enum.IntEnum):
    PLUS_X = 0
    MINUS_X = 1
    PLUS_Y = 2
    MINUS_Y = 3
    HOLD = 4
    ASSIGN = 5


ACTION_COUNT = len(Action)

# x is the row axis (first coordinate), y the column axis
_MOVES = {
    Action.PLUS_X: (1, 0),
    Action.MINUS_X: (-1, 0),
    Action.PLUS_Y: (0, 1),
    Action.MINUS_Y: (0, -1),
}


class ContractViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardParams:
    r_c: float = 0.4
    r_sc: float = -1.0
    r_dec: float = -5.0
    r_delay: float = -0.1
    # multiply r_dec by the episode's initial budget
    scale_r_dec_by_budget: bool = True

    def __post_init__(self):
        if self.r_c <= 0:
            raise ValueError("r_c must be positive")
        if self.r_sc >= 0 or self.r_dec >= 0 or self.r_delay >= 0:
            raise ValueError("r_sc, r_dec and r_delay must be negative")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "RewardParams":
        base = cls(r_c=0.4 if mode == CRA else 0.2)
        return replace(base, **overrides)

    def decision_penalty(self, initial_budget: int) -> float:
        return self.r_dec * initial_budget if self.scale_r_dec_by_budget else self.r_dec


@dataclass(frozen=True)
class ChannelParams:
    los_exponent: float = 2.3
    nlos_exponent: float = 3.6
    shadow_sigma: float = 2.0  # dB
    reference_rate: float = 1.0
    rate_floor: float = 0.05
    selection: str = "rate_first"

    def __post_init__(self):
        if not (self.nlos_exponent >= self.los_exponent > 0):
            raise ValueError("need nlos_exponent >= los_exponent > 0")
        if self.shadow_sigma < 0 or self.rate_floor < 0 or self.reference_rate <= 0:
            raise ValueError("invalid channel parameters")
        if self.selection not in ("rate_first", "data_first"):
            raise ValueError("selection must be 'rate_first' or 'data_first'")


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    components: tuple[float, float, float, float]  # coverage_gain, safety, decision, delay
    events: frozenset = field(default_factory=frozenset)
    progress: float = 0.0  # newly covered cells (CRA) or data units collected (DH)
    device: Optional[int] = None  # DH: device that communicated this step


# -- line of sight -------------------------------------------------------------------

def supercover(a: Cell, b: Cell) -> list[Cell]:
    """Cells touched by the segment between the centres of ``a`` and ``b``, in order.

    Where the segment passes exactly through a cell corner both side cells are
    included.
    """
    x, y = a
    dx, dy = abs(b[0] - a[0]), abs(b[1] - a[1])
    sx = 1 if b[0] > a[0] else -1
    sy = 1 if b[1] > a[1] else -1
    cells = [(x, y)]
    ix = iy = 0
    while ix < dx or iy < dy:
        decision = (1 + 2 * ix) * dy - (1 + 2 * iy) * dx
        if decision == 0:
            cells.append((x + sx, y))
            cells.append((x, y + sy))
            x += sx
            y += sy
            ix += 1
            iy += 1
        elif decision < 0:
            x += sx
            ix += 1
        else:
            y += sy
            iy += 1
        cells.append((x, y))
    return cells


def los_clear(m: PortfolioMap, a: Cell, b: Cell) -> bool:
    """True iff no obstacle lies strictly between ``a`` and ``b``."""
    if a == b:
        return True
    for cell in supercover(a, b)[1:]:
        if cell == tuple(b):
            continue
        if m.obstacle[cell]:
            return False
    return True


def visibility_window(m: PortfolioMap, p: Cell) -> np.ndarray:
    """5x5 mask centred on ``p``; entry [i, j] refers to cell p + (i-2, j-2)."""
    mask = np.zeros((2 * VIEW_RADIUS + 1,) * 2, dtype=bool)
    for i in range(-VIEW_RADIUS, VIEW_RADIUS + 1):
        for j in range(-VIEW_RADIUS, VIEW_RADIUS + 1):
            cell = (p[0] + i, p[1] + j)
            if m.inside(cell) and los_clear(m, p, cell):
                mask[i + VIEW_RADIUS, j + VIEW_RADIUS] = True
    return mask


def window_to_grid(mask: np.ndarray, p: Cell, size: int) -> np.ndarray:
    """Place a window mask centred at ``p`` into a size x size grid (clipped)."""
    out = np.zeros((size, size), dtype=bool)
    r = mask.shape[0] // 2
    r0, c0 = p[0] - r, p[1] - r
    gr0, gc0 = max(r0, 0), max(c0, 0)
    gr1, gc1 = min(r0 + mask.shape[0], size), min(c0 + mask.shape[1], size)
    out[gr0:gr1, gc0:gc1] = mask[gr0 - r0:gr1 - r0, gc0 - c0:gc1 - c0]
    return out


def update_cra_target(target: np.ndarray, mask: np.ndarray, p: Cell) -> tuple[np.ndarray, int]:
    """Clear every visible target cell. Returns the new layer and the number of
    cells that were cleared."""
    visible = window_to_grid(mask, p, target.shape[0])
    target = np.asarray(target, dtype=bool)
    new = target & ~visible
    return new, int(target.sum() - new.sum())


# -- wireless channel ----------------------------------------------------------------

def channel_rate(m: PortfolioMap, p: Cell, device: DeviceSpec, remaining: float,
                 params: ChannelParams, rng: Optional[np.random.Generator] = None,
                 shadow_db: Optional[float] = None) -> float:
    """Data units the device can deliver this step.

    Path loss is a power law in Euclidean cell distance (clamped at 1) whose
    exponent depends on line of sight; shadow fading is log-normal. Pass
    ``shadow_db`` to supply the fading sample directly instead of drawing it.
    """
    if remaining <= 0:
        return 0.0
    dist = max(1.0, float(np.hypot(p[0] - device.position[0], p[1] - device.position[1])))
    alpha = params.los_exponent if los_clear(m, p, device.position) else params.nlos_exponent
    if shadow_db is None:
        shadow_db = rng.normal(0.0, params.shadow_sigma) if params.shadow_sigma > 0 else 0.0
    rate = params.reference_rate * dist ** (-alpha) * 10.0 ** (shadow_db / 10.0)
    if rate < params.rate_floor:
        return 0.0
    return float(min(rate, remaining))


def select_device(remaining: Sequence[float], rates: Sequence[float],
                  selection: str = "rate_first") -> Optional[int]:
    """Index of the device that communicates this step, or None.

    ``rate_first``: highest rate, ties by more remaining data, then lower index.
    ``data_first``: most remaining data among reachable devices, ties by rate.
    """
    best, best_key = None, None
    for i, (d, r) in enumerate(zip(remaining, rates)):
        if d <= 0 or r <= 0:
            continue
        key = (r, d) if selection == "rate_first" else (d, r)
        if best_key is None or key > best_key:
            best, best_key = i, key
    return best


def unify_target_layer(mode: str, size: int, cra_target: Optional[np.ndarray] = None,
                       devices: Sequence[DeviceSpec] = (), remaining: Optional[Sequence[float]] = None
                       ) -> np.ndarray:
    if mode == CRA:
        return np.asarray(cra_target, dtype=np.float64)
    layer = np.zeros((size, size), dtype=np.float64)
    if remaining is None:
        remaining = [d.initial_data for d in devices]
    for d, rem in zip(devices, remaining):
        if layer[d.position] != 0:
            raise ValueError(f"two devices at cell {d.position}")
        layer[d.position] = rem
    return layer


# -- transition ----------------------------------------------------------------------

def step(m: PortfolioMap, target: np.ndarray, devices: Optional[Sequence[DeviceSpec]],
         state: AgentState, action: int, reward: RewardParams, channel: ChannelParams,
         rng: Optional[np.random.Generator] = None) -> tuple[AgentState, np.ndarray, StepOutcome]:
    """Advance one decision step.

    CRA mode (``devices is None``): ``target`` is the boolean coverage layer.
    DH mode: ``target`` is the vector of remaining data, aligned with ``devices``.
    """
    if state.terminal:
        raise ContractViolation("cannot step a terminal state")
    if state.budget <= 0:
        raise ContractViolation("cannot step with an exhausted budget")
    action = Action(action)
    events = set()
    safety = 0.0
    decision = 0.0
    position = state.position
    success = False

    if action in _MOVES:
        dr, dc = _MOVES[action]
        dest = (position[0] + dr, position[1] + dc)
        if not m.inside(dest) or m.nogo[dest]:
            safety += reward.r_sc
            events.add("collision")
        else:
            position = dest
    elif action == Action.ASSIGN:
        if m.start[position]:
            success = True
            events.add("completed")
        else:
            safety += reward.r_sc
            events.add("collision")

    budget = state.budget - 1
    link = state.link
    device = None
    if devices is None:
        mask = visibility_window(m, position)
        target, progress = update_cra_target(target, mask, position)
    else:
        target = np.array(target, dtype=np.float64)
        if channel.shadow_sigma > 0:
            shadow = rng.normal(0.0, channel.shadow_sigma, size=len(devices))
        else:
            shadow = np.zeros(len(devices))
        rates = [channel_rate(m, position, d, target[i], channel, shadow_db=shadow[i])
                 for i, d in enumerate(devices)]
        device = select_device(target, rates, channel.selection)
        progress = 0.0
        if device is not None:
            progress = rates[device]
            target[device] -= progress
            if link is not None and link != device:
                events.add("device_switch")
            link = device

    coverage = reward.r_c * progress
    terminal = success
    if budget == 0 and not success:
        terminal = True
        decision = reward.decision_penalty(state.initial_budget)
        events.add("budget_exhausted")
    delay = reward.r_delay
    components = (coverage, safety, decision, delay)
    outcome = StepOutcome(reward=coverage + safety + decision + delay, components=components,
                          events=frozenset(events), progress=progress, device=device)
    new_state = AgentState(position=position, budget=budget, initial_budget=state.initial_budget,
                           terminal=terminal, success=success, link=link)
    return new_state, target, outcome


class Environment:
    """Mutable single-episode wrapper around :func:`step`."""

    def __init__(self, scenario: Scenario, reward: Optional[RewardParams] = None,
                 channel: Optional[ChannelParams] = None, rng: Optional[np.random.Generator] = None):
        self.reward = reward or RewardParams.for_mode(scenario.mode)
        self.channel = channel or ChannelParams()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.reset(scenario)

    def reset(self, scenario: Scenario) -> AgentState:
        self.scenario = scenario
        self.map = scenario.map
        self.state = scenario.initial_state()
        if scenario.mode == CRA:
            self.devices = None
            self.target = np.array(scenario.target, dtype=bool)
            self.initial_progress = float(self.target.sum())
        else:
            self.devices = scenario.devices
            self.target = np.array([d.initial_data for d in scenario.devices], dtype=np.float64)
            self.initial_progress = float(self.target.sum())
        self.collected = 0.0
        return self.state

    @property
    def mode(self) -> str:
        return self.scenario.mode

    @property
    def terminal(self) -> bool:
        return self.state.terminal

    def target_layer(self) -> np.ndarray:
        if self.devices is None:
            return unify_target_layer(CRA, self.map.size, cra_target=self.target)
        return unify_target_layer(DH, self.map.size, devices=self.devices, remaining=self.target)

    def coverage_ratio(self) -> float:
        """Covered fraction of the initial target cells (CRA) or collected fraction
        of the initial data (DH). Defined as 0 for an initially empty target."""
        if self.initial_progress <= 0:
            return 0.0
        if self.devices is None:
            done = self.initial_progress - float(self.target.sum())
        else:
            done = self.collected
        return min(1.0, max(0.0, done / self.initial_progress))

    def step(self, action: int) -> StepOutcome:
        self.state, self.target, outcome = step(self.map, self.target, self.devices, self.state,
                                                action, self.reward, self.channel, self.rng)
        self.collected += outcome.progress
        return outcome
