"""Egocentric observation pipeline: centering, local crop and global pooling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import AgentState, Cell, PortfolioMap

MAP_PAD = (0.0, 1.0, 1.0)  # outside the map: not a start cell, no-go, obstacle
TARGET_PAD = 0.0


@dataclass(frozen=True)
class ObsConfig:
    proj: int = 17
    port: int = 3

    def __post_init__(self):
        if self.proj < 1 or self.proj % 2 == 0:
            raise ValueError(f"proj must be an odd positive integer, got {self.proj}")
        if self.port < 1:
            raise ValueError(f"port must be positive, got {self.port}")

    def check(self, size: int) -> None:
        cm = 2 * size - 1
        if self.proj > cm or self.port > cm:
            raise ValueError(f"proj={self.proj} / port={self.port} exceed centered size {cm}")

    def global_side(self, size: int) -> int:
        return math.ceil((2 * size - 1) / self.port)


@dataclass(frozen=True, eq=False)
class CenteredMap:
    values: np.ndarray  # (2C-1, 2C-1, n)
    pad: np.ndarray  # (n,)

    @property
    def size(self) -> int:
        """Side C of the physical map that was centered."""
        return (self.values.shape[0] + 1) // 2


@dataclass(frozen=True, eq=False)
class Observation:
    local_map: np.ndarray
    local_target: np.ndarray
    global_map: np.ndarray
    global_target: np.ndarray
    budget: float

    def local_stack(self) -> np.ndarray:
        return np.concatenate([self.local_map, self.local_target[..., None]], axis=-1)

    def global_stack(self) -> np.ndarray:
        return np.concatenate([self.global_map, self.global_target[..., None]], axis=-1)


def center_map(a: np.ndarray, p: Cell, pad) -> CenteredMap:
    """Translate ``a`` (C x C x n, or C x C) so that cell ``p`` lands at (C-1, C-1)
    of a (2C-1) x (2C-1) canvas filled with ``pad``."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[..., None]
    size, n = a.shape[0], a.shape[2]
    pad = np.atleast_1d(np.asarray(pad, dtype=np.float64))
    if pad.shape != (n,):
        raise ValueError(f"pad vector has length {pad.size}, map has {n} layers")
    if not (0 <= p[0] < size and 0 <= p[1] < size):
        raise ValueError(f"position {p} outside the {size}x{size} map")
    cm = 2 * size - 1
    b = np.empty((cm, cm, n))
    b[...] = pad
    r0, c0 = size - 1 - p[0], size - 1 - p[1]
    b[r0:r0 + size, c0:c0 + size] = a
    return CenteredMap(b, pad)


def crop_project(b: CenteredMap, proj: int) -> np.ndarray:
    """Central proj x proj window of the centered map."""
    cm = b.values.shape[0]
    if proj > cm:
        raise ValueError(f"proj={proj} exceeds centered size {cm}")
    if proj < 1 or proj % 2 == 0:
        raise ValueError(f"proj must be odd and positive, got {proj}")
    start = b.size - 1 - proj // 2
    return b.values[start:start + proj, start:start + proj].copy()


def pool_portfolio(b: CenteredMap, port: int) -> np.ndarray:
    """Non-overlapping port x port mean pooling. The canvas is first padded on the
    high-index edges with the pad vector up to a multiple of ``port``."""
    if port < 1:
        raise ValueError("port must be positive")
    cm, n = b.values.shape[0], b.values.shape[2]
    g = math.ceil(cm / port)
    full = np.empty((g * port, g * port, n))
    full[...] = b.pad
    full[:cm, :cm] = b.values
    return full.reshape(g, port, g, port, n).mean(axis=(1, 3))


def assemble_observation(m: PortfolioMap, target: np.ndarray, state: AgentState, cfg: ObsConfig,
                         target_scale: float = 1.0, budget_scale: Optional[float] = None,
                         map_tensor: Optional[np.ndarray] = None) -> Observation:
    """Build the agent's observation.

    ``target`` is the unified C x C target layer; it is divided by
    ``target_scale`` (the largest device payload in DH, 1 in CRA). The budget is
    divided by ``budget_scale`` when given.
    """
    if map_tensor is None:
        map_tensor = m.tensor()
    cmap = center_map(map_tensor, state.position, MAP_PAD)
    ctarget = center_map(np.asarray(target, dtype=np.float64) / target_scale, state.position, TARGET_PAD)
    budget = float(state.budget)
    if budget < 0:
        raise ValueError("negative budget")
    if budget_scale:
        budget /= budget_scale
    return Observation(
        local_map=crop_project(cmap, cfg.proj),
        local_target=crop_project(ctarget, cfg.proj)[..., 0],
        global_map=pool_portfolio(cmap, cfg.port),
        global_target=pool_portfolio(ctarget, cfg.port)[..., 0],
        budget=budget,
    )


class FlattenSizeError(ValueError):
    pass


def flatten_size_literal(proj: int, port: int, size: int, n_c: int = 16, n_k: int = 2, s_k: int = 5) -> int:
    """Literal flatten-width formula: each conv layer is assumed to trim
    floor(s_k / 2) cells from a side."""
    g = math.ceil((2 * size - 1) / port)
    trim = n_k * (s_k // 2)
    local, glob = proj - trim, g - trim
    if local < 0 or glob < 0:
        raise FlattenSizeError(f"negative side inside square: local={local}, global={glob}")
    return n_c * (local ** 2 + glob ** 2) + 1


def actual_flatten_size(proj: int, port: int, size: int, n_c: int = 16, n_k: int = 2, s_k: int = 5) -> int:
    """Flatten width of the real network: every valid s_k x s_k convolution trims
    s_k - 1 cells from each side; the +1 is the budget scalar."""
    g = math.ceil((2 * size - 1) / port)
    trim = n_k * (s_k - 1)
    local, glob = proj - trim, g - trim
    if local < 1 or glob < 1:
        raise FlattenSizeError(f"conv stack shrinks a branch below one cell: local={local}, global={glob}")
    return n_c * (local ** 2 + glob ** 2) + 1
