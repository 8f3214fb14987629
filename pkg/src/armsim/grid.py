"""World model: portfolio maps, scenario generation and the scenario file format.

Cells are addressed as ``(row, col)`` integer pairs, row 0 being the first line of
a map file.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from typing import Optional, Sequence

import numpy as np

Cell = tuple[int, int]

CRA = "CRA"
DH = "DH"
MODES = (CRA, DH)

MAP_ALPHABET = ".LNO"
MAX_TARGET_ATTEMPTS = 1000
SCENARIO_MAGIC = "armsim-scenario"
SCENARIO_VERSION = 1


class MapParseError(ValueError):
    """Malformed map text. ``line`` and ``column`` are 1-based."""

    def __init__(self, message: str, line: int, column: int = 0):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class NonSquareMapError(MapParseError):
    pass


class UnknownCharacterError(MapParseError):
    pass


class NoStartCellError(MapParseError):
    pass


class ScenarioError(RuntimeError):
    """Generation could not satisfy the configured constraints."""


class ScenarioFormatError(ValueError):
    """Scenario text is truncated, corrupted or from another format version."""


class ScenarioVersionError(ScenarioFormatError):
    pass


@dataclass(frozen=True, eq=False)
class PortfolioMap:
    start: np.ndarray
    nogo: np.ndarray
    obstacle: np.ndarray

    def __post_init__(self):
        for name in ("start", "nogo", "obstacle"):
            arr = np.array(getattr(self, name), dtype=bool)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        size = self.start.shape[0]
        if any(a.shape != (size, size) for a in (self.start, self.nogo, self.obstacle)):
            raise ValueError("all map layers must be square and of equal size")
        if np.any(self.obstacle & ~self.nogo):
            raise ValueError("every obstacle cell must also be a no-go cell")
        if np.any(self.start & self.nogo):
            raise ValueError("start/finish cells may not be no-go cells")
        if not self.start.any():
            raise ValueError("map needs at least one start/finish cell")

    @property
    def size(self) -> int:
        return self.start.shape[0]

    def tensor(self) -> np.ndarray:
        """The C x C x 3 layer stack (start, no-go, obstacle) as float64."""
        return np.stack([self.start, self.nogo, self.obstacle], axis=-1).astype(np.float64)

    def inside(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.size and 0 <= cell[1] < self.size

    def start_cells(self) -> list[Cell]:
        return [(int(r), int(c)) for r, c in zip(*np.nonzero(self.start))]

    def __eq__(self, other):
        if not isinstance(other, PortfolioMap):
            return NotImplemented
        return (np.array_equal(self.start, other.start)
                and np.array_equal(self.nogo, other.nogo)
                and np.array_equal(self.obstacle, other.obstacle))

    __hash__ = None


def parse_map(text: str) -> PortfolioMap:
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise NonSquareMapError("empty map", line=1)
    size = len(lines)
    start = np.zeros((size, size), dtype=bool)
    nogo = np.zeros_like(start)
    obstacle = np.zeros_like(start)
    for i, line in enumerate(lines):
        if len(line) != size:
            raise NonSquareMapError(
                f"row has {len(line)} cells, expected {size} (map has {size} rows)",
                line=i + 1, column=min(len(line), size) + 1)
        for j, ch in enumerate(line):
            if ch == "L":
                start[i, j] = True
            elif ch == "N":
                nogo[i, j] = True
            elif ch == "O":
                nogo[i, j] = obstacle[i, j] = True
            elif ch != ".":
                raise UnknownCharacterError(f"unknown map character {ch!r}", line=i + 1, column=j + 1)
    if not start.any():
        raise NoStartCellError("map has no start/finish ('L') cell", line=size, column=size)
    return PortfolioMap(start, nogo, obstacle)


def format_map(m: PortfolioMap) -> str:
    rows = []
    for i in range(m.size):
        row = []
        for j in range(m.size):
            if m.obstacle[i, j]:
                row.append("O")
            elif m.nogo[i, j]:
                row.append("N")
            elif m.start[i, j]:
                row.append("L")
            else:
                row.append(".")
        rows.append("".join(row))
    return "\n".join(rows) + "\n"


BUNDLED_MAPS = ("site32", "site50", "reduced16")


def load_bundled_map(name: str) -> PortfolioMap:
    if name not in BUNDLED_MAPS:
        raise KeyError(f"unknown bundled map {name!r}; choose from {BUNDLED_MAPS}")
    text = resources.files("armsim").joinpath("maps", f"{name}.txt").read_text(encoding="utf-8")
    return parse_map(text)


def load_map(name_or_path: str) -> PortfolioMap:
    """Load a bundled map by name, or a map file by path."""
    if name_or_path in BUNDLED_MAPS:
        return load_bundled_map(name_or_path)
    with open(name_or_path, encoding="utf-8") as fh:
        return parse_map(fh.read())


@dataclass(frozen=True)
class DeviceSpec:
    position: Cell
    initial_data: float

    def __post_init__(self):
        if self.initial_data <= 0:
            raise ValueError("device initial_data must be positive")


@dataclass(frozen=True)
class ScenarioConfig:
    mode: str = CRA
    budget_range: tuple[int, int] = (50, 150)
    cra_shape_count_range: tuple[int, int] = (3, 8)
    cra_coverage_range: tuple[float, float] = (0.2, 0.5)
    # rectangle side lengths; None derives (C // 8, 2C // 5) from the map size
    cra_shape_size_range: Optional[tuple[int, int]] = None
    dh_device_count_range: tuple[int, int] = (3, 10)
    dh_data_range: tuple[float, float] = (5.0, 20.0)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name.endswith("_range") and value is not None:
                lo, hi = value
                if lo > hi:
                    raise ValueError(f"{f.name}: empty interval [{lo}, {hi}]")
        lo, hi = self.cra_coverage_range
        if not (0 < lo and hi <= 1):
            raise ValueError("cra_coverage_range must lie within (0, 1]")
        if self.budget_range[0] < 0:
            raise ValueError("budget_range must be nonnegative")
        if self.dh_data_range[0] <= 0:
            raise ValueError("dh_data_range must be positive")

    def shape_sizes(self, size: int) -> tuple[int, int]:
        if self.cra_shape_size_range is not None:
            return self.cra_shape_size_range
        return max(1, size // 8), max(1, (2 * size) // 5)

    @property
    def max_budget(self) -> int:
        return self.budget_range[1]


@dataclass(frozen=True)
class AgentState:
    position: Cell
    budget: int
    initial_budget: int
    terminal: bool = False
    success: bool = False
    link: Optional[int] = None  # DH: device that communicated on the previous step


def gen_cra_target(m: PortfolioMap, cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Union of random rectangles minus obstacles, resampled until the covered
    fraction of non-obstacle cells falls inside ``cfg.cra_coverage_range``."""
    if cfg.mode != CRA:
        raise ValueError("gen_cra_target requires a CRA config")
    size = m.size
    free = ~m.obstacle
    n_free = int(free.sum())
    side_lo, side_hi = cfg.shape_sizes(size)
    side_hi = min(side_hi, size)
    side_lo = min(side_lo, side_hi)
    cov_lo, cov_hi = cfg.cra_coverage_range
    k_lo, k_hi = cfg.cra_shape_count_range
    for _ in range(MAX_TARGET_ATTEMPTS):
        layer = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(k_lo, k_hi + 1))):
            h, w = rng.integers(side_lo, side_hi + 1, size=2)
            r0 = int(rng.integers(0, size - h + 1))
            c0 = int(rng.integers(0, size - w + 1))
            layer[r0:r0 + h, c0:c0 + w] = True
        layer &= free
        frac = layer.sum() / n_free
        if cov_lo <= frac <= cov_hi:
            return layer
    raise ScenarioError(
        f"no target layer with coverage in [{cov_lo}, {cov_hi}] after {MAX_TARGET_ATTEMPTS} attempts")


def gen_dh_devices(m: PortfolioMap, cfg: ScenarioConfig, rng: np.random.Generator) -> list[DeviceSpec]:
    if cfg.mode != DH:
        raise ValueError("gen_dh_devices requires a DH config")
    count = int(rng.integers(cfg.dh_device_count_range[0], cfg.dh_device_count_range[1] + 1))
    candidates = np.flatnonzero(~m.obstacle)
    if count > candidates.size:
        raise ScenarioError(f"{count} devices requested but only {candidates.size} non-obstacle cells")
    chosen = rng.choice(candidates, size=count, replace=False)
    data = rng.uniform(cfg.dh_data_range[0], cfg.dh_data_range[1], size=count)
    return [DeviceSpec((int(k // m.size), int(k % m.size)), float(d)) for k, d in zip(chosen, data)]


def sample_initial_state(m: PortfolioMap, cfg: ScenarioConfig, rng: np.random.Generator) -> AgentState:
    starts = m.start_cells()
    position = starts[int(rng.integers(len(starts)))]
    budget = int(rng.integers(cfg.budget_range[0], cfg.budget_range[1] + 1))
    return AgentState(position=position, budget=budget, initial_budget=budget)


@dataclass(frozen=True, eq=False)
class Scenario:
    map: PortfolioMap
    config: ScenarioConfig
    start: Cell
    budget: int
    target: Optional[np.ndarray] = None
    devices: tuple[DeviceSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        object.__setattr__(self, "start", (int(self.start[0]), int(self.start[1])))
        if self.mode == CRA:
            if self.target is None:
                raise ValueError("CRA scenario needs a target layer")
            target = np.array(self.target, dtype=bool)
            if target.shape != (self.map.size,) * 2:
                raise ValueError("target layer shape does not match the map")
            if np.any(target & self.map.obstacle):
                raise ValueError("target cells may not lie on obstacles")
            target.setflags(write=False)
            object.__setattr__(self, "target", target)
        else:
            seen = set()
            for d in self.devices:
                if not self.map.inside(d.position) or self.map.obstacle[d.position]:
                    raise ValueError(f"device at {d.position} is off-grid or on an obstacle")
                if d.position in seen:
                    raise ValueError(f"two devices share cell {d.position}")
                seen.add(d.position)
        if not self.map.start[self.start]:
            raise ValueError("scenario start must be a start/finish cell")

    @property
    def mode(self) -> str:
        return self.config.mode

    def initial_state(self) -> AgentState:
        return AgentState(position=self.start, budget=self.budget, initial_budget=self.budget)

    @property
    def max_device_data(self) -> float:
        return max((d.initial_data for d in self.devices), default=1.0)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        same_target = (self.target is None and other.target is None) or (
            self.target is not None and other.target is not None
            and np.array_equal(self.target, other.target))
        return (self.map == other.map and self.config == other.config and self.start == other.start
                and self.budget == other.budget and same_target and self.devices == other.devices)

    __hash__ = None


def generate_scenario(m: PortfolioMap, cfg: ScenarioConfig, rng: np.random.Generator) -> Scenario:
    state = sample_initial_state(m, cfg, rng)
    if cfg.mode == CRA:
        return Scenario(m, cfg, state.position, state.budget, target=gen_cra_target(m, cfg, rng))
    return Scenario(m, cfg, state.position, state.budget, devices=tuple(gen_dh_devices(m, cfg, rng)))


# -- scenario file -----------------------------------------------------------------

def _rle_row(row: Sequence[bool]) -> str:
    runs = []
    current, count = bool(row[0]), 0
    for v in row:
        if bool(v) == current:
            count += 1
        else:
            runs.append(f"{int(current)}x{count}")
            current, count = bool(v), 1
    runs.append(f"{int(current)}x{count}")
    return " ".join(runs)


def _unrle_row(text: str, size: int) -> list[bool]:
    out: list[bool] = []
    for token in text.split():
        value, _, count = token.partition("x")
        if value not in ("0", "1") or not count.isdigit():
            raise ScenarioFormatError(f"bad run-length token {token!r}")
        out.extend([value == "1"] * int(count))
    if len(out) != size:
        raise ScenarioFormatError(f"target row decodes to {len(out)} cells, expected {size}")
    return out


def _config_lines(cfg: ScenarioConfig) -> list[str]:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            text = "none"
        elif isinstance(value, tuple):
            text = " ".join(repr(v) for v in value)
        else:
            text = str(value)
        lines.append(f"{f.name}={text}")
    return lines


_FLOAT_RANGES = ("cra_coverage_range", "dh_data_range")


def _parse_config(pairs: dict[str, str]) -> ScenarioConfig:
    kwargs = {}
    for f in fields(ScenarioConfig):
        if f.name not in pairs:
            raise ScenarioFormatError(f"missing config field {f.name!r}")
        raw = pairs.pop(f.name)
        if f.name == "mode":
            kwargs[f.name] = raw
        elif f.name == "seed":
            kwargs[f.name] = int(raw)
        elif raw == "none":
            kwargs[f.name] = None
        else:
            conv = float if f.name in _FLOAT_RANGES else int
            kwargs[f.name] = tuple(conv(p) for p in raw.split())
    if pairs:
        raise ScenarioFormatError(f"unknown scenario keys {sorted(pairs)}")
    return ScenarioConfig(**kwargs)


def dumps_scenario(s: Scenario) -> str:
    body = [f"{SCENARIO_MAGIC} {SCENARIO_VERSION}"]
    body += _config_lines(s.config)
    body.append(f"start={s.start[0]} {s.start[1]}")
    body.append(f"budget={s.budget}")
    body.append(f"[map] {s.map.size}")
    body += format_map(s.map).splitlines()
    if s.mode == CRA:
        body.append(f"[target] {s.map.size}")
        body += [_rle_row(row) for row in s.target]
    else:
        body.append(f"[devices] {len(s.devices)}")
        body += [f"{d.position[0]} {d.position[1]} {d.initial_data!r}" for d in s.devices]
    text = "\n".join(body) + "\n"
    return text + f"[end] {zlib.crc32(text.encode('utf-8')):08x}\n"


def loads_scenario(text: str) -> Scenario:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(SCENARIO_MAGIC + " "):
        raise ScenarioFormatError("not a scenario file")
    version = lines[0].split()[1]
    if version != str(SCENARIO_VERSION):
        raise ScenarioVersionError(f"scenario version {version} is not supported (expected {SCENARIO_VERSION})")
    if not lines[-1].startswith("[end] "):
        raise ScenarioFormatError("scenario file is truncated (missing [end] marker)")
    body = text[: text.rindex("[end] ")]
    if f"{zlib.crc32(body.encode('utf-8')):08x}" != lines[-1].split()[1]:
        raise ScenarioFormatError("scenario checksum mismatch")
    lines = lines[1:-1]

    pairs: dict[str, str] = {}
    i = 0
    while i < len(lines) and not lines[i].startswith("["):
        key, sep, value = lines[i].partition("=")
        if not sep:
            raise ScenarioFormatError(f"expected key=value, got {lines[i]!r}")
        pairs[key] = value
        i += 1
    try:
        start_r, start_c = (int(v) for v in pairs.pop("start").split())
        budget = int(pairs.pop("budget"))
        cfg = _parse_config(pairs)

        header, size = lines[i].split()
        if header != "[map]":
            raise ScenarioFormatError(f"expected [map], got {header!r}")
        size = int(size)
        m = parse_map("\n".join(lines[i + 1:i + 1 + size]))
        i += 1 + size
        header, count = lines[i].split()
        count = int(count)
        rest = lines[i + 1:]
        if len(rest) != count:
            raise ScenarioFormatError(f"{header} declares {count} rows, found {len(rest)}")
        if header == "[target]":
            target = np.array([_unrle_row(r, size) for r in rest], dtype=bool)
            return Scenario(m, cfg, (start_r, start_c), budget, target=target)
        if header == "[devices]":
            devices = []
            for r in rest:
                a, b, d = r.split()
                devices.append(DeviceSpec((int(a), int(b)), float(d)))
            return Scenario(m, cfg, (start_r, start_c), budget, devices=tuple(devices))
        raise ScenarioFormatError(f"unknown section {header!r}")
    except (KeyError, IndexError, ValueError) as exc:
        if isinstance(exc, ScenarioFormatError):
            raise
        raise ScenarioFormatError(f"corrupted scenario payload: {exc}") from exc


def save_scenario(s: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_scenario(s))


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return loads_scenario(fh.read())


def with_mode(cfg: ScenarioConfig, mode: str) -> ScenarioConfig:
    return replace(cfg, mode=mode)
