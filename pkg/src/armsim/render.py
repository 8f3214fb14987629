"""Trajectory records and a static SVG renderer for episodes."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .env import update_cra_target, visibility_window
from .evaluation import TrajectoryStep
from .grid import CRA, Scenario

TRAJECTORY_COLUMNS = ("step", "row", "col", "action", "coverage", "safety", "decision", "delay",
                      "budget", "progress", "device", "terminal")

CELL_PX = 16

COLORS = {
    "free": "#ffffff",
    "start": "#4caf50",  # start / finishing cells
    "nogo": "#ffcc80",
    "obstacle": "#455a64",
    "target": "#1e88e5",  # remaining target cells
    "covered": "#bbdefb",  # target cells covered during the episode
    "idle": "#9e9e9e",  # moves without communication
    "grid": "#e0e0e0",
}

# device i is drawn (and its link segments stroked) in DEVICE_PALETTE[i % len]
DEVICE_PALETTE = ("#e53935", "#8e24aa", "#00897b", "#f4511e", "#3949ab",
                  "#c0ca33", "#6d4c41", "#d81b60", "#00acc1", "#fdd835")


class TrajectoryError(ValueError):
    pass


def device_color(index: int) -> str:
    return DEVICE_PALETTE[index % len(DEVICE_PALETTE)]


def check_trajectory(scenario: Scenario, steps: Sequence[TrajectoryStep]) -> None:
    size = scenario.map.size
    for k, s in enumerate(steps):
        if s.index != k:
            raise TrajectoryError(f"step indices must run 0, 1, 2, ...; entry {k} has index {s.index}")
        r, c = s.position
        if not (0 <= r < size and 0 <= c < size):
            raise TrajectoryError(f"step {k}: position {s.position} outside the {size}x{size} grid")
        if s.terminal and k != len(steps) - 1:
            raise TrajectoryError(f"step {k} is terminal but is not the last entry")
        if s.device is not None and (scenario.mode == CRA or not 0 <= s.device < len(scenario.devices)):
            raise TrajectoryError(f"step {k}: unknown device {s.device}")


# -- CSV form ------------------------------------------------------------------------

def trajectory_to_csv(steps: Sequence[TrajectoryStep], header_lines: Sequence[str] = ()) -> str:
    out = io.StringIO()
    for line in header_lines:
        out.write(f"# {line}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for s in steps:
        w.writerow([s.index, s.position[0], s.position[1], s.action, *(repr(float(v)) for v in s.components),
                    s.budget, repr(float(s.progress)), "" if s.device is None else s.device, int(s.terminal)])
    return out.getvalue()


def trajectory_from_csv(text: str) -> list[TrajectoryStep]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or tuple(reader.fieldnames) != TRAJECTORY_COLUMNS:
        raise TrajectoryError(f"trajectory header must be {','.join(TRAJECTORY_COLUMNS)}")
    steps = []
    for row in reader:
        try:
            steps.append(TrajectoryStep(
                index=int(row["step"]),
                position=(int(row["row"]), int(row["col"])),
                action=int(row["action"]),
                components=tuple(float(row[k]) for k in ("coverage", "safety", "decision", "delay")),
                budget=int(row["budget"]),
                progress=float(row["progress"]),
                device=int(row["device"]) if row["device"] else None,
                terminal=bool(int(row["terminal"])),
            ))
        except (TypeError, ValueError) as exc:
            raise TrajectoryError(f"bad trajectory row {row}: {exc}") from None
    return steps


# -- SVG -----------------------------------------------------------------------------

def _center(cell) -> tuple[float, float]:
    r, c = cell
    return (c + 0.5) * CELL_PX, (r + 0.5) * CELL_PX


def render_svg(scenario: Scenario, steps: Sequence[TrajectoryStep], title: Optional[str] = None) -> str:
    """SVG picture of the map layers, the target (CRA) or devices (DH), and the
    agent path. Path segments are stroked in the color of the device the agent
    communicated with on that step, or gray when it talked to none."""
    check_trajectory(scenario, steps)
    m = scenario.map
    size = m.size
    px = size * CELL_PX
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{px}" height="{px}" viewBox="0 0 {px} {px}">']
    if title:
        out.append(f"<title>{escape(title)}</title>")

    out.append('<g class="layers">')
    for r in range(size):
        for c in range(size):
            if m.obstacle[r, c]:
                kind = "obstacle"
            elif m.start[r, c]:
                kind = "start"
            elif m.nogo[r, c]:
                kind = "nogo"
            else:
                kind = "free"
            out.append(f'<rect class="{kind}" x="{c * CELL_PX}" y="{r * CELL_PX}" width="{CELL_PX}" '
                       f'height="{CELL_PX}" fill="{COLORS[kind]}" stroke="{COLORS["grid"]}" stroke-width="0.5"/>')
    out.append("</g>")

    if scenario.mode == CRA:
        remaining = np.array(scenario.target, dtype=bool)
        for s in steps:
            remaining, _ = update_cra_target(remaining, visibility_window(m, s.position), s.position)
        covered = np.asarray(scenario.target, dtype=bool) & ~remaining
        out.append('<g class="target">')
        for kind, layer in (("target", remaining), ("covered", covered)):
            for r, c in zip(*np.nonzero(layer)):
                out.append(f'<rect class="{kind}" x="{c * CELL_PX + 2}" y="{r * CELL_PX + 2}" '
                           f'width="{CELL_PX - 4}" height="{CELL_PX - 4}" fill="{COLORS[kind]}" opacity="0.8"/>')
        out.append("</g>")
    else:
        collected = np.zeros(len(scenario.devices))
        for s in steps:
            if s.device is not None:
                collected[s.device] += s.progress
        out.append('<g class="devices">')
        for i, dev in enumerate(scenario.devices):
            x, y = _center(dev.position)
            out.append(f'<circle class="device" data-device="{i}" cx="{x}" cy="{y}" r="{CELL_PX * 0.4}" '
                       f'fill="{device_color(i)}"><title>device {i}: {collected[i]:.2f} of '
                       f'{dev.initial_data:.2f} collected</title></circle>')
        out.append("</g>")

    vertices = [scenario.start] + [s.position for s in steps]
    if steps:
        points = " ".join(f"{x},{y}" for x, y in map(_center, vertices))
        out.append(f'<polyline class="path" points="{points}" fill="none" stroke="#212121" '
                   f'stroke-width="1" stroke-dasharray="2,2"/>')
        out.append('<g class="moves">')
        for s, a, b in zip(steps, vertices[:-1], vertices[1:]):
            color = COLORS["idle"] if s.device is None else device_color(s.device)
            (x1, y1), (x2, y2) = _center(a), _center(b)
            if a == b:
                out.append(f'<circle class="move" data-step="{s.index}" data-device="{"" if s.device is None else s.device}" '
                           f'cx="{x1}" cy="{y1}" r="3" fill="{color}"/>')
            else:
                out.append(f'<line class="move" data-step="{s.index}" data-device="{"" if s.device is None else s.device}" '
                           f'x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}" stroke="{color}" stroke-width="3"/>')
        out.append("</g>")
    x, y = _center(scenario.start)
    out.append(f'<circle class="agent-start" cx="{x}" cy="{y}" r="4" fill="#000000"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
