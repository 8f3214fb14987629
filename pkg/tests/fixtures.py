"""Hand-built deterministic scenarios (grid <= 5x5, budget <= 8, no fading)."""
from dataclasses import dataclass

import numpy as np

from armsim.env import ChannelParams
from armsim.grid import CRA, DH, DeviceSpec, Scenario, ScenarioConfig, parse_map


@dataclass(frozen=True)
class Fixture:
    name: str
    scenario: Scenario
    channel: ChannelParams
    trivial: bool  # solvable by the scripted greedy policy


def _cra(name, rows, budget, targets, trivial=False, start=(0, 0)):
    m = parse_map("\n".join(rows))
    layer = np.zeros((m.size, m.size), dtype=bool)
    for cell in targets:
        layer[cell] = True
    scenario = Scenario(m, ScenarioConfig(mode=CRA), start, budget, target=layer)
    return Fixture(name, scenario, ChannelParams(shadow_sigma=0.0), trivial)


def _dh(name, rows, budget, devices, reference_rate=1.0, trivial=False, start=(0, 0)):
    m = parse_map("\n".join(rows))
    specs = tuple(DeviceSpec(p, d) for p, d in devices)
    scenario = Scenario(m, ScenarioConfig(mode=DH), start, budget, devices=specs)
    return Fixture(name, scenario, ChannelParams(shadow_sigma=0.0, reference_rate=reference_rate), trivial)


OPEN3 = ["L..", "...", "..."]
OPEN5 = ["L....", ".....", ".....", ".....", "....."]

FIXTURES = [
    _cra("adjacent_target", OPEN3, 3, [(0, 1)], trivial=True),
    _cra("empty_target", OPEN3, 2, [], trivial=True),
    _dh("adjacent_device", OPEN3, 3, [((0, 1), 0.5)], trivial=True),
    _cra("zero_budget", OPEN3, 0, [(2, 2)]),
    _cra("out_of_reach", OPEN5, 6, [(4, 4)]),
    _cra("obstacle_shadow", ["L.O..", ".....", ".....", ".....", "....."], 8, [(0, 3), (0, 4), (4, 0)]),
    _cra("nogo_walls", ["L.N..", "..N..", ".....", "..N..", "..N.."], 8, [(0, 4), (4, 4), (4, 0)]),
    _cra("two_zones", ["L...L", ".....", ".....", ".....", "....."], 7, [(4, 2), (3, 4)]),
    _dh("two_devices", OPEN5, 8, [((0, 3), 2.0), ((3, 0), 2.0)], reference_rate=2.0),
    _dh("hidden_device", ["L....", ".OO..", ".O...", ".....", "....."], 8, [((2, 2), 3.0), ((4, 4), 1.0)],
        reference_rate=2.0),
]
