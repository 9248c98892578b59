"""The bundled demo world: a hand-built cross road with nine pole sites.

Traffic is densest around site 8 (a loose crowd of pedestrians and parked
cars that passing vehicles see clearly). Site 3 overlooks a truck parked at
the kerb with road users behind it, which vehicles on the road cannot see.
"""
from __future__ import annotations

import json
from importlib import resources

from .world import CandidateSite, Scenario, TrafficObject

ZONE = (-100.0, -100.0, 100.0, 100.0)

SITES = {
    1: (-85.0, 8.0), 2: (-70.0, -8.0), 3: (-50.0, 12.0), 4: (-25.0, -8.0), 5: (8.0, 25.0),
    6: (-8.0, -40.0), 7: (25.0, 8.0), 8: (55.0, -14.0), 9: (85.0, 8.0),
}

# (x, y, class)
_HIDDEN = [(-50.0, 4.6, "truck"), (-52.5, 8.6, "pedestrian"), (-50.0, 8.4, "car"),
           (-47.5, 8.6, "pedestrian")]
_CROWD = [(x, y, "pedestrian") for x in (44.0, 50.0, 56.0, 62.0, 68.0) for y in (-7.0, -15.0)]
_CROWD += [(47.0, -21.0, "car"), (59.0, -21.0, "car"), (53.0, -27.0, "pedestrian"),
           (65.0, -27.0, "pedestrian")]
_SCATTER = [(-4.5, 60.0, "pedestrian"), (4.5, -70.0, "pedestrian"), (1.75, 35.0, "car"),
            (-1.75, -55.0, "car"), (20.0, 4.5, "pedestrian"), (-80.0, -4.5, "pedestrian"),
            (4.5, 80.0, "pedestrian")]

_RADIUS = {"car": 1.2, "truck": 2.0, "pedestrian": 0.4}


def demo_scenario() -> Scenario:
    lanes = [[(ZONE[0], 0.0), (ZONE[2], 0.0)], [(0.0, ZONE[1]), (0.0, ZONE[3])]]
    objects = [TrafficObject(i, (x, y), _RADIUS[c], c) for i, (x, y, c) in enumerate(_HIDDEN + _CROWD + _SCATTER)]
    sites = [CandidateSite(k, p) for k, p in sorted(SITES.items())]
    return Scenario(lanes, objects, sites, ZONE, "cross_road")


def demo_config() -> dict:
    """The bundled demo run configuration."""
    text = resources.files("vecfl").joinpath("data/demo_config.json").read_text()
    return json.loads(text)
