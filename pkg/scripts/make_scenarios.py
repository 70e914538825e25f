"""Regenerate the bundled maps and scenario files under src/safenav/data.

Maps are built from a few primitives (rectangles, discs, smooth bumps) so
the JSON files stay reproducible from this script alone.
"""

import json
from pathlib import Path

import numpy as np

from safenav.fields import GridMap2p5D, save_map

DATA = Path(__file__).resolve().parents[1] / "src" / "safenav" / "data"


def _centers(w, h, res):
    xs = (np.arange(w) + 0.5) * res
    ys = (np.arange(h) + 0.5) * res
    return np.meshgrid(xs, ys)


def coupled_map() -> GridMap2p5D:
    """9 x 5 m course: flanking pillars, a doorway, rough patches, an impassable rough spot and a steep mound."""
    w, h, res = 90, 50, 0.1
    X, Y = _centers(w, h, res)
    blocked = np.zeros((h, w), dtype=bool)
    blocked[0, :] = blocked[-1, :] = True
    blocked[:, 0] = blocked[:, -1] = True
    for (x0, y0, x1, y1) in [(2.6, 3.1, 3.0, 4.0), (2.4, 0.8, 2.8, 1.9),  # pillars flanking the start lane
                             (5.0, 0.0, 5.3, 1.8), (5.0, 3.2, 5.3, 5.0),  # doorway walls
                             (6.9, 3.0, 7.3, 3.6)]:  # pillar behind the doorway
        blocked |= (X >= x0) & (X <= x1) & (Y >= y0) & (Y <= y1)
    rough = np.zeros((h, w))
    for (cx, cy, r, amp) in [(2.0, 1.3, 1.0, 0.5), (4.2, 3.3, 0.9, 0.4), (6.3, 1.6, 0.9, 0.5),
                             (7.8, 3.8, 0.8, 0.4)]:
        rough += amp * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * (r / 2) ** 2))
    rough[(X - 7.6) ** 2 + (Y - 1.4) ** 2 < 0.3 ** 2] = 1.5  # too rough to cross
    elev = 0.6 * np.exp(-((X - 3.8) ** 2 + (Y - 1.0) ** 2) / (2 * 0.25 ** 2))  # steep mound
    elev += 0.15 * np.exp(-((X - 6.0) ** 2 + (Y - 3.8) ** 2) / (2 * 0.8 ** 2))  # gentle hill
    return GridMap2p5D((0.0, 0.0), res, blocked, np.round(elev, 4), np.round(rough, 4))


def open_map(size_m=10.0, res=0.1) -> GridMap2p5D:
    n = int(round(size_m / res))
    return GridMap2p5D.empty(n, n, res)


def duel_map() -> GridMap2p5D:
    """Walled 10 x 10 m arena with one inner wall segment so the env barrier is exercised too.

    The border matters: off-map queries read as infeasible, so an open map edge
    would be a cliff the barrier gradient cannot see coming.
    """
    g = open_map()
    X, Y = _centers(100, 100, 0.1)
    blocked = (X >= 6.5) & (X <= 7.0) & (Y >= 3.0) & (Y <= 7.0)
    blocked[0, :] = blocked[-1, :] = True
    blocked[:, 0] = blocked[:, -1] = True
    return GridMap2p5D(g.origin, g.resolution, blocked, g.elevation, g.roughness)


def main():
    DATA.mkdir(parents=True, exist_ok=True)
    save_map(coupled_map(), DATA / "coupled_map.json")
    save_map(open_map(), DATA / "open_map.json")
    save_map(duel_map(), DATA / "duel_map.json")
    scenarios = {
        "coupled": {
            "map": "coupled_map.json",
            "start": [1.0, 2.5, 0.0],
            "start_jitter": [0.2, 0.4, 0.2],
            "goal": {"x": 8.2, "y": 2.5, "radius": 0.4},
            "horizon": 20.0,
            "dt": 0.02,
            "attacks": {"count": 2, "window": [1.0, 7.0], "mode": "aimed", "radii": [0.1, 0.15],
                        "min_distance": 1.5, "lifetime": 3.0},
            # reflex takes over only once contact is under ~0.3 s away; earlier blending slows
            # the robot while its own motion is already clearing the attack line
            "handoff": {"threat_low": 0.7, "threat_high": 1.0},
            "randomization": {},
        },
        "duel": {
            "map": "duel_map.json",
            "start": [2.0, 5.0, 0.0],
            "start_jitter": [0.5, 1.0, 0.5],
            "goal": {"x": 9.0, "y": 5.0, "radius": 0.4},
            "horizon": 15.0,
            "dt": 0.02,
            "cbf_alpha": 2.0,
            "attacks": {"count": 1, "window": [0.5, 3.0], "mode": "aimed", "radii": [0.15],
                        "min_distance": 1.5, "lifetime": 4.0},
            "randomization": {"exact": True, "obstacle_speed": [0.5, 1.5]},
        },
        "open": {
            "map": "open_map.json",
            "start": [2.0, 5.0, 0.0],
            "goal": {"x": 5.0, "y": 5.0, "radius": 0.3},
            "horizon": 10.0,
            "dt": 0.02,
            "randomization": {"exact": True},
        },
    }
    for name, sc in scenarios.items():
        (DATA / f"{name}.json").write_text(json.dumps(sc, indent=2) + "\n")


if __name__ == "__main__":
    main()
