"""Vector and camera observations.

Vector layouts (frozen order):

``full21``
    ground_distance, position xyz, movement direction xyz, vector to
    station xyz, has_seed, battery, inbox slots 1-3 as xyz each.
``paper15``
    the same first 12 scalars, then one scalar per inbox slot encoding the
    distance to the message location (0 when the slot is empty).

Each step stacks the previous and current vector with the current 16x16
camera grid.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .pgm import write_pgm

LAYOUTS = {"full21": 21, "paper15": 15}
GRID = 16
FOV_DEG = 120.0
GROUND_SCALE = 100.0

# cell centers in units of the footprint half-width, rows front to back
_CENTERS = (np.arange(GRID) + 0.5) * (2.0 / GRID) - 1.0
_U, _V = np.meshgrid(_CENTERS, _CENTERS[::-1])


def vector_size(layout: str) -> int:
    try:
        return LAYOUTS[layout]
    except KeyError:
        raise ValueError(f"unknown obs layout {layout!r}") from None


def stacked_size(layout: str, visual: bool = True) -> int:
    return 2 * vector_size(layout) + (GRID * GRID if visual else 0)


def vector_bounds(layout: str = "full21") -> tuple[np.ndarray, np.ndarray]:
    """Documented (low, high) of every scalar in one unstacked vector."""
    lo = np.zeros(vector_size(layout))
    hi = np.ones(vector_size(layout))
    lo[1:4] = -1.0
    lo[7:10] = -1.0
    if layout == "full21":
        lo[12:21] = -1.0
    return lo, hi


def build_vector_obs(d, station, world_extent: float = 1200.0, ground: float = 0.0,
                     layout: str = "full21") -> np.ndarray:
    half = world_extent / 2.0
    x, y, z = d.position
    out = np.zeros(vector_size(layout))
    out[0] = min(max((y - ground) / GROUND_SCALE, 0.0), 1.0)
    out[1:4] = np.clip(np.asarray(d.position) / half, -1.0, 1.0)
    move = np.asarray(d.last_move, dtype=np.float64)
    norm = float(np.linalg.norm(move))
    direction = move / norm if norm > 0 else move
    out[4:7] = (direction + 1.0) / 2.0
    out[7:10] = np.clip((np.asarray(station) - np.asarray(d.position)) / half, -1.0, 1.0)
    out[10] = 1.0 if d.has_seed else 0.0
    out[11] = d.battery
    for slot, loc in enumerate(d.inbox):
        if loc is None:
            continue
        if layout == "full21":
            out[12 + 3 * slot:15 + 3 * slot] = np.clip(np.asarray(loc) / half, -1.0, 1.0)
        else:
            dist = math.dist(loc, d.position)
            out[12 + slot] = 1.0 - 0.5 * min(dist / world_extent, 1.0)
    return out


def footprint_half_width(altitude: float) -> float:
    return max(altitude, 0.0) * math.tan(math.radians(FOV_DEG / 2.0))


def render_visual(d, scenario, forest=None) -> np.ndarray:
    """16x16 downward camera: half height band plus half tree band.

    The square footprint is centered under the drone and rotated with its
    yaw; columns run left to right, rows front to back. Cells outside the
    world are 0.
    """
    cfg = scenario.config
    x, y, z = d.position
    w = footprint_half_width(y - scenario.ground_height(x, z))
    rad = math.radians(d.yaw)
    c, s = math.cos(rad), math.sin(rad)
    u = _U * w
    v = _V * w
    px = x + u * c + v * s
    pz = z - u * s + v * c
    half = cfg.half_extent
    inside = (px >= -half) & (px <= half) & (pz >= -half) & (pz <= half)
    n = cfg.grid_resolution - 1
    ix = np.clip(np.rint((px + half) / cfg.spacing), 0, n).astype(np.intp)
    iz = np.clip(np.rint((pz + half) / cfg.spacing), 0, n).astype(np.intp)
    trees = (forest.grid if forest is not None else scenario.tree_grid)[iz, ix]
    heights = scenario.heights[iz, ix].astype(np.float64)
    cell = np.clip(0.5 * heights / cfg.max_altitude, 0.0, 0.5) + 0.5 * trees
    return np.where(inside, cell, 0.0)


def stack(prev: np.ndarray, cur: np.ndarray, vis: np.ndarray | None) -> np.ndarray:
    parts = [np.ravel(prev), np.ravel(cur)]
    if vis is not None:
        parts.append(np.ravel(vis))
    return np.concatenate(parts)


class ObservationBuilder:
    """Keeps each agent's previous vector so successive calls stack correctly."""

    def __init__(self, layout: str = "full21", visual: bool = True, dump_dir: str | Path | None = None):
        vector_size(layout)
        self.layout = layout
        self.visual = visual
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self._prev: np.ndarray | None = None

    @property
    def vector_dim(self) -> int:
        return 2 * vector_size(self.layout)

    def reset(self) -> None:
        self._prev = None

    def __call__(self, state) -> tuple[np.ndarray, np.ndarray | None]:
        scen = state.scenario
        extent = scen.config.world_extent
        cur = np.stack([
            build_vector_obs(d, scen.station, extent, scen.ground_height(d.position[0], d.position[2]),
                             self.layout)
            for d in state.drones
        ])
        prev = cur if self._prev is None else self._prev
        self._prev = cur
        vec = np.concatenate([prev, cur], axis=1).astype(np.float32)
        vis = None
        if self.visual:
            vis = np.stack([render_visual(d, scen, state.forest) for d in state.drones]).astype(np.float32)
            if self.dump_dir is not None:
                self.dump_dir.mkdir(parents=True, exist_ok=True)
                for i, grid in enumerate(vis):
                    write_pgm(self.dump_dir / f"vis_{state.step_count:06d}_{i:02d}.pgm", grid)
        return vec, vis
