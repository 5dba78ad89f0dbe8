"""Procedural terrain, forest placement and the reforestation value field.

World coordinates are meters with ``x`` and ``z`` spanning
``[-world_extent/2, world_extent/2]`` and ``y`` pointing up. Height grids are
indexed ``heights[iz, ix]``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

PF_NEAR = 2.5
PF_FAR = 75.0
SLOPE_LIMIT_DEG = 30.0
TREE_JITTER = 3.0

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_KX = np.uint64(0x8CB92BA72F3D8DD7)
_KZ = np.uint64(0xD6E8FEB86659FD93)
_KO = np.uint64(0xA0761D6478BD642F)
_FOREST_SALT = 0x5EED_F0E5
_JITTER_SALT = 0x7A11_7EE5


class DegenerateScenario(ValueError):
    """Raised when a (seed, difficulty) combination yields no fertile ground."""


@dataclass(frozen=True)
class NoiseParams:
    octaves: int = 4
    persistence: float = 0.5
    lacunarity: float = 2.0
    scale: float = 300.0

    def validate(self) -> None:
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")
        if not 0.0 < self.persistence <= 1.0:
            raise ValueError("persistence must be in (0, 1]")
        if self.lacunarity < 1.0:
            raise ValueError("lacunarity must be >= 1")
        if self.scale <= 0.0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class ForestParams:
    fertile_band: tuple[float, float] = (0.20, 0.60)
    forest_noise_threshold: float = 0.55
    tree_spacing: float = 10.0


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    difficulty: int = 5
    world_extent: float = 1200.0
    max_altitude: float = 100.0
    grid_resolution: int = 241
    noise: NoiseParams = field(default_factory=NoiseParams)
    forest: ForestParams = field(default_factory=ForestParams)

    def validate(self) -> None:
        if self.seed < 0:
            raise ValueError("seed must be unsigned")
        if self.world_extent <= 0:
            raise ValueError("world_extent must be positive")
        if self.grid_resolution < 2:
            raise ValueError("grid_resolution must be >= 2")
        if not 1 <= self.difficulty <= 10:
            raise ValueError("difficulty must be in 1..10")
        lo, hi = self.forest.fertile_band
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError("fertile_band must satisfy 0 <= low < high <= 1")
        self.noise.validate()

    @property
    def half_extent(self) -> float:
        return self.world_extent / 2.0

    @property
    def spacing(self) -> float:
        return self.world_extent / (self.grid_resolution - 1)


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------


def _mix64(v: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer
    v = v ^ (v >> np.uint64(30))
    v = v * _M1
    v = v ^ (v >> np.uint64(27))
    v = v * _M2
    return v ^ (v >> np.uint64(31))


def lattice_hash(ix, iz, octave: int, seed: int) -> np.ndarray:
    """64-bit hash of integer lattice coordinates, octave index and seed."""
    ix = np.asarray(ix, dtype=np.int64).astype(np.uint64)
    iz = np.asarray(iz, dtype=np.int64).astype(np.uint64)
    key = _mix64(np.asarray([seed], dtype=np.uint64) + _GOLDEN)
    key = key ^ (np.asarray([octave], dtype=np.uint64) * _KO)
    return _mix64(_mix64(ix * _KX ^ key) ^ (iz * _KZ))


def _unit(h: np.ndarray) -> np.ndarray:
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def lattice_value(ix, iz, octave: int, seed: int) -> np.ndarray:
    """Uniform value in [0, 1) attached to a lattice vertex."""
    return _unit(lattice_hash(ix, iz, octave, seed))


def value_noise(x, z, seed: int, octave: int = 0) -> np.ndarray:
    """Smoothstep-interpolated value noise on the unit integer lattice."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    x0 = np.floor(x)
    z0 = np.floor(z)
    fx = x - x0
    fz = z - z0
    sx = fx * fx * (3.0 - 2.0 * fx)
    sz = fz * fz * (3.0 - 2.0 * fz)
    ix = x0.astype(np.int64)
    iz = z0.astype(np.int64)
    v00 = lattice_value(ix, iz, octave, seed)
    v10 = lattice_value(ix + 1, iz, octave, seed)
    v01 = lattice_value(ix, iz + 1, octave, seed)
    v11 = lattice_value(ix + 1, iz + 1, octave, seed)
    top = v00 + (v10 - v00) * sx
    bottom = v01 + (v11 - v01) * sx
    return top + (bottom - top) * sz


def amplitude_sum(noise: NoiseParams) -> float:
    return sum(noise.persistence**i for i in range(noise.octaves))


def fractal_noise(x, z, seed: int, noise: NoiseParams = NoiseParams()):
    """Octave sum of value noise normalized by the amplitude sum, in [0, 1].

    Octave ``i`` has amplitude ``persistence**i`` and frequency
    ``lacunarity**i / scale``. Scalars in, float out; arrays in, array out.
    """
    noise.validate()
    scalar = np.ndim(x) == 0 and np.ndim(z) == 0
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    total = np.zeros(np.broadcast(x, z).shape)
    amp = 1.0
    freq = 1.0 / noise.scale
    for octave in range(noise.octaves):
        total = total + amp * value_noise(x * freq, z * freq, seed, octave)
        amp *= noise.persistence
        freq *= noise.lacunarity
    out = total / amplitude_sum(noise)
    return float(out.item()) if scalar else out


# ---------------------------------------------------------------------------
# Height shaping
# ---------------------------------------------------------------------------


def amplitude(difficulty: int, max_altitude: float = 100.0) -> float:
    return max_altitude * difficulty / 10.0


def bowl_gain(difficulty: int) -> float:
    return 10.0 * difficulty


def apply_bowl_filter(h, x, z, difficulty: int, world_extent: float = 1200.0,
                      max_altitude: float = 100.0):
    """Raise terrain quadratically with distance from the world center."""
    r_max2 = 2.0 * (world_extent / 2.0) ** 2
    r2 = np.asarray(x, dtype=np.float64) ** 2 + np.asarray(z, dtype=np.float64) ** 2
    out = np.minimum(np.asarray(h, dtype=np.float64) + bowl_gain(difficulty) * (r2 / r_max2),
                     max_altitude)
    return float(out) if np.ndim(out) == 0 else out


def proximity_factor(d):
    """Linear ramp 1 at 2.5 m to 0 at 75 m; 0 outside that band."""
    d = np.asarray(d, dtype=np.float64)
    pf = np.clip((PF_FAR - d) / (PF_FAR - PF_NEAR), 0.0, 1.0)
    pf = np.where((d < PF_NEAR) | (d > PF_FAR) | ~np.isfinite(d), 0.0, pf)
    return float(pf) if pf.ndim == 0 else pf


# ---------------------------------------------------------------------------
# Tree index
# ---------------------------------------------------------------------------


class TreeIndex:
    """Uniform-grid spatial hash over 2-D tree positions with exact nearest query."""

    def __init__(self, points: Optional[Iterable[Sequence[float]]] = None, cell_size: float = 25.0):
        self.cell_size = float(cell_size)
        self._cells: dict[tuple[int, int], list[int]] = {}
        self._xs: list[float] = []
        self._zs: list[float] = []
        self._bounds: Optional[list[int]] = None
        if points is not None:
            for x, z in points:
                self.add(x, z)

    def __len__(self) -> int:
        return len(self._xs)

    def _cell(self, x: float, z: float) -> tuple[int, int]:
        return math.floor(x / self.cell_size), math.floor(z / self.cell_size)

    def add(self, x: float, z: float) -> None:
        cx, cz = self._cell(x, z)
        self._cells.setdefault((cx, cz), []).append(len(self._xs))
        self._xs.append(float(x))
        self._zs.append(float(z))
        if self._bounds is None:
            self._bounds = [cx, cx, cz, cz]
        else:
            b = self._bounds
            b[0], b[1] = min(b[0], cx), max(b[1], cx)
            b[2], b[3] = min(b[2], cz), max(b[3], cz)

    def points(self) -> np.ndarray:
        return np.column_stack([self._xs, self._zs]) if self._xs else np.zeros((0, 2))

    def nearest(self, x: float, z: float) -> Optional[tuple[int, float]]:
        """(index, distance) of the closest tree, or None when empty."""
        if not self._xs:
            return None
        cx, cz = self._cell(x, z)
        b = self._bounds
        max_ring = max(abs(cx - b[0]), abs(cx - b[1]), abs(cz - b[2]), abs(cz - b[3]))
        best_i, best_d2 = -1, math.inf
        xs, zs = self._xs, self._zs
        ring = 0
        while ring <= max_ring:
            for key in _ring_cells(cx, cz, ring):
                for i in self._cells.get(key, ()):
                    dx = xs[i] - x
                    dz = zs[i] - z
                    d2 = dx * dx + dz * dz
                    if d2 < best_d2 or (d2 == best_d2 and i < best_i):
                        best_i, best_d2 = i, d2
            # anything unvisited lies at least ring * cell_size away
            if best_i >= 0 and math.sqrt(best_d2) <= ring * self.cell_size:
                break
            ring += 1
        return best_i, math.sqrt(best_d2)

    def copy(self) -> "TreeIndex":
        out = TreeIndex(cell_size=self.cell_size)
        out._cells = {k: list(v) for k, v in self._cells.items()}
        out._xs = list(self._xs)
        out._zs = list(self._zs)
        out._bounds = None if self._bounds is None else list(self._bounds)
        return out


def _ring_cells(cx: int, cz: int, ring: int):
    if ring == 0:
        yield (cx, cz)
        return
    for dx in range(-ring, ring + 1):
        yield (cx + dx, cz - ring)
        yield (cx + dx, cz + ring)
    for dz in range(-ring + 1, ring):
        yield (cx - ring, cz + dz)
        yield (cx + ring, cz + dz)


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------


class Forest:
    """Mutable tree set: the scenario's trees plus anything planted since."""

    def __init__(self, index: TreeIndex, grid: np.ndarray, config: ScenarioConfig):
        self.index = index
        self.grid = grid
        self.config = config

    def __len__(self) -> int:
        return len(self.index)

    def plant(self, x: float, z: float) -> None:
        self.index.add(x, z)
        iz, ix = vertex_of(self.config, x, z)
        self.grid[iz, ix] = True

    def nearest_distance(self, x: float, z: float) -> Optional[float]:
        hit = self.index.nearest(x, z)
        return None if hit is None else hit[1]

    def copy(self) -> "Forest":
        return Forest(self.index.copy(), self.grid.copy(), self.config)


def vertex_of(config: ScenarioConfig, x: float, z: float) -> tuple[int, int]:
    """Nearest grid vertex (iz, ix), clamped to the grid."""
    n = config.grid_resolution - 1
    s = config.spacing
    ix = min(max(int(round((x + config.half_extent) / s)), 0), n)
    iz = min(max(int(round((z + config.half_extent) / s)), 0), n)
    return iz, ix


@dataclass(frozen=True, eq=False)
class Scenario:
    config: ScenarioConfig
    heights: np.ndarray
    fertile: np.ndarray
    trees: np.ndarray
    station: tuple[float, float, float]
    digest: str
    tree_index: TreeIndex = field(repr=False)
    tree_grid: np.ndarray = field(repr=False)

    @classmethod
    def from_arrays(cls, config: ScenarioConfig, heights, fertile, trees, station) -> "Scenario":
        heights = np.asarray(heights, dtype=np.float32)
        heights.setflags(write=False)
        fertile = np.asarray(fertile, dtype=bool)
        fertile.setflags(write=False)
        trees = np.asarray(trees, dtype=np.float64).reshape(-1, 2)
        trees.setflags(write=False)
        index = TreeIndex(trees)
        grid = np.zeros(heights.shape, dtype=bool)
        for x, z in trees:
            grid[vertex_of(config, x, z)] = True
        grid.setflags(write=False)
        station = tuple(float(v) for v in station)
        return cls(config, heights, fertile, trees, station,
                   scenario_digest(heights, trees, station), index, grid)

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(-self.config.half_extent, self.config.half_extent,
                           self.config.grid_resolution)

    def forest(self) -> Forest:
        return Forest(self.tree_index.copy(), self.tree_grid.copy(), self.config)

    def ground_height(self, x: float, z: float) -> float:
        """Bilinear height at a world position (clamped to the grid)."""
        c = self.config
        n = c.grid_resolution - 1
        gx = min(max((x + c.half_extent) / c.spacing, 0.0), float(n))
        gz = min(max((z + c.half_extent) / c.spacing, 0.0), float(n))
        ix = min(int(gx), n - 1)
        iz = min(int(gz), n - 1)
        fx = gx - ix
        fz = gz - iz
        h = self.heights
        top = float(h[iz, ix]) * (1 - fx) + float(h[iz, ix + 1]) * fx
        bot = float(h[iz + 1, ix]) * (1 - fx) + float(h[iz + 1, ix + 1]) * fx
        return top * (1 - fz) + bot * fz

    def nearest_tree_distance(self, p) -> Optional[float]:
        """Horizontal distance from ``p`` (2-D or 3-D with y up) to the closest tree."""
        x, z = _horizontal(p)
        hit = self.tree_index.nearest(x, z)
        return None if hit is None else hit[1]

    def reforestation_value(self, p) -> float:
        d = self.nearest_tree_distance(p)
        return 0.0 if d is None else proximity_factor(d)

    def reforestation_map(self) -> np.ndarray:
        """Proximity factor at every grid vertex."""
        xs = self.xs
        if len(self.trees) == 0:
            return np.zeros(self.heights.shape)
        from scipy.spatial import cKDTree

        gx, gz = np.meshgrid(xs, xs)
        d, _ = cKDTree(self.trees).query(np.column_stack([gx.ravel(), gz.ravel()]))
        return proximity_factor(d).reshape(self.heights.shape)


def _horizontal(p) -> tuple[float, float]:
    if len(p) == 3:
        return float(p[0]), float(p[2])
    return float(p[0]), float(p[1])


def scenario_digest(heights: np.ndarray, trees: np.ndarray, station) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(heights.shape, dtype="<i8").tobytes())
    h.update(np.round(np.asarray(heights, dtype=np.float64) * 1000.0).astype("<i8").tobytes())
    h.update(np.round(np.asarray(trees, dtype=np.float64) * 1000.0).astype("<i8").tobytes())
    h.update(np.round(np.asarray(station, dtype=np.float64) * 1000.0).astype("<i8").tobytes())
    return h.hexdigest()


def height_field(config: ScenarioConfig) -> np.ndarray:
    xs = np.linspace(-config.half_extent, config.half_extent, config.grid_resolution)
    gx, gz = np.meshgrid(xs, xs)
    base = amplitude(config.difficulty, config.max_altitude) * fractal_noise(gx, gz, config.seed, config.noise)
    h = apply_bowl_filter(base, gx, gz, config.difficulty, config.world_extent, config.max_altitude)
    return np.clip(h, 0.0, config.max_altitude).astype(np.float32)


def fertility_mask(config: ScenarioConfig, heights: np.ndarray) -> np.ndarray:
    h = heights.astype(np.float64)
    lo, hi = float(h.min()), float(h.max())
    norm = (h - lo) / (hi - lo) if hi > lo else np.zeros_like(h)
    dz, dx = np.gradient(h, config.spacing)
    flat = np.hypot(dx, dz) < math.tan(math.radians(SLOPE_LIMIT_DEG))
    band_lo, band_hi = config.forest.fertile_band
    return (norm >= band_lo) & (norm <= band_hi) & flat


def place_trees(config: ScenarioConfig, fertile: np.ndarray) -> np.ndarray:
    """Jittered lattice points on fertile ground where the forest noise is high."""
    spacing = config.forest.tree_spacing
    half = config.half_extent
    n = int(math.floor(config.world_extent / spacing))
    lattice = -half + spacing / 2.0 + spacing * np.arange(n)
    lx, lz = np.meshgrid(lattice, lattice)
    ix, iz = np.meshgrid(np.arange(n), np.arange(n))
    jx = (lattice_value(ix, iz, 0, config.seed ^ _JITTER_SALT) * 2.0 - 1.0) * TREE_JITTER
    jz = (lattice_value(ix, iz, 1, config.seed ^ _JITTER_SALT) * 2.0 - 1.0) * TREE_JITTER
    px = np.clip(lx + jx, -half, half)
    pz = np.clip(lz + jz, -half, half)
    forest = fractal_noise(px, pz, config.seed ^ _FOREST_SALT, config.noise)
    vx = np.clip(np.rint((px + half) / config.spacing), 0, config.grid_resolution - 1).astype(np.int64)
    vz = np.clip(np.rint((pz + half) / config.spacing), 0, config.grid_resolution - 1).astype(np.int64)
    keep = (forest > config.forest.forest_noise_threshold) & fertile[vz, vx]
    return np.column_stack([px[keep], pz[keep]])


def place_station(config: ScenarioConfig, heights: np.ndarray, fertile: np.ndarray):
    """Fertile vertex closest to the world center; ties go to the lower one."""
    iz, ix = np.nonzero(fertile)
    xs = -config.half_extent + ix * config.spacing
    zs = -config.half_extent + iz * config.spacing
    r2 = xs * xs + zs * zs
    order = np.lexsort((heights[iz, ix], r2))
    k = order[0]
    return float(xs[k]), float(heights[iz[k], ix[k]]), float(zs[k])


def generate_scenario(config: ScenarioConfig) -> Scenario:
    config.validate()
    heights = height_field(config)
    fertile = fertility_mask(config, heights)
    if not fertile.any():
        raise DegenerateScenario(f"no fertile ground for seed={config.seed} difficulty={config.difficulty}")
    trees = place_trees(config, fertile)
    station = place_station(config, heights, fertile)
    return Scenario.from_arrays(config, heights, fertile, trees, station)
