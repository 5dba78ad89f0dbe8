"""Lockstep drone dynamics, battery economy, seed lifecycle and rewards."""

from __future__ import annotations

import enum
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import comms
from .obs import ObservationBuilder
from .terrain import Forest, Scenario, generate_scenario, proximity_factor

DROP_BASE = 20.0
DROP_DISTANCE_BONUS = 10.0
RETURN_TOTAL = 20.0
OUT_OF_ENERGY_PENALTY = -10.0

Vec3 = tuple[float, float, float]


class Status(enum.IntEnum):
    ACTIVE = 0
    OUT_OF_ENERGY = 1


class NoSeedHeld(Exception):
    """Drop requested by a drone that carries no seed."""


class ActionShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    n_drones: int = 10
    episode_length: int = 5000
    station_radius: float = 10.0
    depletion_with_seed: float = 0.001
    depletion_without_seed: float = 0.0005
    move_speed: float = 1.0
    turn_speed: float = 5.0
    comm_range: float = 200.0
    max_neighbors: int = 3
    altitude_bounds: tuple[float, float] = (2.0, 150.0)

    def validate(self) -> None:
        if self.n_drones < 1:
            raise ValueError("n_drones must be >= 1")
        if self.depletion_with_seed <= 0 or self.depletion_without_seed <= 0:
            raise ValueError("depletion rates must be positive")
        if self.max_neighbors not in (0, 3):
            raise ValueError("max_neighbors must be 0 or 3")
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")


@dataclass(frozen=True)
class DroneState:
    position: Vec3
    yaw: float = 0.0
    battery: float = 1.0
    has_seed: bool = True
    memory: Optional[Vec3] = None
    inbox: tuple = (None, None, None)
    return_best: float = 0.0
    return_D0: float = 0.0
    returning: bool = False
    status: Status = Status.ACTIVE
    last_move: Vec3 = (0.0, 0.0, 0.0)


@dataclass
class RewardBreakdown:
    drop_reward: np.ndarray
    return_reward: np.ndarray
    battery_penalty: np.ndarray
    event_penalty: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "RewardBreakdown":
        return cls(*(np.zeros(n) for _ in range(4)))

    @property
    def total(self) -> np.ndarray:
        return self.drop_reward + self.return_reward + self.battery_penalty + self.event_penalty


@dataclass
class StepEvents:
    dropped_seed: np.ndarray
    recharged: np.ndarray
    out_of_energy: np.ndarray
    saved_memory: np.ndarray
    station_bonus: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "StepEvents":
        flags = [np.zeros(n, dtype=bool) for _ in range(4)]
        return cls(*flags, station_bonus=np.zeros(n))


COUNTER_KEYS = (
    "tree_drops", "recharges", "out_of_energy", "memory_saves",
    "drop_reward", "return_reward", "station_bonus", "battery_penalty",
    "event_penalty", "cumulative_reward",
)


@dataclass
class EnvState:
    scenario: Scenario
    config: EnvConfig
    drones: list
    forest: Forest
    spawn: list
    step_count: int = 0
    counters: dict = field(default_factory=lambda: {k: 0.0 for k in COUNTER_KEYS})
    graph: Optional[comms.ProximityGraph] = None

    @property
    def station(self) -> Vec3:
        return self.scenario.station

    @property
    def done(self) -> bool:
        return self.step_count >= self.config.episode_length

    def copy(self) -> "EnvState":
        return EnvState(self.scenario, self.config, list(self.drones), self.forest.copy(),
                        list(self.spawn), self.step_count, dict(self.counters), self.graph)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.scenario.digest.encode())
        h.update(struct.pack("<q", self.step_count))
        for d in self.drones:
            h.update(struct.pack("<5d", *d.position, d.yaw, d.battery))
            h.update(struct.pack("<???", d.has_seed, d.returning, d.status == Status.ACTIVE))
            h.update(struct.pack("<2d", d.return_best, d.return_D0))
            for loc in (d.memory, *d.inbox):
                h.update(b"-" if loc is None else struct.pack("<3d", *loc))
        h.update(struct.pack("<q", len(self.forest)))
        h.update(self.forest.index.points().astype("<f8").tobytes())
        return h.hexdigest()


def horizontal_distance(a: Sequence[float], b: Sequence[float]) -> float:
    return math.hypot(a[0] - b[0], a[2] - b[2])


def spawn_points(station: Vec3, config: EnvConfig) -> list:
    sx, sy, sz = station
    return [(sx, sy + config.altitude_bounds[0] + i, sz) for i in range(config.n_drones)]


def reset(scenario: Scenario, config: EnvConfig = EnvConfig(), rng_seed: int = 0) -> EnvState:
    """All drones stacked at the station with a full battery and a seed.

    ``rng_seed`` only draws the initial headings.
    """
    config.validate()
    rng = np.random.default_rng(rng_seed)
    yaws = rng.integers(0, 72, size=config.n_drones) * 5.0
    spawn = spawn_points(scenario.station, config)
    drones = [DroneState(position=p, yaw=float(y)) for p, y in zip(spawn, yaws)]
    return EnvState(scenario, config, drones, scenario.forest(), spawn)


# ---------------------------------------------------------------------------
# Per-drone sub-steps
# ---------------------------------------------------------------------------


def apply_kinematics(d: DroneState, action: Sequence[float], scenario: Optional[Scenario] = None,
                     config: EnvConfig = EnvConfig()) -> DroneState:
    """Turn, then move along the new heading and vertically; clamp to the world."""
    fwd, rot, vert = (min(max(float(a), -1.0), 1.0) for a in action[:3])
    yaw = (d.yaw + config.turn_speed * rot) % 360.0
    rad = math.radians(yaw)
    x, y, z = d.position
    nx = x + config.move_speed * fwd * math.sin(rad)
    nz = z + config.move_speed * fwd * math.cos(rad)
    ny = y + config.move_speed * vert
    if scenario is not None:
        half = scenario.config.half_extent
        nx = min(max(nx, -half), half)
        nz = min(max(nz, -half), half)
        ground = scenario.ground_height(nx, nz)
    else:
        ground = 0.0
    lo, hi = config.altitude_bounds
    ny = min(max(ny, ground + lo), max(hi, ground + lo))
    return replace(d, position=(nx, ny, nz), yaw=yaw, last_move=(nx - x, ny - y, nz - z))


def deplete_battery(d: DroneState, config: EnvConfig = EnvConfig()) -> tuple[DroneState, float]:
    rate = config.depletion_with_seed if d.has_seed else config.depletion_without_seed
    # rounding keeps the 1/rate step count exact
    battery = round(d.battery - rate, 9)
    if battery <= 0.0:
        return replace(d, battery=0.0, status=Status.OUT_OF_ENERGY), -rate
    return replace(d, battery=battery), -rate


def station_factor(drop_pos: Sequence[float], station: Vec3, half_extent: float = 600.0) -> float:
    return min(max(horizontal_distance(drop_pos, station) / half_extent, 0.0), 1.0)


def drop_seed_reward(drop_pos: Sequence[float], forest, station: Vec3, half_extent: float = 600.0) -> float:
    """``pf * (20 + 10 * sf)`` for a seed released at ``drop_pos``.

    ``forest`` is anything with ``nearest_tree_distance`` (a Scenario) or
    ``nearest_distance`` (a Forest).
    """
    pf, sf = _drop_factors(drop_pos, forest, station, half_extent)
    return pf * (DROP_BASE + DROP_DISTANCE_BONUS * sf)


def _drop_factors(drop_pos, forest, station, half_extent):
    if isinstance(forest, Forest):
        d = forest.nearest_distance(drop_pos[0], drop_pos[2])
    else:
        d = forest.nearest_tree_distance(drop_pos)
    pf = 0.0 if d is None else proximity_factor(d)
    return pf, station_factor(drop_pos, station, half_extent)


def drop_seed(d: DroneState, forest: Forest, station: Vec3, config: EnvConfig = EnvConfig(),
              half_extent: float = 600.0) -> tuple[DroneState, float, float]:
    """Release the seed, plant it and open the return phase.

    Returns ``(drone, reward, station_bonus)``; the bonus is the part of the
    reward owed to the station distance. Raises :class:`NoSeedHeld`.
    """
    if not d.has_seed:
        raise NoSeedHeld
    pf, sf = _drop_factors(d.position, forest, station, half_extent)
    forest.plant(d.position[0], d.position[2])
    d0 = horizontal_distance(d.position, station)
    # only a rewarded drop outside the station radius opens a paid return leg
    returning = pf > 0.0 and d0 > config.station_radius
    d = replace(d, has_seed=False, returning=returning, return_D0=d0, return_best=d0)
    return d, pf * (DROP_BASE + DROP_DISTANCE_BONUS * sf), pf * DROP_DISTANCE_BONUS * sf


def return_shaping_reward(d: DroneState, station: Vec3) -> tuple[DroneState, float]:
    """Telescoping progress reward toward the station, 20 in total per phase."""
    if d.has_seed or not d.returning or d.return_D0 <= 0.0:
        return d, 0.0
    dist = horizontal_distance(d.position, station)
    reward = RETURN_TOTAL * max(0.0, d.return_best - dist) / d.return_D0
    return replace(d, return_best=min(d.return_best, dist)), reward


def service_at_station(d: DroneState) -> tuple[DroneState, float]:
    """Recharge, reload a seed and pay out the remaining return increment."""
    if d.has_seed:
        return d, 0.0
    residual = RETURN_TOTAL * d.return_best / d.return_D0 if d.returning and d.return_D0 > 0 else 0.0
    return replace(d, battery=1.0, has_seed=True, returning=False), residual


# ---------------------------------------------------------------------------
# Lockstep step
# ---------------------------------------------------------------------------


def _split_actions(actions, n: int):
    arr = np.asarray(actions, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != n or arr.shape[1] != 5:
        raise ActionShapeMismatch(f"expected ({n}, 5) actions, got {arr.shape}")
    return arr


def step(state: EnvState, actions) -> tuple[EnvState, RewardBreakdown, StepEvents]:
    """Advance every drone by one tick, in index order. Mutates ``state``.

    ``actions`` is ``(n, 5)``: forward, rotate, vertical in [-1, 1], then the
    drop and save flags in {0, 1}.
    """
    cfg = state.config
    n = cfg.n_drones
    acts = _split_actions(actions, n)
    rewards = RewardBreakdown.zeros(n)
    events = StepEvents.empty(n)
    station = state.station
    half = state.scenario.config.half_extent
    ctr = state.counters

    for i in range(n):
        d = state.drones[i]
        if d.status == Status.OUT_OF_ENERGY:
            d = replace(d, position=state.spawn[i], battery=1.0, has_seed=False, returning=False,
                        status=Status.ACTIVE, last_move=(0.0, 0.0, 0.0))
            rewards.event_penalty[i] += OUT_OF_ENERGY_PENALTY
            events.out_of_energy[i] = True
            ctr["out_of_energy"] += 1

        a = acts[i]
        d = apply_kinematics(d, a[:3], state.scenario, cfg)
        d, r = deplete_battery(d, cfg)
        rewards.battery_penalty[i] += r
        if d.status == Status.OUT_OF_ENERGY:
            state.drones[i] = d
            continue

        if a[4] >= 0.5:
            d = comms.save_to_memory(d)
            events.saved_memory[i] = True
            ctr["memory_saves"] += 1
        if a[3] >= 0.5:
            try:
                d, r, bonus = drop_seed(d, state.forest, station, cfg, half)
            except NoSeedHeld:
                pass
            else:
                rewards.drop_reward[i] += r
                events.dropped_seed[i] = True
                events.station_bonus[i] = bonus
                ctr["tree_drops"] += 1
                ctr["station_bonus"] += bonus

        if not d.has_seed:
            d, r = return_shaping_reward(d, station)
            rewards.return_reward[i] += r
            if horizontal_distance(d.position, station) <= cfg.station_radius:
                d, r = service_at_station(d)
                rewards.return_reward[i] += r
                events.recharged[i] = True
                ctr["recharges"] += 1
        state.drones[i] = d

    if cfg.max_neighbors > 0:
        _exchange_messages(state)
    state.step_count += 1
    ctr["drop_reward"] += float(rewards.drop_reward.sum())
    ctr["return_reward"] += float(rewards.return_reward.sum())
    ctr["battery_penalty"] += float(rewards.battery_penalty.sum())
    ctr["event_penalty"] += float(rewards.event_penalty.sum())
    ctr["cumulative_reward"] += float(rewards.total.sum())
    return state, rewards, events


def _exchange_messages(state: EnvState) -> None:
    cfg = state.config
    live = [i for i, d in enumerate(state.drones) if d.status == Status.ACTIVE]
    empty = (None,) * comms.INBOX_SLOTS
    if not live:
        state.drones = [replace(d, inbox=empty) for d in state.drones]
        return
    graph = comms.build_graph([state.drones[i].position for i in live], cfg.comm_range, cfg.max_neighbors)
    inboxes = comms.exchange(graph, [state.drones[i].memory for i in live])
    new = [replace(d, inbox=empty) for d in state.drones]
    for k, i in enumerate(live):
        new[i] = replace(new[i], inbox=tuple(inboxes[k]))
    state.drones = new
    local = {i: k for k, i in enumerate(live)}
    state.graph = comms.ProximityGraph(
        tuple(tuple((live[j], dist) for j, dist in graph.neighbors[local[i]]) if i in local else ()
              for i in range(cfg.n_drones)),
        graph.comm_range, graph.k)


# ---------------------------------------------------------------------------
# Recording
# ---------------------------------------------------------------------------

TRAJECTORY_COLUMNS = (
    "step", "agent", "x", "y", "z", "battery", "has_seed",
    "drop_reward", "return_reward", "battery_penalty", "event_penalty",
    "dropped_seed", "recharged", "out_of_energy", "saved_memory",
)


class TrajectoryRecorder:
    """Per-step CSV rows plus one JSON line per finished episode."""

    def __init__(self, csv_handle, summary_handle=None):
        self.csv = csv_handle
        self.summary = summary_handle
        self.csv.write(",".join(TRAJECTORY_COLUMNS) + "\n")

    def record(self, state: EnvState, rewards: RewardBreakdown, events: StepEvents) -> None:
        for i, d in enumerate(state.drones):
            x, y, z = d.position
            self.csv.write(
                f"{state.step_count},{i},{x:.3f},{y:.3f},{z:.3f},{d.battery:.6f},{int(d.has_seed)},"
                f"{rewards.drop_reward[i]:.6f},{rewards.return_reward[i]:.6f},"
                f"{rewards.battery_penalty[i]:.6f},{rewards.event_penalty[i]:.6f},"
                f"{int(events.dropped_seed[i])},{int(events.recharged[i])},"
                f"{int(events.out_of_energy[i])},{int(events.saved_memory[i])}\n"
            )

    def end_episode(self, state: EnvState, **extra) -> None:
        if self.summary is None:
            return
        record = {"steps": state.step_count, "n_drones": state.config.n_drones,
                  "scenario_seed": state.scenario.config.seed, **state.counters, **extra}
        self.summary.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Trainer-facing wrapper
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeedSchedule:
    """Scenario seed of episode ``e``: ``seeds[(e * stride + offset) % len(seeds)]``.

    A class rather than a lambda so envs pickle with trainer state.
    """

    seeds: tuple = (0,)
    stride: int = 1
    offset: int = 0

    def __call__(self, episode: int) -> int:
        return self.seeds[(episode * self.stride + self.offset) % len(self.seeds)]


class DroneSwarmEnv:
    """Multi-agent env over a scenario schedule, emitting stacked observations.

    ``seed_schedule(episode_index)`` picks the scenario seed of each episode.
    """

    def __init__(self, config: EnvConfig, scenario_config, seed_schedule=SeedSchedule(),
                 layout: str = "full21", visual: bool = True, rng_seed: int = 0,
                 recorder: Optional[TrajectoryRecorder] = None, graph_log=None):
        config.validate()
        self.config = config
        self.scenario_config = scenario_config
        self.seed_schedule = seed_schedule
        self.rng_seed = rng_seed
        self.recorder = recorder
        self.graph_log = graph_log
        self.observe = ObservationBuilder(layout, visual)
        self.episode = -1
        self.state: Optional[EnvState] = None
        self._scenarios: dict[int, Scenario] = {}

    @property
    def n_agents(self) -> int:
        return self.config.n_drones

    def scenario(self, seed: int) -> Scenario:
        if seed not in self._scenarios:
            self._scenarios[seed] = generate_scenario(replace(self.scenario_config, seed=seed))
        return self._scenarios[seed]

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_scenarios"] = {}
        state["recorder"] = None
        state["graph_log"] = None
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        if self.state is not None:
            self.state.scenario = self.scenario(self.state.scenario.config.seed)

    def reset(self):
        self.episode += 1
        scen = self.scenario(int(self.seed_schedule(self.episode)))
        self.state = reset(scen, self.config, self.rng_seed + self.episode)
        self.observe.reset()
        return self.observe(self.state)

    def step(self, actions):
        state, rewards, events = step(self.state, actions)
        if self.recorder is not None:
            self.recorder.record(state, rewards, events)
        if self.graph_log is not None and state.graph is not None:
            comms.write_edge_csv(self.graph_log, state.step_count, state.graph)
        vec, vis = self.observe(state)
        done = state.done
        info = {"rewards": rewards, "events": events}
        if done:
            info["episode"] = self.episode_metrics()
            if self.recorder is not None:
                self.recorder.end_episode(state, episode=self.episode)
        return vec, vis, rewards.total, done, info

    def episode_metrics(self) -> dict:
        """Per-agent means of the episode counters."""
        n = self.config.n_drones
        out = {k: v / n for k, v in self.state.counters.items()}
        out["scenario_seed"] = self.state.scenario.config.seed
        out["steps"] = self.state.step_count
        return out
