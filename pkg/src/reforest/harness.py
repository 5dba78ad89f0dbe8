"""Experiment presets, config loading, and the train/eval/render/flightpath commands."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import subprocess
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from . import __version__
from .env import DroneSwarmEnv, EnvConfig, SeedSchedule, TrajectoryRecorder, TRAJECTORY_COLUMNS
from .nn import CheckpointError, NetworkConfig, load_checkpoint
from .obs import vector_size
from .pgm import to_bytes, write_pgm
from .ppo import PpoConfig, PpoTrainer
from .terrain import ScenarioConfig, generate_scenario, vertex_of

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TEST_SEED = 111

# Full-scale results (10 agents, 10M training steps, 10 x 1e6-step tests).
# Kept as reference metadata; desk-scale runs are not expected to match.
REFERENCE_RESULTS = {
    "MA-0": {"distance_reward": (1.29, 0.40), "tree_drop_count": (7.75, 0.53), "cumulative_reward": (2.54, 1.23)},
    "MA-0-99": {"distance_reward": (11.45, 0.95), "tree_drop_count": (7.91, 0.46), "cumulative_reward": (122.08, 8.7)},
    "MAC-0": {"distance_reward": (2.85, 0.78), "tree_drop_count": (6.61, 0.51), "cumulative_reward": (7.82, 2.66)},
    "MAC-0-99": {"distance_reward": (13.18, 1.14), "tree_drop_count": (8.66, 0.46), "cumulative_reward": (121.84, 8.79)},
}


class ConfigError(ValueError):
    """Bad config file; the message carries ``file:line`` when known."""


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    n_agents: int
    max_neighbors: int
    train_seeds: tuple[int, ...]
    test_seed: int = TEST_SEED

    def __post_init__(self):
        if self.name.startswith("MAC") != (self.max_neighbors == 3):
            raise ValueError(f"{self.name}: MAC presets must use 3 neighbors, MA presets 0")

    def scenario_seed(self, episode: int) -> int:
        return self.train_seeds[episode % len(self.train_seeds)]

    def schedule(self, worker: int = 0, n_workers: int = 1) -> SeedSchedule:
        # worker w plays global episodes w, w + n, w + 2n, ...
        return SeedSchedule(self.train_seeds, n_workers, worker)


PRESETS = {
    "MA-0": ExperimentPreset("MA-0", 10, 0, (0,)),
    "MA-0-99": ExperimentPreset("MA-0-99", 10, 0, tuple(range(100))),
    "MAC-0": ExperimentPreset("MAC-0", 10, 3, (0,)),
    "MAC-0-99": ExperimentPreset("MAC-0-99", 10, 3, tuple(range(100))),
}


def get_preset(name: str) -> ExperimentPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = ScenarioConfig()
    env: EnvConfig = EnvConfig()
    layout: str = "full21"
    visual: bool = True
    network: NetworkConfig = NetworkConfig()
    ppo: PpoConfig = PpoConfig()
    n_envs: int = 1
    eval_steps: int = 20_000

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def resume_digest(self) -> str:
        """Digest ignoring ``ppo.max_steps`` so a run can be extended."""
        return replace(self, ppo=replace(self.ppo, max_steps=0)).digest()

    def with_preset(self, preset: ExperimentPreset) -> "ExperimentConfig":
        # the preset fixes communication; the agent count defaults to the
        # preset's 10 via EnvConfig but a config file may shrink it
        return replace(self, env=replace(self.env, max_neighbors=preset.max_neighbors))


_SECTIONS = {
    "scenario": ScenarioConfig,
    "env": EnvConfig,
    "network": NetworkConfig,
    "ppo": PpoConfig,
}
_TOP_LEVEL = {"schema_version", "scenario", "env", "obs", "network", "ppo", "train", "eval"}
_OBS_KEYS = {"layout", "visual"}
_TRAIN_KEYS = {"n_envs"}
_EVAL_KEYS = {"steps"}
_NETWORK_FIXED = {"vector_dim", "visual"}


def _line_index(text: str, source: str) -> dict:
    """Map key paths to 1-based line numbers."""
    lines = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = path + (k.value,)
                lines[key] = k.start_mark.line + 1
                walk(v, key)

    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: {getattr(exc, 'problem', exc)}") from None
    if root is not None:
        walk(root, ())
    return lines


def _coerce(cls, values: dict, path: tuple, lines: dict, source: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        where = f"{source}:{lines.get(path + (key,), '?')}"
        if key not in fields:
            raise ConfigError(f"{where}: unknown key {'.'.join(path + (key,))!r}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}: {key} must be a mapping")
            kwargs[key] = _coerce(type(default), val, path + (key,), lines, source)
        elif isinstance(default, tuple):
            if not isinstance(val, (list, tuple)):
                raise ConfigError(f"{where}: {key} must be a list")
            kwargs[key] = tuple(val)
        elif isinstance(default, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"{where}: {key} must be true/false")
            kwargs[key] = val
        elif isinstance(default, (int, float)):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{where}: {key} must be a number")
            kwargs[key] = type(default)(val) if isinstance(default, float) or float(val).is_integer() else val
            if isinstance(default, int) and not float(val).is_integer():
                raise ConfigError(f"{where}: {key} must be an integer")
        else:
            kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}:{lines.get(path, '?')}: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    lines = _line_index(text, source)
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{source}:{lines.get(('schema_version',), 1)}: "
                          f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    for key in data:
        if key not in _TOP_LEVEL:
            raise ConfigError(f"{source}:{lines.get((key,), '?')}: unknown section {key!r}")
    parts: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        section = data.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"{source}:{lines.get((name,), '?')}: {name} must be a mapping")
        if name == "network":
            for key in section:
                if key in _NETWORK_FIXED:
                    raise ConfigError(f"{source}:{lines.get((name, key), '?')}: "
                                      f"network.{key} is derived from the obs section")
        parts[name] = _coerce(cls, section, (name,), lines, source)
    for name, allowed in (("obs", _OBS_KEYS), ("train", _TRAIN_KEYS), ("eval", _EVAL_KEYS)):
        section = data.get(name) or {}
        for key in section:
            if key not in allowed:
                raise ConfigError(f"{source}:{lines.get((name, key), '?')}: unknown key '{name}.{key}'")
    obs = data.get("obs") or {}
    layout = obs.get("layout", "full21")
    try:
        vector_size(layout)
    except ValueError as exc:
        raise ConfigError(f"{source}:{lines.get(('obs', 'layout'), '?')}: {exc}") from None
    visual = bool(obs.get("visual", True))
    network = replace(parts["network"], vector_dim=2 * vector_size(layout), visual=visual)
    cfg = ExperimentConfig(
        scenario=parts["scenario"], env=parts["env"], layout=layout, visual=visual, network=network,
        ppo=parts["ppo"], n_envs=int((data.get("train") or {}).get("n_envs", 1)),
        eval_steps=int((data.get("eval") or {}).get("steps", 20_000)),
    )
    try:
        cfg.scenario.validate()
        cfg.env.validate()
        cfg.ppo.validate()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path: Optional[str | Path]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def config_from_dict(data: dict) -> ExperimentConfig:
    return parse_config(yaml.safe_dump(data), "<embedded>")


def smoke_config(max_neighbors: int = 0, seed: int = 0) -> ExperimentConfig:
    """Desk-scale setup: 3 drones in a 300 m world, 900-transition updates."""
    return ExperimentConfig(
        scenario=ScenarioConfig(seed=0, world_extent=300.0, grid_resolution=61),
        env=EnvConfig(n_drones=3, episode_length=300, max_neighbors=max_neighbors),
        network=NetworkConfig(vector_dim=2 * vector_size("full21")),
        ppo=PpoConfig(batch_size=300, buffer_size=900, time_horizon=100, max_steps=900 * 50, seed=seed),
        eval_steps=300,
    )


def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def worker_cap(requested: int) -> int:
    cap = os.environ.get("REFOREST_THREADS")
    if cap:
        try:
            return max(1, min(requested, int(cap)))
        except ValueError:
            raise ConfigError(f"REFOREST_THREADS must be an integer, got {cap!r}") from None
    return max(1, requested)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


DISPLAY_METRICS = {
    "cumulative_reward": "cumulative_reward",
    "tree_drops": "tree_drop_count",
    "return_reward": "distance_reward",
    "station_bonus": "station_distance_bonus",
    "drop_reward": "tree_drop_reward",
    "out_of_energy": "out_of_energy_count",
    "recharges": "recharge_count",
}


def summarize_episodes(episodes: list[dict]) -> dict:
    out = {"episodes": len(episodes)}
    for key, name in DISPLAY_METRICS.items():
        vals = [e[key] for e in episodes if key in e]
        out[name] = float(np.mean(vals)) if vals else None
    return out


def make_envs(cfg: ExperimentConfig, preset: ExperimentPreset) -> list[DroneSwarmEnv]:
    envs = []
    n = worker_cap(cfg.n_envs)
    for w in range(n):
        envs.append(DroneSwarmEnv(cfg.env, cfg.scenario, preset.schedule(w, n), cfg.layout, cfg.visual,
                                  rng_seed=cfg.ppo.seed * 1000 + w * 100_003))
    return envs


def _checkpoints(out_dir: Path) -> list[Path]:
    return sorted((out_dir / "checkpoints").glob("ckpt_*.bin"))


def _prune(out_dir: Path, keep: int) -> None:
    for old in _checkpoints(out_dir)[:-keep] if keep > 0 else []:
        for suffix in ("", ".json", ".state"):
            Path(str(old) + suffix).unlink(missing_ok=True)


def cli_train(preset_name: str, config_path: Optional[str], out_dir: str | Path,
              resume: bool = False, max_updates: Optional[int] = None,
              cfg: Optional[ExperimentConfig] = None) -> list[dict]:
    """Train one preset; returns the summary records written this session."""
    preset = get_preset(preset_name)
    if cfg is None:
        cfg = load_config(config_path)
    cfg = cfg.with_preset(preset)
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    config_hash = cfg.digest()
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    existing = _checkpoints(out_dir)
    if resume and existing:
        saved, _ = experiment_from_checkpoint(existing[-1])
        if saved.resume_digest() != cfg.resume_digest():
            raise ConfigError(f"{existing[-1]}: checkpoint was trained with a different config")
        trainer = PpoTrainer.resume(existing[-1], cfg.ppo)
        log.info("resumed from %s at step %d", existing[-1], trainer.total_steps)
    else:
        trainer = PpoTrainer(make_envs(cfg, preset), cfg.ppo, cfg.network)

    base = {"preset": preset.name, "seed": cfg.ppo.seed, "config_hash": config_hash,
            "git": git_revision(), "version": __version__}
    records = []
    next_summary = (trainer.total_steps // cfg.ppo.summary_freq + 1) * cfg.ppo.summary_freq
    done_updates = 0
    with open(out_dir / "metrics.jsonl", "a") as metrics:
        while trainer.total_steps < cfg.ppo.max_steps:
            if max_updates is not None and done_updates >= max_updates:
                break
            stats = trainer.train_iteration()
            done_updates += 1
            if trainer.total_steps >= next_summary or trainer.total_steps >= cfg.ppo.max_steps:
                episodes = trainer.drain_episodes()
                rec = {**base, "step": trainer.total_steps, "update": trainer.updates,
                       **summarize_episodes(episodes), "train": stats.as_dict()}
                metrics.write(json.dumps(rec, sort_keys=True) + "\n")
                metrics.flush()
                records.append(rec)
                next_summary = (trainer.total_steps // cfg.ppo.summary_freq + 1) * cfg.ppo.summary_freq
                path = out_dir / "checkpoints" / f"ckpt_{trainer.updates:06d}.bin"
                trainer.save(path)
                _tag_checkpoint(path, cfg, preset)
                _prune(out_dir, cfg.ppo.keep_checkpoints)
    return records


def _tag_checkpoint(path: Path, cfg: ExperimentConfig, preset: ExperimentPreset) -> None:
    sidecar = Path(str(path) + ".json")
    meta = json.loads(sidecar.read_text())
    meta.update({"experiment": cfg.to_dict(), "experiment_hash": cfg.digest(), "preset": preset.name})
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    checkpoint: str
    test_seed: int
    steps: int
    runs: list[dict]
    aggregate: dict = field(default_factory=dict)
    reference: Optional[dict] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def mean_stderr(values) -> tuple[float, float]:
    vals = np.asarray(values, dtype=np.float64)
    if len(vals) == 0:
        return math.nan, math.nan
    err = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return float(vals.mean()), err


def experiment_from_checkpoint(ckpt: str | Path) -> tuple[ExperimentConfig, dict]:
    sidecar = Path(str(ckpt) + ".json")
    if not sidecar.exists():
        raise CheckpointError(f"{ckpt}: missing sidecar {sidecar.name}")
    meta = json.loads(sidecar.read_text())
    if "experiment" not in meta:
        return ExperimentConfig(network=NetworkConfig.from_dict(meta["network"])), meta
    data = dict(meta["experiment"])
    cfg = ExperimentConfig(
        scenario=_rebuild(ScenarioConfig, data["scenario"]),
        env=_rebuild(EnvConfig, data["env"]),
        layout=data["layout"], visual=data["visual"],
        network=NetworkConfig.from_dict(data["network"]),
        ppo=_rebuild(PpoConfig, data["ppo"]),
        n_envs=data["n_envs"], eval_steps=data["eval_steps"],
    )
    if cfg.digest() != meta["experiment_hash"]:
        raise CheckpointError(f"{sidecar}: experiment config hash mismatch")
    return cfg, meta


def _rebuild(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        val = data[f.name]
        default = getattr(cls(), f.name)
        if dataclasses.is_dataclass(default):
            val = _rebuild(type(default), val)
        elif isinstance(default, tuple):
            val = tuple(val)
        kwargs[f.name] = val
    return cls(**kwargs)


def cli_eval(ckpt: str | Path, test_seed: int = TEST_SEED, runs: int = 10, steps: Optional[int] = None,
             out_dir: Optional[str | Path] = None, config_path: Optional[str] = None) -> EvalReport:
    """Greedy-policy episodes on the test scenario, one per run."""
    net = load_checkpoint(ckpt)
    cfg, meta = experiment_from_checkpoint(ckpt)
    if config_path is not None:
        given = load_config(config_path)
        if "experiment_hash" in meta and given.with_preset(get_preset(meta["preset"])).digest() != meta["experiment_hash"]:
            raise CheckpointError(f"{ckpt}: config {config_path} does not match the checkpoint's config hash")
    if net.config != cfg.network:
        raise CheckpointError(f"{ckpt}: network config differs from experiment config")
    steps = cfg.eval_steps if steps is None else steps
    env_cfg = replace(cfg.env, episode_length=steps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trainer = PpoTrainer([], cfg.ppo, cfg.network, net=net)
    rows = []
    for r in range(runs):
        recorder = None
        handle = None
        if out is not None:
            handle = open(out / f"run_{r:02d}_trajectory.csv", "w")
            recorder = TrajectoryRecorder(handle)
        try:
            env = DroneSwarmEnv(env_cfg, cfg.scenario, SeedSchedule((test_seed,)), cfg.layout, cfg.visual,
                                rng_seed=r, recorder=recorder)
            ep = trainer.evaluate(env, 1, deterministic=True, rng=np.random.default_rng(r))[0]
        finally:
            if handle is not None:
                handle.close()
        row = {"run": r}
        for key, name in DISPLAY_METRICS.items():
            row[name] = float(ep[key])
        rows.append(row)
    agg = {}
    for name in DISPLAY_METRICS.values():
        m, e = mean_stderr([row[name] for row in rows])
        agg[name] = {"mean": m, "stderr": e}
    report = EvalReport(str(ckpt), test_seed, steps, rows, agg, REFERENCE_RESULTS.get(meta.get("preset", "")))
    if out is not None:
        (out / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return report


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def height_image(scenario) -> np.ndarray:
    return to_bytes(scenario.heights.astype(np.float64) / scenario.config.max_altitude)


def reforestation_image(scenario) -> np.ndarray:
    return to_bytes(scenario.reforestation_map())


def write_tree_csv(path: Path, trees: np.ndarray) -> Path:
    with open(path, "w", newline="") as fh:
        fh.write("x,z\n")
        for x, z in trees:
            fh.write(f"{x:.3f},{z:.3f}\n")
    return path


def cli_render(seed: int, difficulty: int, out_dir: str | Path,
               base: ScenarioConfig = ScenarioConfig()) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scen = generate_scenario(replace(base, seed=seed, difficulty=difficulty))
    stem = f"s{seed}_d{difficulty}"
    return {
        "height": write_pgm(out / f"height_{stem}.pgm", height_image(scen)),
        "reforestation": write_pgm(out / f"reforestation_{stem}.pgm", reforestation_image(scen)),
        "trees": write_tree_csv(out / f"trees_{stem}.csv", scen.trees),
    }


def cli_matrix(out_dir: str | Path, seeds=range(5), difficulties=range(1, 6), gap: int = 4,
               base: ScenarioConfig = ScenarioConfig()) -> Path:
    """Height maps tiled with one row per difficulty and one column per seed."""
    seeds, difficulties = list(seeds), list(difficulties)
    res = base.grid_resolution
    canvas = np.full((len(difficulties) * (res + gap) - gap, len(seeds) * (res + gap) - gap), 255, np.uint8)
    for r, d in enumerate(difficulties):
        for c, s in enumerate(seeds):
            img = height_image(generate_scenario(replace(base, seed=s, difficulty=d)))
            canvas[r * (res + gap):r * (res + gap) + res, c * (res + gap):c * (res + gap) + res] = img
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "matrix_index.csv", "w") as fh:
        fh.write("row,col,difficulty,seed\n")
        for r, d in enumerate(difficulties):
            for c, s in enumerate(seeds):
                fh.write(f"{r},{c},{d},{s}\n")
    return write_pgm(out / "matrix.pgm", canvas)


# ---------------------------------------------------------------------------
# Flight paths
# ---------------------------------------------------------------------------


class TrajectoryFormatError(ValueError):
    pass


def read_trajectory(path: str | Path) -> dict[int, list[tuple[int, float, float, float]]]:
    """Per-agent ``(step, x, y, z)`` lists from a recorder CSV."""
    paths: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:5] != list(TRAJECTORY_COLUMNS[:5]):
            raise TrajectoryFormatError(f"{path}:1: missing or unexpected header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise TrajectoryFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                step, agent = int(row[0]), int(row[1])
                x, y, z = float(row[2]), float(row[3]), float(row[4])
            except ValueError as exc:
                raise TrajectoryFormatError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in (x, y, z)):
                raise TrajectoryFormatError(f"{path}:{lineno}: non-finite coordinate")
            paths.setdefault(agent, []).append((step, x, y, z))
    return paths


def _line(r0: int, c0: int, r1: int, c1: int):
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr, sc = (1 if r1 > r0 else -1), (1 if c1 > c0 else -1)
    err = dc - dr
    while True:
        yield r0, c0
        if r0 == r1 and c0 == c1:
            return
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c0 += sc
        if e2 < dc:
            err += dc
            r0 += sr


def flightpath_overlay(scenario, paths: dict) -> np.ndarray:
    """Height map dimmed to [0, 200] with every path rasterized at 255."""
    img = np.rint(np.clip(scenario.heights.astype(np.float64) / scenario.config.max_altitude, 0, 1) * 200.0)
    img = img.astype(np.uint8)
    for pts in paths.values():
        cells = [vertex_of(scenario.config, x, z) for _, x, _, z in pts]
        for (r0, c0), (r1, c1) in zip(cells, cells[1:] or cells):
            for r, c in _line(r0, c0, r1, c1):
                img[r, c] = 255
    return img


def cli_flightpath(trajectory_csv: str | Path, scenario_seed: int, out_dir: str | Path,
                   difficulty: int = 5, base: ScenarioConfig = ScenarioConfig(),
                   max_steps: Optional[int] = None) -> dict[str, Path]:
    paths = read_trajectory(trajectory_csv)
    if max_steps is not None:
        paths = {a: [p for p in pts if p[0] <= max_steps] for a, pts in paths.items()}
    scen = generate_scenario(replace(base, seed=scenario_seed, difficulty=difficulty))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    overlay = write_pgm(out / "flightpath.pgm", flightpath_overlay(scen, paths))
    profile = out / "height_profile.csv"
    with open(profile, "w") as fh:
        fh.write("step,agent,altitude,ground_clearance\n")
        for agent in sorted(paths):
            for step, x, y, z in paths[agent]:
                fh.write(f"{step},{agent},{y:.3f},{y - scen.ground_height(x, z):.3f}\n")
    return {"overlay": overlay, "profile": profile}


# ---------------------------------------------------------------------------
# Desk-scale smoke protocol
# ---------------------------------------------------------------------------


@dataclass
class SmokeResult:
    seed: int
    max_neighbors: int
    final_rewards: list
    final_drops: list
    seconds: float

    @property
    def mean_reward(self) -> float:
        return float(np.mean(self.final_rewards))

    @property
    def mean_drops(self) -> float:
        return float(np.mean(self.final_drops))


def random_actions(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.concatenate([rng.uniform(-1.0, 1.0, (n, 3)), rng.integers(0, 2, (n, 2))], axis=1)


def random_baseline(cfg: ExperimentConfig, episodes: int = 20, seed: int = 10_000) -> tuple[float, float]:
    """Mean and standard error of a uniform random policy's episode reward."""
    env = DroneSwarmEnv(cfg.env, cfg.scenario, SeedSchedule((cfg.scenario.seed,)), cfg.layout, cfg.visual,
                        rng_seed=seed)
    rng = np.random.default_rng(seed)
    totals = []
    for _ in range(episodes):
        env.reset()
        while True:
            *_, done, info = env.step(random_actions(rng, env.n_agents))
            if done:
                totals.append(info["episode"]["cumulative_reward"])
                break
    return mean_stderr(totals)


def smoke_trial(seed: int, max_neighbors: int = 0, updates: int = 50, n_final: int = 5) -> SmokeResult:
    """Train on scenario seed 0; one stochastic evaluation after each of the last ``n_final`` updates."""
    import time

    cfg = smoke_config(max_neighbors, seed)
    start = time.perf_counter()
    env = DroneSwarmEnv(cfg.env, cfg.scenario, SeedSchedule((0,)), cfg.layout, cfg.visual, rng_seed=seed)
    trainer = PpoTrainer([env], cfg.ppo, cfg.network)
    rewards, drops = [], []
    for u in range(updates):
        trainer.train_iteration()
        trainer.drain_episodes()
        if u >= updates - n_final:
            probe = DroneSwarmEnv(cfg.env, cfg.scenario, SeedSchedule((0,)), cfg.layout, cfg.visual,
                                  rng_seed=20_000 + 100 * seed + u)
            ep = trainer.evaluate(probe, 1, deterministic=False, rng=np.random.default_rng(u))[0]
            rewards.append(ep["cumulative_reward"])
            drops.append(ep["tree_drops"])
    return SmokeResult(seed, max_neighbors, rewards, drops, time.perf_counter() - start)
