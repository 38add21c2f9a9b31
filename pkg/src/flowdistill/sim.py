"""Synthetic reaching tasks and a receding-horizon executor.

An agent in the unit square must reach one of two objects; the instruction
(``task_id``) says which. In the dynamic suite the goal object circles the
arena centre like an item on a turntable. A chunk is a sequence of agent
waypoints expressed as offsets from the observed agent position.

Policies are queried on observations that are ``staleness_frames`` control
steps old, which is how inference latency enters the simulation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import checkpoint
from .policy import PolicyConfig, TokenizedObservation
from .rng import Rng

SUCCESS_RADIUS = 0.05
HORIZON_T = 200
A_MAX = 0.1
V_MAX = 0.01
EXPERT_GAIN = 0.5
EXPERT_NOISE = 0.01
MIN_SEPARATION = 0.25
SPAWN_MARGIN = 0.1
ACTION_SCALE = 0.25  # policy space = waypoint offset / ACTION_SCALE
N_TASKS = 2


@dataclass
class WorldState:
    """Positions of the agent and the two objects (batched along leading axes).

    Object 0 sits at ``target_pos`` and object 1 at ``distractor_pos``; task 0
    asks for object 0 and task 1 for object 1. ``target_vel`` moves whichever
    object is the current goal.
    """

    agent_pos: np.ndarray
    target_pos: np.ndarray
    target_vel: np.ndarray
    distractor_pos: np.ndarray
    task_id: np.ndarray
    time_step: np.ndarray

    @property
    def goal_pos(self) -> np.ndarray:
        return np.where(self.task_id[..., None] == 0, self.target_pos, self.distractor_pos)

    def goal_distance(self) -> np.ndarray:
        return np.linalg.norm(self.goal_pos - self.agent_pos, axis=-1)

    def copy(self) -> "WorldState":
        return WorldState(*(np.array(v, copy=True) for v in self._fields()))

    def _fields(self):
        return (self.agent_pos, self.target_pos, self.target_vel, self.distractor_pos, self.task_id, self.time_step)

    def index(self, idx) -> "WorldState":
        return WorldState(*(v[idx] for v in self._fields()))

    def __len__(self) -> int:
        return self.task_id.shape[0]

    @staticmethod
    def stack(worlds: Sequence["WorldState"]) -> "WorldState":
        return WorldState(*(np.stack(vs) for vs in zip(*(w._fields() for w in worlds))))


def sample_world(rng: Rng, dynamic: bool) -> WorldState:
    """Agent and objects inside the margin, pairwise at least MIN_SEPARATION apart."""
    while True:
        pts = rng.uniform((3, 2), SPAWN_MARGIN, 1.0 - SPAWN_MARGIN)
        d = [np.linalg.norm(pts[i] - pts[j]) for i, j in ((0, 1), (0, 2), (1, 2))]
        if min(d) >= MIN_SEPARATION:
            break
    task = int(rng.integers(0, N_TASKS))
    vel = np.zeros(2)
    if dynamic:
        r = V_MAX * math.sqrt(float(rng.uniform()))
        ang = 2 * math.pi * float(rng.uniform())
        vel = np.array([r * math.cos(ang), r * math.sin(ang)])
    return WorldState(pts[0], pts[1], vel, pts[2], np.asarray(task), np.asarray(0))


def clip_norm(v: np.ndarray, max_norm: float) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v * np.minimum(1.0, max_norm / np.maximum(n, 1e-12))


def step_world(world: WorldState, displacement: np.ndarray) -> WorldState:
    """Advance one control step.

    The agent moves by ``displacement`` clipped to A_MAX. The goal object
    circles the arena centre (a turntable) at linear speed ``|target_vel|``;
    ``target_vel`` is kept tangent to its orbit.
    """
    w = world.copy()
    w.agent_pos = np.clip(w.agent_pos + clip_norm(displacement, A_MAX), 0.0, 1.0)
    speed = np.linalg.norm(w.target_vel, axis=-1)
    if np.any(speed > 0):
        on_target = w.task_id == 0
        goal = np.where(on_target[..., None], w.target_pos, w.distractor_pos)
        rel = goal - 0.5
        r = np.maximum(np.linalg.norm(rel, axis=-1), 1e-9)
        spin = np.sign(rel[..., 0] * w.target_vel[..., 1] - rel[..., 1] * w.target_vel[..., 0])
        spin = np.where(spin == 0, 1.0, spin)
        ang = spin * speed / r
        c, s = np.cos(ang), np.sin(ang)
        new_rel = np.stack([c * rel[..., 0] - s * rel[..., 1], s * rel[..., 0] + c * rel[..., 1]], axis=-1)
        tangent = np.stack([-new_rel[..., 1], new_rel[..., 0]], axis=-1) / r[..., None]
        moving = (speed > 0)[..., None]
        new_goal = np.where(moving, 0.5 + new_rel, goal)
        w.target_vel = np.where(moving, (spin * speed)[..., None] * tangent, w.target_vel)
        w.target_pos = np.where(on_target[..., None], new_goal, w.target_pos)
        w.distractor_pos = np.where(on_target[..., None], w.distractor_pos, new_goal)
    w.time_step = w.time_step + 1
    return w


# ------------------------------------------------------------------ tokenizer
@dataclass
class Codebook:
    """Fixed random maps standing in for a vision encoder and a text embedder."""

    grid: int
    feature_map: np.ndarray  # [9, d_model]
    cell_codes: np.ndarray  # [V, d_model]
    lang_table: np.ndarray  # [N_TASKS, n_lang, d_model]
    seed: int

    @classmethod
    def create(cls, config: PolicyConfig, seed: int) -> "Codebook":
        grid = int(round(math.sqrt(config.n_vis_tokens)))
        if grid * grid != config.n_vis_tokens:
            raise ValueError(f"n_vis_tokens must be a perfect square, got {config.n_vis_tokens}")
        rng = Rng(seed, stream=0xC0DE)
        d = config.d_model
        return cls(
            grid=grid,
            feature_map=rng.normal((9, d), np.float64) / 3.0,
            cell_codes=rng.normal((config.n_vis_tokens, d), np.float64) * 0.5,
            lang_table=rng.normal((N_TASKS, config.n_lang_tokens, d), np.float64),
            seed=seed,
        )

    def cell_centers(self) -> np.ndarray:
        c = (np.arange(self.grid) + 0.5) / self.grid
        gx, gy = np.meshgrid(c, c, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=-1)


def tokenize(world: WorldState, config: PolicyConfig, codebook: Codebook, dtype=np.float32) -> TokenizedObservation:
    """Per-cell relative geometry of agent and both objects, linearly embedded."""
    centers = codebook.cell_centers()  # [V, 2]
    sigma = 1.0 / codebook.grid
    feats = []
    for pos in (world.agent_pos, world.target_pos, world.distractor_pos):
        rel = pos[..., None, :] - centers  # [..., V, 2]
        bump = np.exp(-np.sum(rel * rel, axis=-1, keepdims=True) / (2 * sigma * sigma))
        feats += [rel, bump]
    f = np.concatenate(feats, axis=-1)  # [..., V, 9]
    vis = f @ codebook.feature_map + codebook.cell_codes
    lang = codebook.lang_table[np.asarray(world.task_id, dtype=np.int64)]
    state = np.asarray(world.agent_pos, dtype=np.float64) - 0.5
    return TokenizedObservation(vis.astype(dtype), lang.astype(dtype), state.astype(dtype))


# ---------------------------------------------------------------------- expert
def expert_controller(world: WorldState, chunk_len: int = 8, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Planned waypoints toward the instructed object, as offsets ``[..., H, 2]``.

    Row ``j`` is the position the agent should occupy ``j + 1`` steps after the
    observation, minus the observed agent position. Planning is a proportional
    controller with each step clipped to A_MAX, against the goal's current
    position. ``noise`` (same shape) is added to the offsets.
    """
    goal = world.goal_pos
    start = np.asarray(world.agent_pos, dtype=np.float64)
    pos = start.copy()
    waypoints = []
    for _ in range(chunk_len):
        pos = pos + clip_norm(EXPERT_GAIN * (goal - pos), A_MAX)
        waypoints.append(pos)
    chunk = np.stack(waypoints, axis=-2) - start[..., None, :]
    if noise is not None:
        chunk = chunk + noise
    return chunk


# --------------------------------------------------------------------- dataset
@dataclass
class Dataset:
    worlds: WorldState  # one row per recorded control step
    actions: np.ndarray  # [N, H, 2] expert chunks, arena units
    episode: np.ndarray  # [N] episode index
    header: dict

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def n_episodes(self) -> int:
        return int(self.header["n_episodes"])


def gen_dataset(n_episodes: int, dynamic: bool, seed: int, chunk_len: int = 8,
                settle_steps: int = 4, max_steps: int = 60, codebook_seed: int = 0) -> Dataset:
    """Closed-loop expert rollouts; every control step becomes one row.

    Each rollout continues ``settle_steps`` past success so the data also shows
    holding still at the goal.
    """
    worlds = WorldState.stack([sample_world(Rng(seed, 2 * i), dynamic) for i in range(n_episodes)])
    noise_rng = Rng(seed, 1 << 32)
    remaining = np.full(n_episodes, -1)
    rows_w, rows_a, rows_e = [], [], []
    active = np.ones(n_episodes, dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        noise = noise_rng.normal((n_episodes, chunk_len, 2), np.float64) * EXPERT_NOISE
        chunk = expert_controller(worlds, chunk_len, noise)
        rows_w.append(worlds.index(idx))
        rows_a.append(chunk[idx])
        rows_e.append(idx)
        worlds = step_world(worlds, chunk[:, 0])  # first waypoint offset is the next step
        reached = worlds.goal_distance() < SUCCESS_RADIUS
        remaining = np.where((remaining < 0) & reached, settle_steps, remaining)
        active &= remaining != 0
        remaining = np.where(remaining > 0, remaining - 1, remaining)
    order = np.argsort(np.concatenate(rows_e), kind="stable")
    all_w = WorldState(*(np.concatenate(v)[order] for v in zip(*(w._fields() for w in rows_w))))
    header = {
        "generator": "reach",
        "n_episodes": n_episodes,
        "dynamic": bool(dynamic),
        "seed": seed,
        "chunk_len": chunk_len,
        "settle_steps": settle_steps,
        "max_steps": max_steps,
        "codebook_seed": codebook_seed,
        "success_radius": SUCCESS_RADIUS,
        "a_max": A_MAX,
        "v_max": V_MAX,
        "expert_gain": EXPERT_GAIN,
        "expert_noise": EXPERT_NOISE,
    }
    return Dataset(all_w, np.concatenate(rows_a)[order], np.concatenate(rows_e)[order], header)


def save_dataset(ds: Dataset, path) -> None:
    w = ds.worlds
    tensors = {
        "episode": ds.episode.astype(np.float32),
        "time_step": w.time_step.astype(np.float32),
        "task_id": w.task_id.astype(np.float32),
        "agent_pos": w.agent_pos,
        "target_pos": w.target_pos,
        "target_vel": w.target_vel,
        "distractor_pos": w.distractor_pos,
        "actions": ds.actions,
    }
    checkpoint.write_file(path, ds.header, tensors)


def load_dataset(path) -> Dataset:
    header, t = checkpoint.read_file(path)
    f64 = lambda k: t[k].astype(np.float64)  # noqa: E731
    worlds = WorldState(
        f64("agent_pos"), f64("target_pos"), f64("target_vel"), f64("distractor_pos"),
        t["task_id"].astype(np.int64), t["time_step"].astype(np.int64),
    )
    return Dataset(worlds, f64("actions"), t["episode"].astype(np.int64), header)


# -------------------------------------------------------------------- executor
@dataclass
class ExecutorConfig:
    chunk_len: int = 8
    actions_per_replan: int = 4
    staleness_frames: int = 0
    ensemble_decay: float = 0.1
    ensemble: bool = True
    horizon: int = HORIZON_T

    def __post_init__(self):
        if not 1 <= self.actions_per_replan <= self.chunk_len:
            raise ValueError("need 1 <= actions_per_replan <= chunk_len")
        if self.staleness_frames < 0:
            raise ValueError("staleness_frames must be >= 0")


def ensemble_weights(ages: np.ndarray, decay: float) -> np.ndarray:
    """Normalised ``exp(-decay * age)`` weights over the live chunks."""
    w = np.exp(-decay * np.asarray(ages, dtype=np.float64))
    return w / w.sum()


def staleness_model(latency_ms: float, control_period_ms: float) -> int:
    """Whole control frames that elapse while one inference runs."""
    if latency_ms <= 0:
        return 0
    return int(math.ceil(latency_ms / control_period_ms - 1e-9))


def linear_staleness(n_layers: int, c0: float = -3.0, c1: float = 1.75) -> int:
    """Hardware-independent staleness ``ceil(c0 + c1 * n_layers)``, floored at 0.

    The defaults give 11 frames at depth 8 and 4 frames at depth 4.
    """
    return max(0, int(math.ceil(c0 + c1 * n_layers - 1e-9)))


@dataclass
class Episode:
    seed: int
    initial: WorldState
    success: bool
    steps_to_success: int  # -1 when the episode failed
    final_dist: float
    agent_path: Optional[np.ndarray] = None  # [T+1, 2] when recorded
    actions: Optional[np.ndarray] = None  # [T, 2] when recorded
    observations: List[int] = field(default_factory=list)  # time index each replan observed


class ExpertPolicy:
    """Scripted controller used as an oracle policy."""

    def __init__(self, chunk_len: int = 8, noise: float = EXPERT_NOISE):
        self.chunk_len = chunk_len
        self.noise = noise

    def act(self, worlds: WorldState, rngs: Sequence[Rng]) -> np.ndarray:
        noise = np.stack([r.normal((self.chunk_len, 2), np.float64) for r in rngs]) * self.noise
        return expert_controller(worlds, self.chunk_len, noise)


def run_episodes(policy, seeds: Sequence[int], executor: ExecutorConfig, dynamic: bool,
                 record: bool = False) -> List[Episode]:
    """Run one episode per seed in lock-step (batched policy queries).

    At every replan boundary ``t`` (a multiple of ``actions_per_replan``) the
    policy sees the world as it was at ``t - staleness_frames`` and the chunk
    arrives at ``t``; nothing moves before the first chunk arrives. Waypoint
    ``j`` of a chunk targets time ``obs_time + j + 1``; chunks whose plan has run
    out hold their final waypoint. A chunk stays live for ``chunk_len`` steps
    after arrival, and each step's setpoint is the age-weighted ensemble of the
    live chunks' waypoints for that step.
    """
    seeds = [int(s) for s in seeds]
    n = len(seeds)
    world = WorldState.stack([sample_world(Rng(s, 0), dynamic) for s in seeds])
    initial = world.copy()
    noise_rngs = [Rng(s, 1) for s in seeds]
    H, k, s_frames = executor.chunk_len, executor.actions_per_replan, executor.staleness_frames

    history = [world]
    success = world.goal_distance() < SUCCESS_RADIUS
    steps = np.where(success, 0, -1)
    done = success.copy()
    live: list = []  # (arrival_time, obs_time, absolute waypoints [n, H, 2])
    path = [world.agent_pos.copy()] if record else None
    acts = [] if record else None
    obs_times = []
    for t in range(executor.horizon):
        if done.all():
            break
        if t % k == 0 and t >= s_frames:
            obs_t = t - s_frames
            obs_times.append(obs_t)
            seen = history[obs_t]
            active = np.flatnonzero(~done)
            chunk = np.zeros((n, H, 2))
            chunk[active] = policy.act(seen.index(active), [noise_rngs[i] for i in active])
            live.append((t, obs_t, seen.agent_pos[:, None, :] + chunk))
        live = [c for c in live if t - c[0] < H]
        if live:
            preds = [wp[:, min(t + 1 - obs_t, H) - 1] for _, obs_t, wp in live]
            if executor.ensemble:
                w = ensemble_weights([t - arr for arr, _, _ in live], executor.ensemble_decay)
                setpoint = sum(wi * p for wi, p in zip(w, preds))
            else:
                setpoint = preds[-1]
            action = clip_norm(setpoint - world.agent_pos, A_MAX)
        else:
            action = np.zeros((n, 2))
        action = np.where(done[:, None], 0.0, action)
        world = step_world(world, action)
        history.append(world)
        if record:
            path.append(world.agent_pos.copy())
            acts.append(action)
        hit = (world.goal_distance() < SUCCESS_RADIUS) & ~done
        steps = np.where(hit, t + 1, steps)
        success |= hit
        done |= hit
    final = world.goal_distance()
    episodes = []
    for i, s in enumerate(seeds):
        episodes.append(Episode(
            seed=s,
            initial=initial.index(i),
            success=bool(success[i]),
            steps_to_success=int(steps[i]),
            final_dist=float(final[i]),
            agent_path=np.stack(path)[:, i] if record else None,
            actions=np.stack(acts)[:, i] if record and acts else None,
            observations=list(obs_times),
        ))
    return episodes


def run_episode(policy, seed: int, executor: ExecutorConfig, dynamic: bool = False, record: bool = True) -> Episode:
    return run_episodes(policy, [seed], executor, dynamic, record)[0]


@dataclass
class EvalResult:
    success_rate: float
    episodes: List[Episode]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "seed", "success", "steps", "final_dist"])
            for i, ep in enumerate(self.episodes):
                w.writerow([i, ep.seed, int(ep.success), ep.steps_to_success, f"{ep.final_dist:.6f}"])


def evaluate(policy, suite: str, n_episodes: int, executor: ExecutorConfig, seed: int = 10_000,
             batch_size: int = 256) -> EvalResult:
    """Mean success over seeds ``seed .. seed + n_episodes - 1``."""
    if suite not in ("static", "dynamic"):
        raise ValueError(f"unknown suite {suite!r}")
    seeds = list(range(seed, seed + n_episodes))
    episodes = []
    for lo in range(0, n_episodes, batch_size):
        episodes += run_episodes(policy, seeds[lo:lo + batch_size], executor, suite == "dynamic")
    rate = float(np.mean([ep.success for ep in episodes])) if episodes else 0.0
    return EvalResult(rate, episodes)
