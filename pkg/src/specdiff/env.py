"""Quasi-static 2D push task in the unit square, its scripted expert, and demos.

An agent disc pushes an object disc toward a goal. Actions are per-step
velocity commands in arena-widths per step, clipped to ``v_max``. Contact is
resolved by moving the object along the contact normal until the discs touch,
so there is no momentum.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .checkpoint import load_container, save_container
from .errors import ParameterError

OBS_DIM = 6
FEATURE_DIM = 10


@dataclass(frozen=True)
class PushEnvConfig:
    agent_radius: float = 0.03
    object_radius: float = 0.05
    goal_radius: float = 0.05
    v_max: float = 0.03
    max_steps: int = 120
    goal: tuple = (0.5, 0.5)
    randomize_goal: bool = False
    horizon: int = 8
    n_exec: int = 4
    min_start_dist: float = 0.2

    @property
    def contact(self) -> float:
        return self.agent_radius + self.object_radius

    @property
    def action_dim(self) -> int:
        return self.horizon * 2


@dataclass(frozen=True)
class PushEnvState:
    agent_pos: np.ndarray
    object_pos: np.ndarray
    goal_pos: np.ndarray
    step_count: int = 0
    object_start: np.ndarray = field(default=None)

    def obs(self) -> np.ndarray:
        return np.concatenate([self.agent_pos, self.object_pos, self.goal_pos])

    def features(self) -> np.ndarray:
        """Observation plus the relative vectors the expert acts on."""
        return np.concatenate([self.obs(), self.object_pos - self.agent_pos,
                               self.goal_pos - self.object_pos])


def reset(rng: np.random.Generator, cfg: PushEnvConfig) -> PushEnvState:
    """Sample a start configuration with the object away from the goal."""
    if cfg.randomize_goal:
        goal = rng.uniform(0.25, 0.75, size=2)
    else:
        goal = np.asarray(cfg.goal, dtype=np.float64)
    while True:
        obj = rng.uniform(0.15, 0.85, size=2)
        if np.linalg.norm(obj - goal) >= cfg.min_start_dist:
            break
    while True:
        agent = rng.uniform(0.08, 0.92, size=2)
        if np.linalg.norm(agent - obj) > cfg.contact + 0.05:
            break
    return PushEnvState(agent, obj, goal, 0, obj.copy())


def make_state(agent, obj, goal, cfg=None) -> PushEnvState:
    obj = np.asarray(obj, dtype=np.float64)
    return PushEnvState(np.asarray(agent, dtype=np.float64), obj,
                        np.asarray(goal, dtype=np.float64), 0, obj.copy())


def goal_distance(state: PushEnvState) -> float:
    return float(np.linalg.norm(state.object_pos - state.goal_pos))


def is_success(state: PushEnvState, cfg: PushEnvConfig) -> bool:
    return goal_distance(state) <= cfg.goal_radius


def progress(state: PushEnvState, cfg: PushEnvConfig) -> float:
    """Fraction of the initial gap to the goal region that has been closed."""
    start = np.linalg.norm(state.object_start - state.goal_pos) - cfg.goal_radius
    gap = goal_distance(state) - cfg.goal_radius
    if gap <= 0:
        return 1.0
    if start <= 0:
        return 0.0
    return float(np.clip(1.0 - gap / start, 0.0, 1.0))


def clip_speed(v, v_max):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(n > v_max, v * (v_max / np.maximum(n, 1e-300)), v)


def _physics(agent, obj, vel, cfg):
    ra, ro, R = cfg.agent_radius, cfg.object_radius, cfg.contact
    agent = np.clip(agent + vel, ra, 1 - ra)
    gap = obj - agent
    dist = np.linalg.norm(gap)
    if dist < R:
        n = gap / dist if dist > 1e-12 else np.array([1.0, 0.0])
        obj = np.clip(agent + n * R, ro, 1 - ro)
        gap = obj - agent
        dist = np.linalg.norm(gap)
        if dist < R:
            # object pinned against a wall: the agent yields instead
            n = gap / dist if dist > 1e-12 else np.array([1.0, 0.0])
            agent = np.clip(obj - n * R, ra, 1 - ra)
    return agent, obj


def env_step(state: PushEnvState, chunk, cfg: PushEnvConfig):
    """Execute velocity rows of ``chunk`` until done.

    Returns ``(next_state, executed_positions, done, success, progress)`` where
    ``executed_positions`` lists the agent position after each executed step.
    """
    chunk = np.nan_to_num(np.atleast_2d(np.asarray(chunk, dtype=np.float64)))
    chunk = clip_speed(chunk, cfg.v_max)
    agent, obj, steps = state.agent_pos.copy(), state.object_pos.copy(), state.step_count
    positions = []
    s = state
    done = is_success(s, cfg) or steps >= cfg.max_steps
    for vel in chunk:
        if done:
            break
        agent, obj = _physics(agent, obj, vel, cfg)
        steps += 1
        positions.append(agent.copy())
        s = PushEnvState(agent.copy(), obj.copy(), state.goal_pos, steps, state.object_start)
        done = is_success(s, cfg) or steps >= cfg.max_steps
    return s, positions, done, is_success(s, cfg), progress(s, cfg)


# ------------------------------------------------------------------ expert


def _seg_point_dist(p, q, c):
    d = q - p
    L2 = float(d @ d)
    if L2 < 1e-18:
        return float(np.linalg.norm(c - p))
    u = np.clip((c - p) @ d / L2, 0.0, 1.0)
    return float(np.linalg.norm(p + u * d - c))


def _toward(a, target, v_max):
    d = target - a
    n = np.linalg.norm(d)
    return d if n <= v_max else d * (v_max / n)


def expert_velocity(state: PushEnvState, cfg: PushEnvConfig) -> np.ndarray:
    a, o, g = state.agent_pos, state.object_pos, state.goal_pos
    dvec = g - o
    dist = np.linalg.norm(dvec)
    if dist <= cfg.goal_radius:
        return np.zeros(2)
    u = dvec / dist
    R = cfg.contact
    margin = 0.02
    rel = a - o
    along = float(rel @ u)
    lateral = float(np.linalg.norm(rel - along * u))
    if along < 0 and lateral < 0.25 * R and np.linalg.norm(rel) < R + 1.5 * margin:
        push_to = o - u * (R - cfg.v_max)
        return _toward(a, push_to + u * cfg.v_max, cfg.v_max)
    behind = o - u * (R + margin)
    perp = np.array([-u[1], u[0]])
    side = 1.0 if float(rel @ perp) >= 0 else -1.0
    flank = o + side * perp * (R + 2 * margin)
    # go straight behind if the path is clear, else via the rear flank, else the side
    for waypoint in (behind, flank - u * (R + margin), flank):
        if _seg_point_dist(a, waypoint, o) >= R + 0.5 * margin:
            return _toward(a, waypoint, cfg.v_max)
    return _toward(a, flank, cfg.v_max)


def scripted_expert(state: PushEnvState, cfg: PushEnvConfig) -> np.ndarray:
    """Plan a ``horizon x 2`` velocity chunk by rolling the expert forward."""
    chunk = np.zeros((cfg.horizon, 2))
    s = replace(state, step_count=0)
    for i in range(cfg.horizon):
        v = clip_speed(expert_velocity(s, cfg), cfg.v_max)
        chunk[i] = v
        agent, obj = _physics(s.agent_pos, s.object_pos, v, cfg)
        s = PushEnvState(agent, obj, s.goal_pos, s.step_count + 1, s.object_start)
    return chunk


def run_expert_episode(rng, cfg: PushEnvConfig, state=None, noise: float = 0.0):
    """Receding-horizon expert rollout; returns ``(obs list, chunk list, final state)``.

    With ``noise > 0`` the executed velocities are perturbed by Gaussian noise of
    ``noise * v_max`` per axis while the recorded chunks stay clean, which widens
    state coverage around the expert's path.
    """
    s = reset(rng, cfg) if state is None else state
    obs, chunks = [], []
    done = is_success(s, cfg)
    while not done:
        chunk = scripted_expert(s, cfg)
        obs.append(s.features())
        chunks.append(chunk)
        executed = chunk[:cfg.n_exec]
        if noise > 0:
            executed = executed + rng.normal(0.0, noise * cfg.v_max, size=executed.shape)
        s, _, done, _, _ = env_step(s, executed, cfg)
    return obs, chunks, s


# ------------------------------------------------------------------ dataset


@dataclass
class Demonstrations:
    """Normalized demonstration pairs.

    ``x0`` holds flattened normalized chunks ``(N, horizon*2)``, ``cond`` the
    normalized observation features ``(N, 10)``; ``raw_obs``/``raw_chunks`` keep the
    originals and ``episode`` the source episode of each row.
    """

    x0: np.ndarray
    cond: np.ndarray
    raw_obs: np.ndarray
    raw_chunks: np.ndarray
    episode: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray
    obs_mean: np.ndarray
    obs_std: np.ndarray
    seed: int
    env: PushEnvConfig

    def normalize_obs(self, obs):
        return (np.asarray(obs) - self.obs_mean) / self.obs_std

    def decode_chunk(self, x):
        chunk = (np.asarray(x) * self.act_std + self.act_mean).reshape(self.env.horizon, 2)
        return clip_speed(chunk, self.env.v_max)

    def save(self, path):
        header = {"kind": "push_dataset", "seed": self.seed, "env": _env_dict(self.env),
                  "shapes": {"x0": list(self.x0.shape), "cond": list(self.cond.shape)}}
        arrays = {k: getattr(self, k) for k in
                  ("x0", "cond", "raw_obs", "raw_chunks", "episode", "act_mean", "act_std",
                   "obs_mean", "obs_std")}
        return save_container(path, header, arrays)


def _env_dict(cfg: PushEnvConfig) -> dict:
    d = asdict(cfg)
    d["goal"] = list(cfg.goal)
    return d


def env_config_from_dict(d: dict) -> PushEnvConfig:
    d = dict(d)
    d["goal"] = tuple(d.get("goal", (0.5, 0.5)))
    return PushEnvConfig(**d)


def load_dataset(path) -> Demonstrations:
    header, a = load_container(path)
    if header.get("kind") != "push_dataset":
        raise ValueError(f"{path} does not hold a push dataset")
    return Demonstrations(a["x0"], a["cond"], a["raw_obs"], a["raw_chunks"],
                          a["episode"].astype(np.int64), a["act_mean"], a["act_std"],
                          a["obs_mean"], a["obs_std"], header["seed"],
                          env_config_from_dict(header["env"]))


def generate_dataset(n_episodes: int, seed: int, cfg: PushEnvConfig = PushEnvConfig(),
                     noise: float = 0.0) -> Demonstrations:
    """Expert demonstrations from ``n_episodes`` seeded resets, z-score normalized.

    ``noise`` is forwarded to :func:`run_expert_episode`.
    """
    if n_episodes < 1:
        raise ParameterError("n_episodes must be >= 1")
    obs, chunks, ep = [], [], []
    for e in range(n_episodes):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(e,)))
        o, c, _ = run_expert_episode(rng, cfg, noise=noise)
        obs.extend(o)
        chunks.extend(c)
        ep.extend([e] * len(o))
    raw_obs = np.array(obs)
    raw_chunks = np.array(chunks)
    flat = raw_chunks.reshape(len(raw_chunks), -1)
    act_mean, act_std = flat.mean(0), flat.std(0)
    act_std = np.where(act_std < 1e-8, 1.0, act_std)
    obs_mean, obs_std = raw_obs.mean(0), raw_obs.std(0)
    obs_std = np.where(obs_std < 1e-8, 1.0, obs_std)
    return Demonstrations((flat - act_mean) / act_std, (raw_obs - obs_mean) / obs_std,
                          raw_obs, raw_chunks, np.array(ep), act_mean, act_std,
                          obs_mean, obs_std, int(seed), cfg)


def ee_velocity(trajectory) -> np.ndarray:
    """Per-step Euclidean speed of a sequence of agent positions."""
    p = np.asarray(trajectory, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ParameterError("trajectory must be a nonempty (n, 2) array")
    return np.linalg.norm(np.diff(p, axis=0), axis=1)
