"""2D point-mass treat-fetch world with terrain niches and a spawn-radius curriculum.

The agent starts at the origin. A treat sits on a circle around the origin whose
radius grows by ``delta`` every time a treat is fetched and shrinks by ``delta``
(down to ``r_min``) after an episode without a fetch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

TERRAIN_KINDS: tuple[str, ...] = ("flat", "ice", "mud")


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class Terrain:
    id: str
    drag: float
    action_gain: float
    action_noise_std: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.drag < 1.0:
            raise EnvError(f"drag must lie in [0, 1), got {self.drag}")
        if self.action_gain <= 0.0:
            raise EnvError(f"action_gain must be positive, got {self.action_gain}")
        if self.action_noise_std < 0.0:
            raise EnvError("action_noise_std must be non-negative")


TERRAIN_PRESETS: dict[str, Terrain] = {
    "flat": Terrain("flat", drag=0.10, action_gain=1.0, action_noise_std=0.0),
    "ice": Terrain("ice", drag=0.01, action_gain=1.0, action_noise_std=0.0),
    "mud": Terrain("mud", drag=0.20, action_gain=0.5, action_noise_std=0.0),
}


def make_terrain(kind: str) -> Terrain:
    try:
        return TERRAIN_PRESETS[kind]
    except KeyError:
        raise EnvError(f"unknown terrain kind {kind!r}; expected one of {sorted(TERRAIN_PRESETS)}") from None


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.1
    v_max: float = 2.0
    fetch_eps: float = 0.45
    delta: float = 0.5
    r0: float = 1.0
    r_min: float = 0.5
    episode_steps: int = 200
    k_sat: int = 10
    max_eval_episodes: int = 200
    terrain_kinds: tuple[str, ...] = TERRAIN_KINDS

    @property
    def obs_dim(self) -> int:
        return 5 + len(self.terrain_kinds)

    def terrain_index(self, terrain_id: str) -> int:
        try:
            return self.terrain_kinds.index(terrain_id)
        except ValueError:
            raise EnvError(f"terrain {terrain_id!r} not in {self.terrain_kinds}") from None

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["terrain_kinds"] = list(self.terrain_kinds)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "EnvConfig":
        d = dict(d or {})
        if "terrain_kinds" in d:
            d["terrain_kinds"] = tuple(d["terrain_kinds"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise EnvError(f"unknown env config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EnvState:
    agent_pos: np.ndarray
    agent_vel: np.ndarray
    treat_pos: np.ndarray
    spawn_radius: float
    step_count: int
    episode_count: int
    terrain: Terrain
    rng: np.random.Generator
    config: EnvConfig = field(default_factory=EnvConfig)
    fetches: int = 0

    @property
    def done(self) -> bool:
        return self.step_count >= self.config.episode_steps

    def copy(self) -> "EnvState":
        rng = np.random.Generator(type(self.rng.bit_generator)())
        rng.bit_generator.state = self.rng.bit_generator.state
        return replace(
            self,
            agent_pos=self.agent_pos.copy(),
            agent_vel=self.agent_vel.copy(),
            treat_pos=self.treat_pos.copy(),
            rng=rng,
        )


@dataclass(frozen=True)
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    fetched: bool


def observe(
    agent_pos: np.ndarray,
    agent_vel: np.ndarray,
    treat_pos: np.ndarray,
    spawn_radius: np.ndarray | float,
    terrain_onehot: np.ndarray,
) -> np.ndarray:
    """Observation layout: rel_treat (2), agent_vel (2), terrain one-hot, spawn_radius (1)."""
    rel = treat_pos - agent_pos
    radius = np.asarray(spawn_radius, dtype=np.float64)[..., None]
    return np.concatenate([rel, agent_vel, terrain_onehot, radius], axis=-1)


def _onehot(config: EnvConfig, terrain_id: str) -> np.ndarray:
    v = np.zeros(len(config.terrain_kinds))
    v[config.terrain_index(terrain_id)] = 1.0
    return v


def _spawn(rng: np.random.Generator, radius: float) -> np.ndarray:
    theta = rng.uniform(0.0, 2.0 * np.pi)
    return np.array([radius * np.cos(theta), radius * np.sin(theta)])


def _norm(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(v * v, axis=-1))


def _dynamics(pos, vel, action, drag, gain, noise, dt, v_max):
    """One integration step; broadcasts over any leading batch dimensions."""
    a = np.clip(action, -1.0, 1.0)
    v = (1.0 - drag) * vel + gain * (a + noise) * dt
    speed = _norm(v)
    scale = np.where(speed > v_max, v_max / np.maximum(speed, 1e-300), 1.0)
    v = v * scale[..., None] if v.ndim > 1 else v * scale
    return pos + v * dt, v


def update_curriculum(spawn_radius: float, fetched_this_episode: bool, delta: float = 0.5,
                      r_min: float = 0.5) -> float:
    if fetched_this_episode:
        return spawn_radius + delta
    return max(r_min, spawn_radius - delta)


def reset(terrain: Terrain, spawn_radius: float, seed: int | Sequence[int] | np.random.Generator,
          config: EnvConfig | None = None) -> tuple[EnvState, np.ndarray]:
    config = config or EnvConfig()
    if spawn_radius < config.r_min:
        raise EnvError(f"spawn radius {spawn_radius} below r_min {config.r_min}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    state = EnvState(
        agent_pos=np.zeros(2),
        agent_vel=np.zeros(2),
        treat_pos=_spawn(rng, spawn_radius),
        spawn_radius=float(spawn_radius),
        step_count=0,
        episode_count=0,
        terrain=terrain,
        rng=rng,
        config=config,
    )
    return state, _state_obs(state)


def _state_obs(state: EnvState) -> np.ndarray:
    return observe(state.agent_pos, state.agent_vel, state.treat_pos, state.spawn_radius,
                   _onehot(state.config, state.terrain.id))


def step(state: EnvState, action) -> tuple[EnvState, StepResult]:
    """Advance one step. The input state is left untouched (its rng is copied)."""
    if state.done:
        raise EnvError("cannot step a finished episode; call reset or next_episode")
    s = state.copy()
    cfg, t = s.config, s.terrain
    noise = s.rng.standard_normal(2) * t.action_noise_std
    s.agent_pos, s.agent_vel = _dynamics(s.agent_pos, s.agent_vel, np.asarray(action, dtype=np.float64),
                                         t.drag, t.action_gain, noise, cfg.dt, cfg.v_max)
    s.step_count += 1
    fetched = bool(_norm(s.agent_pos - s.treat_pos) <= cfg.fetch_eps)
    if fetched:
        s.fetches += 1
        s.spawn_radius = s.spawn_radius + cfg.delta
        s.treat_pos = _spawn(s.rng, s.spawn_radius)
    return s, StepResult(obs=_state_obs(s), reward=1.0 if fetched else 0.0, done=s.done, fetched=fetched)


def next_episode(state: EnvState) -> tuple[EnvState, np.ndarray]:
    """Apply the episode-boundary curriculum update and start a new episode."""
    cfg = state.config
    radius = update_curriculum(state.spawn_radius, state.fetches > 0, cfg.delta, cfg.r_min)
    s = state.copy()
    s.agent_pos = np.zeros(2)
    s.agent_vel = np.zeros(2)
    s.spawn_radius = radius
    s.treat_pos = _spawn(s.rng, radius)
    s.step_count = 0
    s.fetches = 0
    s.episode_count += 1
    return s, _state_obs(s)


def batch_step(states: Sequence[EnvState], actions: Sequence) -> list[tuple[EnvState, StepResult]]:
    if len(states) != len(actions):
        raise EnvError("states and actions must have the same length")
    return [step(s, a) for s, a in zip(states, actions)]


def env_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


class VecEnv:
    """Array-backed bank of environments with automatic episode rollover.

    Numerically identical to calling ``step``/``next_episode`` per instance; each
    instance draws from its own generator seeded by (seed, index).
    """

    def __init__(self, terrain_ids: Sequence[str], seed: int, config: EnvConfig | None = None,
                 spawn_radius: float | None = None):
        self.config = cfg = config or EnvConfig()
        self.terrain_ids = list(terrain_ids)
        self.n = len(self.terrain_ids)
        terrains = [make_terrain(t) for t in self.terrain_ids]
        self.drag = np.array([t.drag for t in terrains])[:, None]
        self.gain = np.array([t.action_gain for t in terrains])[:, None]
        self.noise_std = np.array([t.action_noise_std for t in terrains])[:, None]
        self.onehot = np.stack([_onehot(cfg, t) for t in self.terrain_ids])
        self.rngs = [env_rng(seed, i) for i in range(self.n)]
        r = cfg.r0 if spawn_radius is None else spawn_radius
        if r < cfg.r_min:
            raise EnvError(f"spawn radius {r} below r_min {cfg.r_min}")
        self.radius = np.full(self.n, float(r))
        self.pos = np.zeros((self.n, 2))
        self.vel = np.zeros((self.n, 2))
        self.treat = np.stack([_spawn(g, r) for g in self.rngs])
        self.steps = np.zeros(self.n, dtype=np.int64)
        self.fetches = np.zeros(self.n, dtype=np.int64)
        self.episodes = np.zeros(self.n, dtype=np.int64)

    def observe(self) -> np.ndarray:
        return observe(self.pos, self.vel, self.treat, self.radius, self.onehot)

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Returns (next_obs, reward, done, fetched). Finished episodes roll over in place."""
        cfg = self.config
        noise = np.stack([g.standard_normal(2) for g in self.rngs]) * self.noise_std
        self.pos, self.vel = _dynamics(self.pos, self.vel, np.asarray(actions, dtype=np.float64),
                                       self.drag, self.gain, noise, cfg.dt, cfg.v_max)
        self.steps += 1
        fetched = _norm(self.pos - self.treat) <= cfg.fetch_eps
        for i in np.flatnonzero(fetched):
            self.fetches[i] += 1
            self.radius[i] = self.radius[i] + cfg.delta
            self.treat[i] = _spawn(self.rngs[i], self.radius[i])
        done = self.steps >= cfg.episode_steps
        for i in np.flatnonzero(done):
            self.radius[i] = update_curriculum(self.radius[i], self.fetches[i] > 0, cfg.delta, cfg.r_min)
            self.pos[i] = 0.0
            self.vel[i] = 0.0
            self.treat[i] = _spawn(self.rngs[i], self.radius[i])
            self.steps[i] = 0
            self.fetches[i] = 0
            self.episodes[i] += 1
        return self.observe(), fetched.astype(np.float64), done, fetched


PolicyFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class ScoreTrace:
    score: float
    episodes: list[tuple[int, float, int]]  # (episode, spawn_radius at start, fetches)

    def to_csv(self) -> str:
        lines = ["episode,spawn_radius,fetches"]
        lines += [f"{e},{r!r},{f}" for e, r, f in self.episodes]
        return "\n".join(lines) + "\n"


def terrain_score(policy: PolicyFn, terrain: Terrain | str, config: EnvConfig | None = None,
                  seed: int = 0, trace: bool = False) -> float | ScoreTrace:
    """Saturated spawn radius reached by ``policy`` under the curriculum.

    Evaluation starts at ``r_min`` and stops once the largest spawn radius seen
    has not grown for ``k_sat`` consecutive episodes, or after
    ``max_eval_episodes``. ``policy`` maps a (1, obs_dim) batch to (1, 2) actions.
    """
    config = config or EnvConfig()
    terrain_id = terrain.id if isinstance(terrain, Terrain) else make_terrain(terrain).id
    env = VecEnv([terrain_id], seed, config, spawn_radius=config.r_min)
    best = config.r_min
    stale = 0
    episodes = []
    obs = env.observe()
    for ep in range(config.max_eval_episodes):
        start_radius = float(env.radius[0])
        improved = ep == 0 or start_radius > best
        best = max(best, start_radius)
        fetches = 0
        for _ in range(config.episode_steps):
            obs, _, done, fetched = env.step(policy(obs))
            if fetched[0]:
                fetches += 1
                # on the final step the radius has already rolled over to the next episode
                reached = start_radius + fetches * config.delta
                if reached > best:
                    best, improved = reached, True
        episodes.append((ep, start_radius, fetches))
        stale = 0 if improved else stale + 1
        if stale >= config.k_sat:
            break
    return ScoreTrace(best, episodes) if trace else best


def proportional_controller(kp: float = 2.0, kd: float = 1.0) -> PolicyFn:
    """Scripted PD controller toward the treat; a calibration oracle for the presets."""

    def act(obs: np.ndarray) -> np.ndarray:
        rel, vel = obs[:, 0:2], obs[:, 2:4]
        return np.clip(kp * rel - kd * vel, -1.0, 1.0)

    return act


def zero_policy(obs: np.ndarray) -> np.ndarray:
    return np.zeros((obs.shape[0], 2))
