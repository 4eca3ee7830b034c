"""Child training: behavior cloning from terrain experts blended with PPO.

Every iteration the student collects on-policy rollouts on all target terrains
while the expert for each visited terrain is queried (never executed) on the
student's states. The update minimizes

    w_i * L_bc + (1 - w_i) * (-surrogate + c * KL[old || new] + beta * L_value)

with ``w_i`` from a :class:`~pgevo.schedules.TransitionSchedule`.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .environment import EnvConfig, VecEnv, terrain_score
from .policy import (
    AdamState,
    Architecture,
    HeadGrad,
    PolicyOutput,
    PolicyParams,
    forward,
    init_params,
    kl_terms,
    log_prob,
    policy_mean_fn,
    sample_action,
    sgd_adam_update,
    value_and_grad,
)
from .schedules import TransitionSchedule, bc_weight

log = logging.getLogger(__name__)


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    iterations: int = 1000
    steps_per_env: int = 64
    n_envs: int = 16
    epochs: int = 4
    minibatch: int = 256
    lr: float = 3e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    c_kl: float = 0.5
    beta_value: float = 0.5
    hidden: tuple[int, ...] = (64, 64)
    eval_every: int = 0          # 0 -> evaluate only after the last iteration
    eval_seeds: tuple[int, ...] = (0,)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["hidden"] = list(self.hidden)
        d["eval_seeds"] = list(self.eval_seeds)
        return d

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "TrainerConfig":
        d = dict(d or {})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainError(f"unknown trainer config keys: {sorted(unknown)}")
        for k in ("hidden", "eval_seeds"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# -- rollouts ------------------------------------------------------------------

@dataclass
class RolloutBatch:
    """Arrays with leading dimensions (T, n_envs)."""

    obs: np.ndarray
    actions: np.ndarray
    log_prob_old: np.ndarray
    mean_old: np.ndarray
    log_std_old: np.ndarray      # (act_dim,)
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    terrain_ids: np.ndarray      # (T, n_envs) of str
    expert_mean: np.ndarray | None
    expert_std: np.ndarray | None
    bootstrap_value: np.ndarray  # (n_envs,)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def has_expert(self) -> bool:
        return self.expert_mean is not None

    @property
    def shape(self) -> tuple[int, int]:
        return self.rewards.shape

    def flat(self) -> "FlatBatch":
        T, n = self.shape
        m = T * n
        return FlatBatch(
            obs=self.obs.reshape(m, -1),
            actions=self.actions.reshape(m, -1),
            log_prob_old=self.log_prob_old.reshape(m),
            mean_old=self.mean_old.reshape(m, -1),
            log_std_old=self.log_std_old,
            advantages=None if self.advantages is None else self.advantages.reshape(m),
            returns=None if self.returns is None else self.returns.reshape(m),
            expert_mean=None if self.expert_mean is None else self.expert_mean.reshape(m, -1),
            expert_log_std=None if self.expert_std is None else np.log(self.expert_std.reshape(m, -1)),
        )


@dataclass
class FlatBatch:
    obs: np.ndarray
    actions: np.ndarray
    log_prob_old: np.ndarray
    mean_old: np.ndarray
    log_std_old: np.ndarray
    advantages: np.ndarray | None
    returns: np.ndarray | None
    expert_mean: np.ndarray | None
    expert_log_std: np.ndarray | None

    def take(self, idx: np.ndarray) -> "FlatBatch":
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return FlatBatch(self.obs[idx], self.actions[idx], self.log_prob_old[idx], self.mean_old[idx],
                         self.log_std_old, pick(self.advantages), pick(self.returns),
                         pick(self.expert_mean), pick(self.expert_log_std))

    def __len__(self) -> int:
        return self.obs.shape[0]


def collect_rollouts(student: PolicyParams, experts: Mapping[str, PolicyParams], envs: VecEnv,
                     steps_per_env: int, rng: np.random.Generator) -> RolloutBatch:
    """Roll the student out for ``steps_per_env`` steps on every env.

    Experts are queried on the student's own states; an empty expert map yields
    a batch without expert fields.
    """
    if experts:
        missing = sorted(set(envs.terrain_ids) - set(experts))
        if missing:
            raise TrainError(f"no expert for visited terrain(s) {missing}")
    groups = {t: np.array([i for i, e in enumerate(envs.terrain_ids) if e == t]) for t in set(envs.terrain_ids)}
    T, n, A = steps_per_env, envs.n, student.arch.act_dim
    obs_buf = np.zeros((T, n, student.arch.obs_dim))
    act_buf = np.zeros((T, n, A))
    logp_buf = np.zeros((T, n))
    mean_buf = np.zeros((T, n, A))
    rew_buf = np.zeros((T, n))
    done_buf = np.zeros((T, n))
    val_buf = np.zeros((T, n))
    em_buf = np.zeros((T, n, A)) if experts else None
    es_buf = np.zeros((T, n, A)) if experts else None
    obs = envs.observe()
    for t in range(T):
        out = forward(student, obs)
        action = sample_action(out, rng)
        obs_buf[t], act_buf[t], mean_buf[t] = obs, action, out.mean
        logp_buf[t] = log_prob(out, action)
        val_buf[t] = out.value
        if experts:
            for terrain, idx in groups.items():
                e = forward(experts[terrain], obs[idx])
                em_buf[t, idx] = e.mean
                es_buf[t, idx] = e.std
        obs, reward, done, _ = envs.step(action)
        rew_buf[t], done_buf[t] = reward, done
    bootstrap = forward(student, obs).value
    terrain_ids = np.tile(np.array(envs.terrain_ids, dtype=object), (T, 1))
    return RolloutBatch(obs_buf, act_buf, logp_buf, mean_buf, student["log_std"].copy(), rew_buf, done_buf,
                        val_buf, terrain_ids, em_buf, es_buf, bootstrap)


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, bootstrap_value: np.ndarray,
        gamma: float = 0.99, lam: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and returns; ``dones[t]`` ends the episode after step t."""
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros_like(bootstrap_value)
    for t in reversed(range(T)):
        next_value = bootstrap_value if t == T - 1 else values[t + 1]
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv, adv + values


def compute_advantages(batch: RolloutBatch, gamma: float = 0.99, lam: float = 0.95) -> RolloutBatch:
    adv, ret = gae(batch.rewards, batch.values, batch.dones, batch.bootstrap_value, gamma, lam)
    batch.returns = ret
    batch.advantages = (adv - adv.mean()) / (adv.std() + 1e-8)
    return batch


# -- losses --------------------------------------------------------------------

@dataclass(frozen=True)
class RLCoefficients:
    clip: float = 0.2
    c_kl: float = 0.5
    beta_value: float = 0.5


def _bc_terms(out: PolicyOutput, fb: FlatBatch):
    if fb.expert_mean is None:
        raise TrainError("batch carries no expert targets")
    m, a = fb.expert_mean.shape
    diff_mu = out.mean - fb.expert_mean
    diff_ls = out.log_std[None, :] - fb.expert_log_std
    l_mu = float(np.sum(diff_mu * diff_mu) / (m * a))
    l_sigma = float(np.sum(diff_ls * diff_ls) / (m * a))
    d_mean = 2.0 * diff_mu / (m * a)
    d_log_std = 2.0 * diff_ls.sum(axis=0) / (m * a)
    return l_mu, l_sigma, d_mean, d_log_std


def _rl_terms(out: PolicyOutput, fb: FlatBatch, coef: RLCoefficients):
    if fb.advantages is None or fb.returns is None:
        raise TrainError("batch has no advantages; run compute_advantages first")
    m = len(fb)
    std = out.std
    z = (fb.actions - out.mean) / std
    logp = np.sum(-0.5 * z * z - out.log_std, axis=-1) - 0.5 * math.log(2.0 * math.pi) * out.mean.shape[1]
    ratio = np.exp(logp - fb.log_prob_old)
    if not np.all(np.isfinite(ratio)):
        raise TrainError("non-finite probability ratio")
    adv = fb.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - coef.clip, 1.0 + coef.clip) * adv
    surrogate = float(np.mean(np.minimum(unclipped, clipped)))
    active = unclipped <= clipped
    # d(-surrogate)/d logp
    d_logp = -np.where(active, ratio * adv, 0.0) / m
    d_mean = d_logp[:, None] * z / std
    d_log_std = np.sum(d_logp[:, None] * (z * z - 1.0), axis=0)

    kl = float(np.mean(kl_terms(fb.mean_old, fb.log_std_old, out.mean, out.log_std)))
    var_new = np.exp(2.0 * out.log_std)
    gap = out.mean - fb.mean_old
    d_mean = d_mean + coef.c_kl * gap / var_new / m
    d_log_std = d_log_std + coef.c_kl * np.mean(1.0 - (np.exp(2.0 * fb.log_std_old) + gap * gap) / var_new, axis=0)

    err = out.value - fb.returns
    l_value = float(np.mean(err * err))
    d_value = coef.beta_value * 2.0 * err / m
    return surrogate, kl, l_value, d_mean, d_log_std, d_value


@dataclass
class LossBreakdown:
    total: float
    w_bc: float
    bc_mu: float = float("nan")
    bc_sigma: float = float("nan")
    surrogate: float = float("nan")
    kl: float = float("nan")
    value: float = float("nan")

    @property
    def bc(self) -> float:
        return self.bc_mu + self.bc_sigma


class CombinedHeadLoss:
    """Head-space loss for ``value_and_grad``: w * L_bc + (1 - w) * L_rl.

    The RL part is skipped when w == 1 and the BC part when w == 0, so the
    endpoints reproduce the individual losses exactly. ``per_sample`` splits
    the total into per-row contributions, which lets finite differences cancel
    the unchanged bulk of the loss before rounding.
    """

    def __init__(self, fb: FlatBatch, w: float, coef: RLCoefficients = RLCoefficients(),
                 breakdown: list | None = None):
        if not 0.0 <= w <= 1.0:
            raise TrainError(f"BC weight {w} outside [0, 1]")
        if w > 0.0 and fb.expert_mean is None:
            raise TrainError("BC weight > 0 but the batch has no expert targets")
        self.fb, self.w, self.coef, self.breakdown = fb, w, coef, breakdown

    def __call__(self, out: PolicyOutput) -> tuple[float, HeadGrad]:
        fb, w, coef = self.fb, self.w, self.coef
        n, a = out.mean.shape
        d_mean = np.zeros((n, a))
        d_log_std = np.zeros(a)
        d_value = np.zeros(n)
        total = 0.0
        bd = LossBreakdown(0.0, w)
        if w > 0.0:
            l_mu, l_sigma, dm, dl = _bc_terms(out, fb)
            bd.bc_mu, bd.bc_sigma = l_mu, l_sigma
            total += w * (l_mu + l_sigma)
            d_mean += w * dm
            d_log_std += w * dl
        elif fb.expert_mean is not None:
            bd.bc_mu, bd.bc_sigma = _bc_terms(out, fb)[:2]
        if w < 1.0:
            surr, kl, l_value, dm, dl, dv = _rl_terms(out, fb, coef)
            bd.surrogate, bd.kl, bd.value = surr, kl, l_value
            total += (1.0 - w) * (-surr + coef.c_kl * kl + coef.beta_value * l_value)
            d_mean += (1.0 - w) * dm
            d_log_std += (1.0 - w) * dl
            d_value += (1.0 - w) * dv
        elif fb.advantages is not None:
            bd.surrogate, bd.kl, bd.value = _rl_terms(out, fb, coef)[:3]
        bd.total = total
        if self.breakdown is not None:
            self.breakdown.append(bd)
        return total, HeadGrad(d_mean, d_log_std, d_value)

    def per_sample(self, out: PolicyOutput) -> np.ndarray:
        fb, w, coef = self.fb, self.w, self.coef
        m, a = out.mean.shape
        terms = np.zeros(m)
        if w > 0.0:
            bc = (np.sum((out.mean - fb.expert_mean) ** 2, axis=1)
                  + np.sum((out.log_std[None, :] - fb.expert_log_std) ** 2, axis=1)) / (m * a)
            terms += w * bc
        if w < 1.0:
            z = (fb.actions - out.mean) / out.std
            logp = np.sum(-0.5 * z * z - out.log_std, axis=-1) - 0.5 * math.log(2.0 * math.pi) * a
            ratio = np.exp(logp - fb.log_prob_old)
            adv = fb.advantages
            surr = np.minimum(ratio * adv, np.clip(ratio, 1.0 - coef.clip, 1.0 + coef.clip) * adv) / m
            kl = kl_terms(fb.mean_old, fb.log_std_old, out.mean, out.log_std) / m
            value = (out.value - fb.returns) ** 2 / m
            terms += (1.0 - w) * (-surr + coef.c_kl * kl + coef.beta_value * value)
        return terms


def combined_head_loss(fb: FlatBatch, w: float, coef: RLCoefficients = RLCoefficients(),
                       breakdown: list | None = None) -> CombinedHeadLoss:
    return CombinedHeadLoss(fb, w, coef, breakdown)


def bc_loss(batch: RolloutBatch | FlatBatch, student: PolicyParams) -> tuple[float, dict]:
    fb = batch.flat() if isinstance(batch, RolloutBatch) else batch
    l_mu, l_sigma, _, _ = _bc_terms(forward(student, fb.obs), fb)
    return l_mu + l_sigma, {"bc_mu": l_mu, "bc_sigma": l_sigma}


def rl_loss(batch: RolloutBatch | FlatBatch, student: PolicyParams,
            coef: RLCoefficients = RLCoefficients()) -> tuple[float, dict]:
    """Minimization form: -clipped_surrogate + c * KL + beta * L_value."""
    fb = batch.flat() if isinstance(batch, RolloutBatch) else batch
    surr, kl, l_value = _rl_terms(forward(student, fb.obs), fb, coef)[:3]
    total = -surr + coef.c_kl * kl + coef.beta_value * l_value
    return total, {"surrogate": surr, "kl": kl, "value": l_value}


def combined_loss(batch: RolloutBatch | FlatBatch, student: PolicyParams, schedule: TransitionSchedule,
                  i: int, coef: RLCoefficients = RLCoefficients()) -> float:
    fb = batch.flat() if isinstance(batch, RolloutBatch) else batch
    head = combined_head_loss(fb, bc_weight(schedule, i), coef)
    return head(forward(student, fb.obs))[0]


# -- training loop -------------------------------------------------------------

METRIC_COLUMNS = ("iter", "w_bc", "loss_bc_mu", "loss_bc_sigma", "loss_surrogate", "loss_kl",
                  "loss_value", "reward_mean")


@dataclass
class TrainReport:
    terrains: list[str]
    records: list[dict] = field(default_factory=list)
    scores: dict[str, float] = field(default_factory=dict)
    params: PolicyParams | None = None
    checkpoint_ref: str | None = None

    def metrics_csv(self) -> str:
        cols = list(METRIC_COLUMNS) + [f"score_{t}" for t in self.terrains]
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        for rec in self.records:
            buf.write(",".join(_fmt(rec.get(c)) for c in cols) + "\n")
        return buf.getvalue()

    def series(self, column: str) -> np.ndarray:
        return np.array([float("nan") if r.get(column) is None else r[column] for r in self.records])


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def split_terrains(terrains: Sequence[str], n_envs: int) -> list[str]:
    ordered = sorted(terrains)
    return [ordered[i % len(ordered)] for i in range(n_envs)]


def evaluate(params: PolicyParams, terrains: Sequence[str], env_config: EnvConfig | None = None,
             seeds: Sequence[int] = (0,)) -> dict[str, float]:
    """Mean saturated score per terrain, acting with the policy mean."""
    act = policy_mean_fn(params)
    return {t: float(np.mean([terrain_score(act, t, env_config, seed=s) for s in seeds])) for t in terrains}


def train_child(terrains: Sequence[str], schedule: TransitionSchedule, seed: int,
                experts: Mapping[str, PolicyParams] | None = None, config: TrainerConfig | None = None,
                env_config: EnvConfig | None = None, progress=None) -> TrainReport:
    """Train one policy on ``terrains``; experts map terrain id to a frozen parent policy."""
    cfg = config or TrainerConfig()
    env_cfg = env_config or EnvConfig()
    experts = dict(experts or {})
    terrains = sorted(set(terrains))
    if experts:
        missing = sorted(set(terrains) - set(experts))
        if missing:
            raise TrainError(f"no expert policy for terrain(s) {missing}")
    arch = Architecture(env_cfg.obs_dim, 2, cfg.hidden)
    for t, e in experts.items():
        if e.arch.obs_dim != arch.obs_dim or e.arch.act_dim != arch.act_dim:
            raise TrainError(f"expert for {t} has incompatible architecture {e.arch}")
    student = init_params(arch, seed)
    opt = AdamState.zeros(arch.size)
    envs = VecEnv(split_terrains(terrains, cfg.n_envs), seed, env_cfg)
    act_rng = np.random.default_rng([seed, 0xAC7])
    perm_rng = np.random.default_rng([seed, 0x5EED])
    coef = RLCoefficients(cfg.clip, cfg.c_kl, cfg.beta_value)
    report = TrainReport(terrains)

    for i in range(cfg.iterations):
        w = bc_weight(schedule, i)
        if w > 0.0 and not experts:
            raise TrainError(f"schedule {schedule.id} asks for BC weight {w} but no experts were given")
        batch = compute_advantages(collect_rollouts(student, experts, envs, cfg.steps_per_env, act_rng),
                                   cfg.gamma, cfg.gae_lambda)
        fb = batch.flat()
        parts: list[LossBreakdown] = []
        for _ in range(cfg.epochs):
            order = perm_rng.permutation(len(fb))
            for start in range(0, len(fb), cfg.minibatch):
                mb = fb.take(order[start:start + cfg.minibatch])
                try:
                    _, g = value_and_grad(student, mb.obs, combined_head_loss(mb, w, coef, parts))
                except (TrainError, ValueError) as e:
                    raise TrainError(f"iteration {i}: {e}") from e
                student, opt = sgd_adam_update(student, g, opt, cfg.lr)
        rec = {
            "iter": i,
            "w_bc": w,
            "loss_bc_mu": _mean(p.bc_mu for p in parts),
            "loss_bc_sigma": _mean(p.bc_sigma for p in parts),
            "loss_surrogate": _mean(p.surrogate for p in parts),
            "loss_kl": _mean(p.kl for p in parts),
            "loss_value": _mean(p.value for p in parts),
            "reward_mean": float(batch.rewards.mean()),
        }
        last = i == cfg.iterations - 1
        if last or (cfg.eval_every and (i + 1) % cfg.eval_every == 0):
            scores = evaluate(student, terrains, env_cfg, cfg.eval_seeds)
            rec.update({f"score_{t}": s for t, s in scores.items()})
            if last:
                report.scores = scores
        report.records.append(rec)
        if progress is not None:
            progress(rec)
    report.params = student
    return report


def _mean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")
