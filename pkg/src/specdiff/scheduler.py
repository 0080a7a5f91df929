"""Learned per-chunk scheduling of the speculative sampler's parameters.

The scheduler is an actor-critic network that sees the environment state, the
last few action chunks and the task progress. Before each chunk is generated
it picks a global ``sigma_scale`` and ``accept_threshold`` plus one draft
horizon per denoising stage. Rewards are dense (a function of how many drafts
were accepted) and a terminal success-driven bonus. Training is PPO with
hand-written gradients.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .checkpoint import load_container, save_container
from .errors import ContractError, ParameterError, TrainingDivergedError
from .nn import Adam, Mlp, clip_grad_norm
from .rng import RngStreams
from .speculative import SpecParams

STAGES = ("early", "mid", "late")
K_CHOICES = tuple(range(0, 17, 2))
DEFAULT_BOUNDARIES = (0.2, 0.8)
_LOG_2PI = math.log(2.0 * math.pi)


# ------------------------------------------------------------------ rewards


@dataclass(frozen=True)
class RewardConfig:
    """Reward shaping constants.

    ``t_max`` is the episode step budget and ``delta_t`` the number of
    environment steps between scheduler decisions.
    """

    r_final: float = 100.0
    outcome_kind: str = "continuous"
    t_max: int = 120
    delta_t: int = 4

    def __post_init__(self):
        if self.outcome_kind not in ("discrete", "continuous"):
            raise ParameterError("outcome_kind must be 'discrete' or 'continuous'")
        if not (self.r_final > 0 and self.t_max > 0 and self.delta_t > 0):
            raise ParameterError("r_final, t_max and delta_t must be positive")

    @property
    def expected_updates(self) -> int:
        return -(-int(self.t_max) // int(self.delta_t))

    @property
    def reward_scale(self) -> float:
        return reward_scale(self.r_final, self.t_max, self.delta_t)


def reward_scale(r_final, t_max, delta_t):
    """Dense-reward weight that caps the summed quarter-budget at ``r_final / 4``.

    Integer inputs give an exact :class:`fractions.Fraction`; anything else a float.
    """
    if not (r_final > 0 and t_max > 0 and delta_t > 0):
        raise ParameterError("all arguments must be positive")
    if all(isinstance(v, (int, np.integer)) for v in (r_final, t_max, delta_t)):
        n = -(-int(t_max) // int(delta_t))
        return Fraction(int(r_final), 4 * n)
    return (r_final / 4.0) / math.ceil(t_max / delta_t)


def final_reward(outcome, cfg: RewardConfig) -> float:
    """Terminal reward: ``+-r_final`` for a boolean outcome, linear in progress otherwise."""
    if cfg.outcome_kind == "discrete":
        return float(cfg.r_final if bool(outcome) else -cfg.r_final)
    r_max = float(outcome)
    if not 0.0 <= r_max <= 1.0:
        raise ParameterError(f"progress must lie in [0, 1], got {r_max}")
    return 2.0 * cfg.r_final * r_max - cfg.r_final


def process_reward(n_accept: int, n_draft: int, n_diffusion: int, lam: float) -> float:
    """Dense reward for one decision from its accepted and proposed draft counts."""
    if n_diffusion <= 0:
        raise ParameterError("n_diffusion must be positive")
    if n_accept < 0 or n_draft < 0:
        raise ContractError("counts must be nonnegative")
    if n_accept > n_draft:
        raise ContractError(f"n_accept={n_accept} exceeds n_draft={n_draft}")
    if n_draft == 0:
        return 0.0
    return (n_accept / n_draft + n_accept / n_diffusion) * float(lam)


# ------------------------------------------------------------------ stages


def stage_of(t: int, sched, boundaries=DEFAULT_BOUNDARIES) -> str:
    """Denoising stage of timestep ``t``; ``sched`` may be a schedule or a step count."""
    b1, b2 = boundaries
    if not 0 < b1 < b2 < 1:
        raise ParameterError(f"boundaries must satisfy 0 < b1 < b2 < 1, got {boundaries}")
    num_steps = getattr(sched, "num_steps", sched)
    frac = t / num_steps
    if frac > b2:
        return "early"
    if frac > b1:
        return "mid"
    return "late"


@dataclass(frozen=True)
class SchedulerAction:
    sigma_scale: float
    accept_threshold: float
    k_stage: tuple

    def __post_init__(self):
        if not self.sigma_scale > 0:
            raise ParameterError("sigma_scale must be positive")
        if not 0 < self.accept_threshold <= 1:
            raise ParameterError("accept_threshold must lie in (0, 1]")
        if len(self.k_stage) != len(STAGES) or any(int(k) != k or k < 0 for k in self.k_stage):
            raise ParameterError("k_stage must hold three nonnegative integers")

    def to_dict(self) -> dict:
        return {"sigma_scale": float(self.sigma_scale),
                "accept_threshold": float(self.accept_threshold),
                "k_stage": [int(k) for k in self.k_stage]}


@dataclass(frozen=True)
class StageRule:
    """Parameter source that switches the draft horizon by denoising stage."""

    action: SchedulerAction
    num_steps: int
    boundaries: tuple = DEFAULT_BOUNDARIES
    accept_mode: str = "threshold"

    def __call__(self, t: int) -> SpecParams:
        k = self.action.k_stage[STAGES.index(stage_of(t, self.num_steps, self.boundaries))]
        return SpecParams(int(k), float(self.action.accept_threshold),
                          float(self.action.sigma_scale), self.accept_mode)

    def describe(self):
        return {**self.action.to_dict(), "accept_mode": self.accept_mode}

    def to_dict(self) -> dict:
        return self.describe()


# ------------------------------------------------------------------ network


@dataclass(frozen=True)
class ActionSpec:
    """Layout of the scheduler's action.

    ``boxes`` lists ``(name, low, high)`` continuous components, squashed by
    ``tanh`` into their box; ``choices`` lists ``(name, values)`` categorical ones.
    """

    boxes: tuple = (("sigma_scale", 1.0, 10.0), ("accept_threshold", 0.05, 1.0))
    choices: tuple = (("k_early", K_CHOICES), ("k_mid", K_CHOICES), ("k_late", K_CHOICES))

    def problems(self, values: dict) -> list:
        """Reasons ``values`` cannot serve as a central action (empty if fine)."""
        out = []
        known = {b[0] for b in self.boxes} | {c[0] for c in self.choices}
        out += [f"{k}: unknown action component" for k in values if k not in known]
        for name, lo, hi in self.boxes:
            v = values.get(name)
            if v is not None and not (isinstance(v, (int, float)) and lo < v < hi):
                out.append(f"{name}={v!r} must lie strictly inside ({lo}, {hi})")
        for name, vals in self.choices:
            if name in values and values[name] not in vals:
                out.append(f"{name}={values[name]!r} is not one of {list(vals)}")
        return out

    @property
    def n_cont(self) -> int:
        return len(self.boxes)

    @property
    def sizes(self) -> list:
        return [len(v) for _, v in self.choices]

    @property
    def n_logits(self) -> int:
        return sum(self.sizes)

    def squash(self, u):
        u = np.asarray(u, dtype=np.float64)
        lo = np.array([b[1] for b in self.boxes])
        hi = np.array([b[2] for b in self.boxes])
        return lo + (hi - lo) * 0.5 * (np.tanh(u) + 1.0)

    def log_jacobian(self, u):
        """``log |dy/du|`` summed over the continuous components (last axis)."""
        u = np.asarray(u, dtype=np.float64)
        half = np.array([(b[2] - b[1]) / 2.0 for b in self.boxes])
        # log(1 - tanh^2 u) computed stably
        log_sech2 = 2.0 * (math.log(2.0) - np.abs(u) - np.log1p(np.exp(-2.0 * np.abs(u))))
        return np.sum(np.log(half) + log_sech2, axis=-1)

    def values(self, u, idx) -> dict:
        out = dict(zip((b[0] for b in self.boxes), (float(v) for v in self.squash(u))))
        for (name, vals), i in zip(self.choices, idx):
            out[name] = vals[int(i)]
        return out

    def to_dict(self) -> dict:
        return {"boxes": [list(b) for b in self.boxes],
                "choices": [[n, list(v)] for n, v in self.choices]}

    @classmethod
    def from_dict(cls, d) -> "ActionSpec":
        return cls(tuple((str(n), float(lo), float(hi)) for n, lo, hi in d["boxes"]),
                   tuple((str(n), tuple(v)) for n, v in d["choices"]))


def to_scheduler_action(spec: ActionSpec, u, idx) -> SchedulerAction:
    v = spec.values(u, idx)
    return SchedulerAction(v["sigma_scale"], min(v["accept_threshold"], 1.0),
                           (v["k_early"], v["k_mid"], v["k_late"]))


@dataclass(frozen=True)
class SchedulerObservation:
    env_state: np.ndarray
    recent_actions: np.ndarray
    progress: float


@dataclass
class RawAction:
    """Pre-squash Gaussian sample ``u`` and categorical indices ``idx``."""

    u: np.ndarray
    idx: np.ndarray


class PolicyNetwork:
    """Actor-critic with one encoder per observation stream.

    The env-state, recent-action and progress encoders each map their stream
    to a feature slice; the concatenation feeds a shared trunk, and one linear
    head emits Gaussian means, categorical logits and the value. The Gaussian
    log-std is a free, state-independent parameter.
    """

    def __init__(self, env_dim: int, action_dim: int, spec: ActionSpec = ActionSpec(),
                 enc=(32, 32, 8), hidden=(64, 64), seed=0, params=None, init_log_std=-0.5):
        self.env_dim, self.action_dim = int(env_dim), int(action_dim)
        self.spec = spec
        self.enc = tuple(int(e) for e in enc)
        self.hidden = tuple(int(h) for h in hidden)
        rng = np.random.default_rng(seed)
        n_out = spec.n_cont + spec.n_logits + 1
        self.modules = [
            Mlp([self.env_dim, self.enc[0]], rng, "tanh", out_activation=True),
            Mlp([self.action_dim, self.enc[1]], rng, "tanh", out_activation=True),
            Mlp([1, self.enc[2]], rng, "tanh", out_activation=True),
            Mlp([sum(self.enc), *self.hidden], rng, "tanh", out_activation=True),
            Mlp([self.hidden[-1], n_out], rng, "tanh", out_scale=0.01),
        ]
        sizes = [m.num_params for m in self.modules] + [spec.n_cont]
        flat = np.concatenate([m.params for m in self.modules]
                              + [np.full(spec.n_cont, float(init_log_std))])
        if params is not None:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != flat.shape:
                raise ParameterError(f"expected {flat.size} parameters, got {params.shape}")
            flat = params.copy()
        self.params = flat
        off = 0
        for m, n in zip(self.modules, sizes):
            m.params = self.params[off:off + n]
            m._bind()
            off += n
        self.log_std = self.params[off:]

    @property
    def num_params(self) -> int:
        return self.params.size

    def warm_start(self, values: dict, confidence: float = 4.0):
        """Bias the output head so the central action is ``values``.

        Continuous entries set the Gaussian mean bias to the pre-image of the
        value; categorical entries add ``confidence`` to that choice's logit.
        Only biases change, so the zero-input behaviour of the trunk is kept.
        """
        bad = self.spec.problems(values)
        if bad:
            raise ParameterError("; ".join(bad))
        bias = self.modules[4].layers[-1][1]
        for j, (name, lo, hi) in enumerate(self.spec.boxes):
            if name in values:
                bias[j] = math.atanh(2.0 * (float(values[name]) - lo) / (hi - lo) - 1.0)
        off = self.spec.n_cont
        for (name, vals), n in zip(self.spec.choices, self.spec.sizes):
            if name in values:
                bias[off:off + n] = 0.0
                bias[off + list(vals).index(values[name])] = confidence
            off += n
        return self

    def copy(self) -> "PolicyNetwork":
        return PolicyNetwork(self.env_dim, self.action_dim, self.spec, self.enc, self.hidden,
                             params=self.params)

    def observation_vector(self, obs: SchedulerObservation):
        return (np.asarray(obs.env_state, dtype=np.float64),
                np.asarray(obs.recent_actions, dtype=np.float64),
                np.array([float(obs.progress)]))

    def _check(self, env, act, prog):
        if env.shape[-1] != self.env_dim or act.shape[-1] != self.action_dim or prog.shape[-1] != 1:
            raise ParameterError(
                f"observation dims ({env.shape[-1]}, {act.shape[-1]}, {prog.shape[-1]}) do not "
                f"match network ({self.env_dim}, {self.action_dim}, 1)")

    def trunk_input(self, env, act, prog):
        """Concatenated encoder features; the slices follow stream order."""
        parts = [m.forward(x) for m, x in zip(self.modules[:3], (env, act, prog))]
        return np.concatenate(parts, axis=-1)

    def forward(self, env, act, prog, keep=False):
        """Return ``(means, logits, value)`` (and a cache with ``keep``)."""
        env, act, prog = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (env, act, prog))
        self._check(env, act, prog)
        caches = []
        feats = []
        for m, x in zip(self.modules[:3], (env, act, prog)):
            h, c = m.forward(x, keep=True)
            feats.append(h)
            caches.append(c)
        z = np.concatenate(feats, axis=-1)
        h, c_trunk = self.modules[3].forward(z, keep=True)
        out, c_head = self.modules[4].forward(h, keep=True)
        nc, nl = self.spec.n_cont, self.spec.n_logits
        means, logits, value = out[:, :nc], out[:, nc:nc + nl], out[:, -1]
        if keep:
            return means, logits, value, (caches, c_trunk, c_head)
        return means, logits, value

    def backward(self, cache, g_means, g_logits, g_value, g_log_std):
        caches, c_trunk, c_head = cache
        grad = np.zeros_like(self.params)
        g_out = np.concatenate([g_means, g_logits, g_value[:, None]], axis=1)
        gh, g_in = self.modules[4].backward(c_head, g_out)
        gt, g_z = self.modules[3].backward(c_trunk, g_in)
        parts = [None] * 5
        parts[4], parts[3] = gh, gt
        off = 0
        for i in range(3):
            w = self.enc[i]
            parts[i], _ = self.modules[i].backward(caches[i], g_z[:, off:off + w])
            off += w
        grad[:self.params.size - self.spec.n_cont] = np.concatenate(parts)
        grad[self.params.size - self.spec.n_cont:] = g_log_std
        return grad


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.sum(np.exp(logits - m), axis=-1, keepdims=True))


def _split(spec: ActionSpec, logits):
    out, off = [], 0
    for n in spec.sizes:
        out.append(logits[..., off:off + n])
        off += n
    return out


def log_prob_of_action(net: PolicyNetwork, means, logits, u, idx):
    """Log density of raw actions in the squashed action space (batched)."""
    spec = net.spec
    u = np.atleast_2d(u)
    ls = net.log_std
    lp = np.sum(-0.5 * ((u - means) / np.exp(ls)) ** 2 - ls - 0.5 * _LOG_2PI, axis=-1)
    if spec.n_cont:
        lp = lp - spec.log_jacobian(u)
    idx = np.atleast_2d(idx)
    for j, lg in enumerate(_split(spec, logits)):
        lp = lp + np.take_along_axis(_log_softmax(lg), idx[:, j:j + 1], axis=1)[:, 0]
    return lp


def squashed_log_density(y, mean, log_std, low, high):
    """Density of ``low + (high-low)(tanh(u)+1)/2`` with ``u ~ N(mean, e^{log_std})``."""
    y = np.asarray(y, dtype=np.float64)
    s = (y - low) / (high - low) * 2.0 - 1.0
    u = np.arctanh(np.clip(s, -1 + 1e-15, 1 - 1e-15))
    base = -0.5 * ((u - mean) / math.exp(log_std)) ** 2 - log_std - 0.5 * _LOG_2PI
    return base - np.log((high - low) / 2.0 * (1.0 - s * s))


def policy_act(net: PolicyNetwork, obs: SchedulerObservation, rng=None, deterministic=False):
    """Sample (or, deterministically, pick the central) action.

    Returns ``(SchedulerAction or values dict, RawAction, log_prob, value)``; the
    first element is a :class:`SchedulerAction` when the spec has the default
    layout, otherwise the named values.

    Deterministic mode squashes the Gaussian mean and snaps each categorical's
    expected value to the nearest choice, so an all-zero network lands on the
    centre of every range.
    """
    env, act, prog = net.observation_vector(obs)
    means, logits, value = net.forward(env, act, prog)
    spec = net.spec
    if deterministic:
        u = means[0].copy()
        idx = []
        for (_, vals), lg in zip(spec.choices, _split(spec, logits[0])):
            p = np.exp(_log_softmax(lg))
            ev = float(p @ np.asarray(vals, dtype=np.float64))
            idx.append(int(np.argmin(np.abs(np.asarray(vals, dtype=np.float64) - ev))))
        idx = np.array(idx, dtype=np.int64)
    else:
        if rng is None:
            raise ParameterError("stochastic mode needs an rng")
        u = means[0] + np.exp(net.log_std) * rng.standard_normal(spec.n_cont)
        idx = np.array([rng.choice(len(v), p=np.exp(_log_softmax(lg)))
                        for (_, v), lg in zip(spec.choices, _split(spec, logits[0]))],
                       dtype=np.int64)
    raw = RawAction(u, idx)
    lp = float(log_prob_of_action(net, means, logits, u[None], idx[None])[0])
    names = {b[0] for b in spec.boxes} | {c[0] for c in spec.choices}
    if {"sigma_scale", "accept_threshold", "k_early", "k_mid", "k_late"} <= names:
        action = to_scheduler_action(spec, u, idx)
    else:
        action = spec.values(u, idx)
    return action, raw, lp, float(value[0])


# ------------------------------------------------------------------ PPO


@dataclass
class Transition:
    env_state: np.ndarray
    recent_actions: np.ndarray
    progress: float
    u: np.ndarray
    idx: np.ndarray
    log_prob: float
    value: float
    reward: float = 0.0
    done: bool = False


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 0.99
    epochs: int = 4
    minibatch: int = 64
    lr: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    reward_divisor: float = 1.0
    normalize_advantages: bool = True
    seed: int = 0


def compute_gae(rewards, values, dones, gamma=0.99, lam=0.95, last_value=0.0):
    """Advantages and returns for a flat buffer; ``dones`` mark episode ends."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    adv = np.zeros_like(rewards)
    running = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        if dones[i]:
            next_v, running = 0.0, 0.0
        else:
            next_v = values[i + 1] if i + 1 < len(rewards) else last_value
        delta = rewards[i] + gamma * next_v - values[i]
        running = delta + gamma * lam * running
        adv[i] = running
    return adv, adv + values


def _stack(buffer):
    return (np.array([b.env_state for b in buffer], dtype=np.float64),
            np.array([b.recent_actions for b in buffer], dtype=np.float64).reshape(len(buffer), -1),
            np.array([[b.progress] for b in buffer], dtype=np.float64),
            np.array([b.u for b in buffer], dtype=np.float64).reshape(len(buffer), -1),
            np.array([b.idx for b in buffer], dtype=np.int64).reshape(len(buffer), -1))


def ppo_loss_and_grad(net: PolicyNetwork, batch, cfg: PPOConfig):
    """Clipped-surrogate loss and its parameter gradient on one minibatch.

    ``batch`` is ``(env, act, prog, u, idx, old_logp, adv, ret)``.
    """
    env, act, prog, u, idx, old_lp, adv, ret = batch
    spec = net.spec
    n = len(adv)
    means, logits, value, cache = net.forward(env, act, prog, keep=True)
    lp = log_prob_of_action(net, means, logits, u, idx)
    ratio = np.exp(lp - old_lp)
    lo, hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps
    surr = np.minimum(ratio * adv, np.clip(ratio, lo, hi) * adv)
    # gradient flows only where the unclipped branch is active and inside the band
    live = np.where(adv >= 0, ratio < hi, ratio > lo)
    g_lp = -(adv * ratio * live) / n

    std = np.exp(net.log_std)
    g_means = g_lp[:, None] * (u - means) / std ** 2
    g_log_std = np.sum(g_lp[:, None] * (((u - means) / std) ** 2 - 1.0), axis=0)
    g_logits = np.zeros_like(logits)
    ent = float(np.sum(net.log_std + 0.5 * (1.0 + _LOG_2PI)))
    g_log_std = g_log_std - cfg.entropy_coef * np.ones(spec.n_cont)
    off = 0
    for j, k in enumerate(spec.sizes):
        ls = _log_softmax(logits[:, off:off + k])
        p = np.exp(ls)
        onehot = np.zeros_like(p)
        onehot[np.arange(n), idx[:, j]] = 1.0
        h = -np.sum(p * ls, axis=1)
        ent += float(h.mean())
        g_logits[:, off:off + k] = g_lp[:, None] * (onehot - p)
        # -entropy_coef * dH/dlogits, with dH/dl_j = -p_j (log p_j + H)
        g_logits[:, off:off + k] += cfg.entropy_coef * p * (ls + h[:, None]) / n
        off += k
    v_err = value - ret
    g_value = cfg.value_coef * v_err / n
    loss = (-surr.mean() + 0.5 * cfg.value_coef * float(np.mean(v_err ** 2))
            - cfg.entropy_coef * ent)
    grad = net.backward(cache, g_means, g_logits, g_value, g_log_std)
    info = {"ratio": ratio, "log_prob": lp, "value_loss": float(np.mean(v_err ** 2)),
            "policy_loss": float(-surr.mean()), "entropy": ent,
            "clipped": (ratio < lo) | (ratio > hi)}
    return float(loss), grad, info


def ppo_update(net: PolicyNetwork, buffer, cfg: PPOConfig = PPOConfig(), optimizer=None,
               iteration=0):
    """One PPO update over a gathered buffer of :class:`Transition`.

    Returns ``(net, stats)``; ``net`` is updated in place. On non-finite loss
    the parameters are restored and :class:`TrainingDivergedError` raised.
    """
    if not buffer:
        raise ParameterError("empty rollout buffer")
    env, act, prog, u, idx = _stack(buffer)
    old_lp = np.array([b.log_prob for b in buffer])
    values = np.array([b.value for b in buffer])
    rewards = np.array([b.reward for b in buffer]) / cfg.reward_divisor
    dones = np.array([b.done for b in buffer])
    adv, ret = compute_gae(rewards, values, dones, cfg.gamma, cfg.gae_lambda)
    if cfg.normalize_advantages and len(adv) > 1:
        adv_used = (adv - adv.mean()) / (adv.std() + 1e-8)
    else:
        adv_used = adv
    opt = optimizer or Adam(cfg.lr)
    rng = np.random.default_rng([cfg.seed, int(iteration)])
    backup = net.params.copy()
    n = len(buffer)
    stats = {"value_loss": [], "policy_loss": [], "entropy": [], "clip_fraction": 0.0}
    means0, logits0, _ = net.forward(env, act, prog)
    first_ratio = np.exp(log_prob_of_action(net, means0, logits0, u, idx) - old_lp)
    stats["first_ratio_max_dev"] = float(np.max(np.abs(first_ratio - 1.0)))
    clipped = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        vl, pl, ent = [], [], []
        for s in range(0, n, cfg.minibatch):
            b = order[s:s + cfg.minibatch]
            loss, grad, info = ppo_loss_and_grad(
                net, (env[b], act[b], prog[b], u[b], idx[b], old_lp[b], adv_used[b], ret[b]), cfg)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                net.params[...] = backup
                raise TrainingDivergedError(
                    iteration,
                    f"non-finite PPO loss at epoch {epoch} (loss={loss}, "
                    f"value_loss={info['value_loss']}, max ratio={np.max(info['ratio'])})")
            clip_grad_norm(grad, cfg.max_grad_norm)
            opt.step(net.params, grad)
            vl.append(info["value_loss"] * len(b))
            pl.append(info["policy_loss"] * len(b))
            ent.append(info["entropy"] * len(b))
            if epoch == cfg.epochs - 1:
                clipped += int(info["clipped"].sum())
        stats["value_loss"].append(sum(vl) / n)
        stats["policy_loss"].append(sum(pl) / n)
        stats["entropy"].append(sum(ent) / n)
    means1, logits1, _ = net.forward(env, act, prog)
    new_lp = log_prob_of_action(net, means1, logits1, u, idx)
    stats["approx_kl"] = float(np.mean(old_lp - new_lp))
    stats["clip_fraction"] = clipped / n if cfg.epochs else 0.0
    stats["advantages"] = adv
    stats["returns"] = ret
    return net, stats


# ------------------------------------------------------------------ closed loop


class SchedulerController:
    """Controller that queries the network every ``delta_t`` environment steps.

    Records one :class:`Transition` per decision; the rewards of the cycles
    a decision governs are summed into it.
    """

    def __init__(self, net: PolicyNetwork, num_steps: int, reward_cfg: RewardConfig,
                 rng=None, deterministic=False, boundaries=DEFAULT_BOUNDARIES,
                 accept_mode="threshold", forced_action: SchedulerAction | None = None,
                 features=None):
        self.net = net
        self.features = features
        self.num_steps = int(num_steps)
        self.reward_cfg = reward_cfg
        self.rng = rng
        self.deterministic = deterministic
        self.boundaries = tuple(boundaries)
        self.accept_mode = accept_mode
        self.forced_action = forced_action
        self.transitions: list[Transition] = []
        self.process_rewards: list[float] = []
        self.actions: list[SchedulerAction] = []
        self._rule = None
        self._since = None
        self._acc = self._prop = self._cycles = 0

    def observation(self, ctx) -> SchedulerObservation:
        env_state = self.features(ctx.state) if self.features else ctx.state.features()
        recent = np.concatenate([np.ravel(c) for c in ctx.recent_chunks])
        return SchedulerObservation(env_state, recent, float(ctx.progress))

    def _close(self):
        if not self.transitions or self._cycles == 0:
            return
        r = process_reward(self._acc, self._prop, self.num_steps * self._cycles,
                           self.reward_cfg.reward_scale)
        self.transitions[-1].reward += float(r)
        self.process_rewards.append(float(r))
        self._acc = self._prop = self._cycles = 0

    def params_for_cycle(self, ctx):
        if self._since is None or self._since >= self.reward_cfg.delta_t:
            self._close()
            obs = self.observation(ctx)
            action, raw, lp, value = policy_act(self.net, obs, self.rng, self.deterministic)
            if self.forced_action is not None:
                action = self.forced_action
            self.actions.append(action)
            self.transitions.append(Transition(
                np.asarray(obs.env_state, dtype=np.float64), obs.recent_actions, obs.progress,
                raw.u, raw.idx, lp, value))
            self._rule = StageRule(action, self.num_steps, self.boundaries, self.accept_mode)
            self._since = 0
        return self._rule

    def cycle_done(self, ctx, stats):
        self._since += stats["executed"]
        self._acc += stats["accepted"]
        self._prop += stats["proposed"]
        self._cycles += 1

    def finish(self, success: bool, prog: float):
        self._close()
        if self.transitions:
            outcome = success if self.reward_cfg.outcome_kind == "discrete" else prog
            self.transitions[-1].reward += final_reward(outcome, self.reward_cfg)
            self.transitions[-1].done = True


def run_episode_with_scheduler(policy, net: PolicyNetwork, reward_cfg: RewardConfig,
                               streams: RngStreams, episode_id=0, deterministic=False,
                               keep_events=False, boundaries=DEFAULT_BOUNDARIES,
                               accept_mode="threshold", forced_action=None):
    """Closed-loop episode driven by the scheduler.

    Returns ``(transitions, episode, controller)``.
    """
    from .policy import run_episode

    if net.env_dim != len(policy.cond(_probe_state(policy))):
        raise ParameterError("scheduler env_state dimension does not match the policy features")
    ctrl = SchedulerController(net, policy.schedule.num_steps, reward_cfg, streams.scheduler,
                               deterministic, boundaries, accept_mode, forced_action,
                               features=policy.cond)
    ep = run_episode(policy, ctrl, streams, episode_id, keep_events,
                     window=net.action_dim // policy.env_cfg.action_dim)
    ctrl.finish(ep.report.success, ep.report.progress)
    return ctrl.transitions, ep, ctrl


def _probe_state(policy):
    from .env import make_state
    return make_state((0.1, 0.1), (0.5, 0.5), policy.env_cfg.goal)


@dataclass(frozen=True)
class SchedulerTrainConfig:
    iterations: int = 30
    episodes_per_iter: int = 16
    window: int = 2
    seed: int = 0
    boundaries: tuple = DEFAULT_BOUNDARIES
    accept_mode: str = "threshold"
    ppo: PPOConfig = field(default_factory=PPOConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)


CURVE_COLUMNS = ("update", "mean_return", "acceptance_rate", "mean_k", "mean_threshold")


def make_scheduler_net(policy, window=2, seed=0, **kw) -> PolicyNetwork:
    env_dim = len(policy.cond(_probe_state(policy)))
    return PolicyNetwork(env_dim, window * policy.env_cfg.action_dim, seed=seed, **kw)


def train_scheduler(policy, cfg: SchedulerTrainConfig = SchedulerTrainConfig(), net=None,
                    curve_path=None, log=None):
    """PPO training loop; returns ``(net, curve rows)``.

    Iteration ``i`` collects ``episodes_per_iter`` episodes whose stream
    families are keyed by ``(i, e)`` under ``cfg.seed``.
    """
    net = net or make_scheduler_net(policy, cfg.window, cfg.seed)
    ppo_cfg = cfg.ppo
    if ppo_cfg.reward_divisor == 1.0:
        ppo_cfg = PPOConfig(**{**asdict(ppo_cfg), "reward_divisor": cfg.reward.r_final})
    opt = Adam(ppo_cfg.lr)
    curve = []
    for it in range(cfg.iterations):
        buffer, returns, acc, prop, ks, ths = [], [], 0, 0, [], []
        for e in range(cfg.episodes_per_iter):
            streams = RngStreams.from_seed(cfg.seed, it, e)
            trans, ep, ctrl = run_episode_with_scheduler(
                policy, net, cfg.reward, streams, e, boundaries=cfg.boundaries,
                accept_mode=cfg.accept_mode)
            buffer.extend(trans)
            returns.append(sum(t.reward for t in trans))
            acc += sum(ep.report.accepted_per_cycle)
            prop += sum(ep.report.proposed_per_cycle)
            ks.extend(float(np.mean(a.k_stage)) for a in ctrl.actions)
            ths.extend(a.accept_threshold for a in ctrl.actions)
        net, stats = ppo_update(net, buffer, ppo_cfg, opt, it)
        row = {"update": it, "mean_return": float(np.mean(returns)),
               "acceptance_rate": acc / prop if prop else 0.0,
               "mean_k": float(np.mean(ks)), "mean_threshold": float(np.mean(ths))}
        curve.append(row)
        if log:
            log(f"update {it}: return {row['mean_return']:.2f} acc {row['acceptance_rate']:.3f} "
                f"K {row['mean_k']:.2f} thr {row['mean_threshold']:.3f} "
                f"kl {stats['approx_kl']:.4f}")
    if curve_path is not None:
        write_curve(curve, curve_path)
    return net, curve


def write_curve(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CURVE_COLUMNS})
    return path


def save_scheduler(net: PolicyNetwork, path):
    header = {"kind": "scheduler", "env_dim": net.env_dim, "action_dim": net.action_dim,
              "enc": list(net.enc), "hidden": list(net.hidden), "spec": net.spec.to_dict()}
    return save_container(path, header, {"params": net.params})


def load_scheduler(path) -> PolicyNetwork:
    header, arrays = load_container(path)
    if header.get("kind") != "scheduler":
        raise ValueError(f"{path} does not hold a scheduler checkpoint")
    return PolicyNetwork(header["env_dim"], header["action_dim"],
                         ActionSpec.from_dict(header["spec"]), tuple(header["enc"]),
                         tuple(header["hidden"]), params=arrays["params"])
