"""Noise-prediction models shared by the target and the drafter.

Every denoiser exposes ``evaluate(x, t, cond) -> pred_eps`` and a
``cost_weight`` giving the NFE charged per sequential call. Latents are
``(D,)`` with scalar ``t`` or ``(N, D)`` with ``t`` of shape ``(N,)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .checkpoint import load_container, save_container
from .errors import ContractError, ParameterError, ScheduleMismatchError, TrainingDivergedError
from .nn import Mlp, SgdMomentum
from .schedule import NoiseSchedule, forward_noise, mean_eps_gain

DRAFTER_COST = 0.125
TIME_FEATURES = 8


class Denoiser:
    """Base class; subclasses implement :meth:`evaluate`."""

    cost_weight: float = 1.0
    #: number of trainable parameters, ``None`` for closed-form oracles
    param_count = None

    def evaluate(self, x, t, cond=None) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x, t, cond=None):
        return self.evaluate(x, t, cond)


def _check_t(t, num_steps):
    if np.any(np.asarray(t) < 1):
        raise ContractError("denoiser evaluated at t=0")
    if np.any(np.asarray(t) > num_steps):
        raise ContractError(f"timestep above T={num_steps}")


class AnalyticGaussianMixtureDenoiser(Denoiser):
    """Bayes-optimal ``E[eps | x_t]`` for data drawn from an isotropic Gaussian mixture.

    Args:
        weights: mixture weights, summing to one.
        means: component means, shape ``(K, D)``.
        variance: per-component isotropic variance (0 gives point masses).
        schedule: noise schedule defining ``x_t``.
    """

    def __init__(self, weights, means, variance, schedule: NoiseSchedule, cost_weight=1.0):
        w = np.asarray(weights, dtype=np.float64)
        m = np.atleast_2d(np.asarray(means, dtype=np.float64))
        if w.ndim != 1 or w.size != m.shape[0]:
            raise ParameterError("need one weight per mixture component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ParameterError("mixture weights must lie on the simplex")
        if variance < 0:
            raise ParameterError("variance must be nonnegative")
        self.weights = w
        self.means = m
        self.variance = float(variance)
        self.schedule = schedule
        self.cost_weight = float(cost_weight)

    @classmethod
    def standard_normal(cls, dim, schedule, cost_weight=1.0):
        return cls([1.0], np.zeros((1, dim)), 1.0, schedule, cost_weight)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample_data(self, n, rng) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + np.sqrt(self.variance) * rng.standard_normal((n, self.dim))

    def evaluate(self, x, t, cond=None):
        return analytic_eps(x, t, self)


def analytic_eps(x, t, mixture: AnalyticGaussianMixtureDenoiser) -> np.ndarray:
    sched = mixture.schedule
    _check_t(t, sched.num_steps)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None] if single else x
    ab = np.broadcast_to(sched.alpha_bar[np.asarray(t) - 1], X.shape[:1])[:, None]
    sa = np.sqrt(ab)
    if len(mixture.weights) == 1:
        m = mixture.means[0]
        s2 = ab * mixture.variance + (1.0 - ab)
        x0 = m + (sa * mixture.variance / s2) * (X - sa * m)
    else:
        s2 = ab * mixture.variance + (1.0 - ab)  # (N, 1)
        diff = X[:, None, :] - sa[:, :, None] * mixture.means[None]  # (N, K, D)
        loglik = (
            np.log(mixture.weights)[None]
            - 0.5 * (diff ** 2).sum(-1) / s2
            - 0.5 * X.shape[1] * np.log(s2)
        )
        resp = np.exp(loglik - logsumexp(loglik, axis=1, keepdims=True))
        comp_x0 = mixture.means[None] + (sa * mixture.variance / s2)[:, :, None] * diff
        x0 = (resp[:, :, None] * comp_x0).sum(1)
    eps = (X - sa * x0) / np.sqrt(1.0 - ab)
    return eps[0] if single else eps


class MeanBiasedDenoiser(Denoiser):
    """Wraps a denoiser so its DDPM step mean is shifted by ``bias * sigma_t``.

    ``bias`` is measured in units of the step's standard deviation and may be
    a scalar (applied to every coordinate) or a length-``D`` vector.
    """

    def __init__(self, base: Denoiser, bias, schedule: NoiseSchedule, cost_weight=DRAFTER_COST):
        self.base = base
        self.bias = np.asarray(bias, dtype=np.float64)
        self.schedule = schedule
        self.cost_weight = float(cost_weight)

    def evaluate(self, x, t, cond=None):
        eps = self.base.evaluate(x, t, cond)
        if not np.any(self.bias):
            return eps
        idx = np.asarray(t) - 1
        shift = self.schedule.sigma[idx] / mean_eps_gain(t, self.schedule)
        if np.ndim(shift):
            shift = shift[:, None]
        return eps + self.bias * shift


def time_features(t, num_steps: int) -> np.ndarray:
    """Eight sinusoidal features of ``t / T``."""
    tau = np.asarray(t, dtype=np.float64) / num_steps
    freqs = np.pi * 2.0 ** np.arange(TIME_FEATURES // 2)
    ang = tau[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class MlpDenoiser(Denoiser):
    """Two-hidden-layer SiLU MLP on ``[x, time features, cond]`` predicting eps."""

    def __init__(self, latent_dim, cond_dim, num_steps, hidden=(128, 128), rng=None,
                 cost_weight=1.0, params=None, seed=None):
        self.latent_dim = int(latent_dim)
        self.cond_dim = int(cond_dim)
        self.num_steps = int(num_steps)
        self.hidden = tuple(int(h) for h in hidden)
        self.cost_weight = float(cost_weight)
        self.seed = seed
        if rng is None and params is None:
            rng = np.random.default_rng(seed)
        sizes = (self.latent_dim + TIME_FEATURES + self.cond_dim, *self.hidden, self.latent_dim)
        self.net = Mlp(sizes, rng=rng, activation="silu", params=params, out_scale=0.1)

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    @property
    def param_count(self) -> int:
        return self.net.num_params

    def copy(self, cost_weight=None) -> "MlpDenoiser":
        return MlpDenoiser(self.latent_dim, self.cond_dim, self.num_steps, self.hidden,
                           cost_weight=self.cost_weight if cost_weight is None else cost_weight,
                           params=self.params.copy(), seed=self.seed)

    def _inputs(self, x, t, cond):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.latent_dim:
            raise ParameterError(f"latent dim {x.shape[-1]} != {self.latent_dim}")
        _check_t(t, self.num_steps)
        tf = time_features(np.broadcast_to(t, x.shape[:-1]), self.num_steps)
        parts = [x, tf]
        if self.cond_dim:
            if cond is None:
                raise ParameterError("conditioning vector required")
            c = np.asarray(cond, dtype=np.float64)
            if c.shape[-1] != self.cond_dim:
                raise ParameterError(f"cond dim {c.shape[-1]} != {self.cond_dim}")
            parts.append(np.broadcast_to(c, x.shape[:-1] + (self.cond_dim,)))
        return np.concatenate(parts, axis=-1)

    def evaluate(self, x, t, cond=None):
        return self.net.forward(self._inputs(x, t, cond))

    def forward_train(self, x, t, cond=None):
        return self.net.forward(self._inputs(x, t, cond), keep=True)

    def backward(self, cache, grad_out) -> np.ndarray:
        return self.net.backward(cache, grad_out)[0]

    def header(self, sched: NoiseSchedule) -> dict:
        return {
            "kind": "mlp_denoiser",
            "latent_dim": self.latent_dim,
            "cond_dim": self.cond_dim,
            "num_steps": self.num_steps,
            "hidden": list(self.hidden),
            "cost_weight": self.cost_weight,
            "schedule_hash": sched.fingerprint(),
            "seed": self.seed,
        }

    def save(self, path, sched: NoiseSchedule, extra=None):
        header = self.header(sched)
        header.update(extra or {})
        return save_container(path, header, {"params": self.params})


def load_denoiser(path, sched: NoiseSchedule) -> MlpDenoiser:
    header, arrays = load_container(path)
    if header.get("kind") != "mlp_denoiser":
        raise ValueError(f"{path} does not hold a denoiser checkpoint")
    if header["schedule_hash"] != sched.fingerprint():
        raise ScheduleMismatchError(
            f"{path} was trained with schedule {header['schedule_hash']}, "
            f"current schedule is {sched.fingerprint()}"
        )
    return MlpDenoiser(header["latent_dim"], header["cond_dim"], header["num_steps"],
                       header["hidden"], cost_weight=header["cost_weight"],
                       params=arrays["params"], seed=header.get("seed"))


# --------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    iterations: int = 4000
    batch_size: int = 256
    lr: float = 0.05
    momentum: float = 0.9
    lr_final_frac: float = 0.1
    seed: int = 0
    log_every: int = 50


@dataclass
class DistillConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 256
    iterations: int = 4000
    seed: int = 1
    hidden: tuple = (64, 64)
    lr_final_frac: float = 0.1
    log_every: int = 50

    def __post_init__(self):
        # zero disables a term (ablation); both zero leaves nothing to optimize
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda1 + self.lambda2 <= 0:
            raise ParameterError("lambda1, lambda2 must be >= 0 and not both zero")


def _lr_at(base, it, total, final_frac):
    if total <= 1:
        return base
    frac = it / (total - 1)
    return base * (final_frac + (1 - final_frac) * 0.5 * (1 + np.cos(np.pi * frac)))


def _unpack(dataset):
    if isinstance(dataset, tuple):
        x0, cond = dataset
    else:
        x0, cond = np.asarray(dataset), None
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0:
        raise ParameterError("dataset is empty")
    if cond is not None:
        cond = np.asarray(cond, dtype=np.float64)
        if cond.shape[0] != x0.shape[0]:
            raise ParameterError("x0 and cond row counts differ")
    return x0, cond


def ddpm_train_target(dataset, sched: NoiseSchedule, net: MlpDenoiser, config: TrainConfig):
    """Fit ``net`` with the standard eps-prediction loss; returns ``(net, history)``.

    ``history`` holds ``{"iteration", "loss", "smoothed"}`` rows every
    ``log_every`` iterations. Training mutates ``net`` in place.
    """
    x0, cond = _unpack(dataset)
    rng = np.random.default_rng(config.seed)
    opt = SgdMomentum(config.lr, config.momentum)
    history = []
    ema = None
    n, d = x0.shape
    for it in range(config.iterations):
        idx = rng.integers(0, n, size=config.batch_size)
        t = rng.integers(1, sched.num_steps + 1, size=config.batch_size)
        eps = rng.standard_normal((config.batch_size, d))
        xt = forward_noise(x0[idx], t, eps, sched)
        pred, cache = net.forward_train(xt, t, None if cond is None else cond[idx])
        err = pred - eps
        loss = float(np.mean(err ** 2))
        if not np.isfinite(loss):
            raise TrainingDivergedError(it)
        grad = net.backward(cache, 2.0 * err / err.size)
        opt.step(net.params, grad, _lr_at(config.lr, it, config.iterations, config.lr_final_frac))
        ema = loss if ema is None else 0.95 * ema + 0.05 * loss
        if it % config.log_every == 0 or it == config.iterations - 1:
            history.append({"iteration": it, "loss": loss, "smoothed": ema})
    return net, history


def distill_loss(m_hat, m, mu_hat, mu, sigma, lambda1, lambda2) -> float:
    """Weighted sum of prediction-matching and sigma-normalized mean-matching errors."""
    if not sigma > 0:
        raise ParameterError("sigma must be positive")
    m_hat, m = np.asarray(m_hat, float), np.asarray(m, float)
    mu_hat, mu = np.asarray(mu_hat, float), np.asarray(mu, float)
    if m_hat.shape != m.shape or mu_hat.shape != mu.shape:
        raise ParameterError("dimension mismatch")
    return float(lambda1 * np.sum((m_hat - m) ** 2) + lambda2 * np.sum(((mu_hat - mu) / sigma) ** 2))


def distill_batch_loss(drafter, target, xt, t, cond, sched, lambda1, lambda2, keep=False):
    """Mean distillation loss over a batch of noisy latents sharing their targets.

    Returns ``(total, pred_term, norm_term)`` and, with ``keep``, the gradient
    with respect to the drafter parameters as a fourth element.
    """
    m = target.evaluate(xt, t, cond)
    m_hat, cache = drafter.forward_train(xt, t, cond)
    gain = mean_eps_gain(t, sched)[:, None]
    sigma = sched.sigma[t - 1][:, None]
    diff = m_hat - m
    w_norm = (gain / sigma) ** 2
    b = xt.shape[0]
    pred_term = float(np.sum(diff ** 2) / b)
    norm_term = float(np.sum(w_norm * diff ** 2) / b)
    total = lambda1 * pred_term + lambda2 * norm_term
    if not keep:
        return total, pred_term, norm_term
    grad_out = 2.0 * (lambda1 + lambda2 * w_norm) * diff / b
    return total, pred_term, norm_term, drafter.backward(cache, grad_out)


def distill_drafter(target: Denoiser, dataset, sched: NoiseSchedule, config: DistillConfig,
                    drafter: MlpDenoiser | None = None, allow_equal_size=False):
    """Train a drafter to imitate a frozen target; returns ``(drafter, history)``.

    ``history`` rows carry the separate ``pred`` and ``norm`` terms. The target
    is only ever evaluated, never updated.
    """
    x0, cond = _unpack(dataset)
    n, d = x0.shape
    if drafter is None:
        drafter = MlpDenoiser(d, 0 if cond is None else cond.shape[1], sched.num_steps,
                              config.hidden, cost_weight=DRAFTER_COST, seed=config.seed)
    if (target.param_count is not None and not allow_equal_size
            and drafter.param_count >= target.param_count):
        raise ParameterError(
            f"drafter has {drafter.param_count} parameters, target {target.param_count}; "
            "the drafter must be strictly smaller"
        )
    rng = np.random.default_rng(config.seed)
    opt = SgdMomentum(config.lr, config.momentum)
    history = []
    for it in range(config.iterations):
        idx = rng.integers(0, n, size=config.batch_size)
        t = rng.integers(1, sched.num_steps + 1, size=config.batch_size)
        eps = rng.standard_normal((config.batch_size, d))
        xt = forward_noise(x0[idx], t, eps, sched)
        c = None if cond is None else cond[idx]
        total, pt, nt, grad = distill_batch_loss(
            drafter, target, xt, t, c, sched, config.lambda1, config.lambda2, keep=True)
        if not np.isfinite(total):
            raise TrainingDivergedError(it)
        opt.step(drafter.params, grad,
                 _lr_at(config.lr, it, config.iterations, config.lr_final_frac))
        if it % config.log_every == 0 or it == config.iterations - 1:
            history.append({"iteration": it, "loss": total, "pred": pt, "norm": nt})
    return drafter, history


def heldout_distill_loss(drafter, target, dataset, sched, config: DistillConfig, n=2048, seed=12345):
    x0, cond = _unpack(dataset)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x0.shape[0], size=n)
    t = rng.integers(1, sched.num_steps + 1, size=n)
    xt = forward_noise(x0[idx], t, rng.standard_normal((n, x0.shape[1])), sched)
    c = None if cond is None else cond[idx]
    return distill_batch_loss(drafter, target, xt, t, c, sched, config.lambda1, config.lambda2)


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
