"""Speculative denoising: draft rollout, Gaussian acceptance test, reflection coupling.

A round starts from a committed latent ``x_t``. The target proposes the
one-step candidate ``c_0`` at ``t - 1``; the drafter then extends it with up to
``K`` further steps ``c_1 .. c_K`` (timesteps ``t - 2 .. t - 1 - K``). One
batched target pass scores every candidate, the accepted prefix is committed
and the first rejected candidate is replaced by its reflection-coupled
correction.

NFE accounting: each batched verification pass and each target evaluation of
a fresh latent costs 1; each drafter call costs ``drafter.cost_weight``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import ParameterError
from .rng import RngStreams
from .schedule import NoiseSchedule, posterior_step, sample_step

ACCEPT_MODES = ("stochastic", "threshold")


@dataclass(frozen=True)
class SpecParams:
    draft_horizon: int = 0
    accept_threshold: float = 0.3
    sigma_scale: float = 1.0
    accept_mode: str = "threshold"

    def __post_init__(self):
        if int(self.draft_horizon) != self.draft_horizon or self.draft_horizon < 0:
            raise ParameterError(f"draft_horizon must be a nonnegative integer, got {self.draft_horizon}")
        if not (0 < self.accept_threshold <= 1):
            raise ParameterError("accept_threshold must lie in (0, 1]")
        if not self.sigma_scale > 0:
            raise ParameterError("sigma_scale must be positive")
        if self.accept_mode not in ACCEPT_MODES:
            raise ParameterError(f"accept_mode must be one of {ACCEPT_MODES}")

    def to_dict(self) -> dict:
        return {
            "draft_horizon": int(self.draft_horizon),
            "accept_threshold": float(self.accept_threshold),
            "sigma_scale": float(self.sigma_scale),
            "accept_mode": self.accept_mode,
        }


ParamSource = Union[SpecParams, Callable[[int], SpecParams]]


def resolve_params(source: ParamSource, t: int) -> SpecParams:
    return source if isinstance(source, SpecParams) else source(int(t))


@dataclass(frozen=True)
class LatentState:
    x: np.ndarray
    t: int


@dataclass
class DraftBatch:
    """Candidates of one round with everything needed to verify them.

    Row ``i`` of ``xs``/``means``/``noises`` belongs to candidate ``i`` at
    timestep ``ts[i]``; row 0 is target-produced, the rest drafter-produced.
    """

    xs: np.ndarray
    ts: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray
    noises: np.ndarray
    cond: object = None
    target_eps0: np.ndarray = None
    seeded: bool = False

    @property
    def num_drafts(self) -> int:
        return len(self.ts) - 1

    @property
    def candidates(self):
        return [LatentState(x, int(t)) for x, t in zip(self.xs, self.ts)]


@dataclass
class AcceptanceRecord:
    log_alpha: np.ndarray
    p: np.ndarray
    accepted: np.ndarray
    uniforms: np.ndarray | None
    first_reject: int | None
    target_means: np.ndarray
    t_start: int = 0

    @property
    def num_accepted_drafts(self) -> int:
        return int(self.accepted[1:].sum())

    @property
    def num_tested_drafts(self) -> int:
        return self.num_accepted_drafts + (self.first_reject is not None)


@dataclass
class NfeTally:
    target_passes: int = 0
    draft_calls: int = 0
    cost_weight: float = 0.125
    baseline_nfe: float = 0.0

    @property
    def nfe(self) -> float:
        return self.target_passes + self.cost_weight * self.draft_calls

    @property
    def speedup_by_nfe(self) -> float:
        return self.baseline_nfe / self.nfe if self.nfe else float("inf")

    def add(self, other: "NfeTally") -> "NfeTally":
        self.target_passes += other.target_passes
        self.draft_calls += other.draft_calls
        self.baseline_nfe += other.baseline_nfe
        return self

    def to_dict(self) -> dict:
        return {
            "target_passes": int(self.target_passes),
            "draft_calls": int(self.draft_calls),
            "cost_weight": float(self.cost_weight),
            "baseline_nfe": float(self.baseline_nfe),
            "nfe": float(self.nfe),
            "speedup_by_nfe": float(self.speedup_by_nfe),
        }


# ------------------------------------------------------------------ primitives


def log_accept_ratio(mu_hat, mu, sigma, xi):
    """Log Gaussian likelihood ratio ``log N(x; mu) - log N(x; mu_hat)`` at ``x = mu_hat + sigma xi``.

    Works on the last axis; leading axes are batch dimensions and ``sigma`` may
    be a scalar or broadcastable per-row array.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(~(sigma > 0)):
        raise ParameterError("sigma must be strictly positive in the acceptance test")
    s = sigma[..., None] if sigma.ndim else sigma
    d = (np.asarray(mu_hat) - np.asarray(mu)) / s
    return -0.5 * np.sum(d * d, axis=-1) - np.sum(d * xi, axis=-1)


def accept_prob(log_alpha):
    return np.minimum(1.0, np.exp(np.minimum(log_alpha, 0.0)))


def reflect_couple(x_tilde, m_r, m_s, sigma=1.0):
    """Map a rejected draw ``x_tilde ~ N(m_r, sigma^2 I)`` to a sample of ``N(m_s, sigma^2 I)``.

    Reflects the offset from ``m_r`` across the hyperplane orthogonal to
    ``m_r - m_s`` and re-centres it at ``m_s``. Operates on the last axis.
    """
    x_tilde, m_r, m_s = (np.asarray(a, dtype=np.float64) for a in (x_tilde, m_r, m_s))
    if not (np.all(np.isfinite(x_tilde)) and np.all(np.isfinite(m_r)) and np.all(np.isfinite(m_s))):
        raise ParameterError("reflect_couple received non-finite input")
    if np.any(~(np.asarray(sigma) > 0)):
        raise ParameterError("sigma must be positive")
    delta = m_r - m_s
    norm = np.linalg.norm(delta, axis=-1, keepdims=True)
    y = x_tilde - m_r
    safe = np.where(norm < 1e-12, 1.0, norm)
    e = np.where(norm < 1e-12, 0.0, delta / safe)
    out = m_s + y - 2.0 * e * np.sum(e * y, axis=-1, keepdims=True)
    return np.where(norm < 1e-12, x_tilde, out)


# ------------------------------------------------------------------ one round


def draft_rollout(target, drafter, state: LatentState, cond, K: int, sched: NoiseSchedule,
                  rng: np.random.Generator, target_eps=None) -> DraftBatch:
    """Target one-step candidate followed by up to ``K`` drafter steps.

    ``target_eps`` is the target's prediction at ``state`` when a previous
    verification pass already produced it; otherwise the target is evaluated
    here and the batch is flagged ``seeded``.
    """
    if K < 0:
        raise ParameterError("draft horizon must be nonnegative")
    if state.t < 1:
        raise ParameterError("rollout needs state.t >= 1")
    k_eff = min(int(K), state.t - 1)
    x = np.asarray(state.x, dtype=np.float64)
    d = x.shape[-1]
    seeded = target_eps is None
    eps0 = target.evaluate(x, state.t, cond) if seeded else target_eps
    xs = np.empty((k_eff + 1, d))
    means = np.empty_like(xs)
    noises = np.empty_like(xs)
    sigmas = np.empty(k_eff + 1)
    ts = state.t - 1 - np.arange(k_eff + 1)
    mu, sig = posterior_step(eps0, state.t, x, sched)
    xi = rng.standard_normal(d)
    xs[0], means[0], sigmas[0], noises[0] = sample_step(mu, sig, xi), mu, sig, xi
    for k in range(1, k_eff + 1):
        s = state.t - k
        e = drafter.evaluate(xs[k - 1], s, cond)
        mu, sig = posterior_step(e, s, xs[k - 1], sched)
        xi = rng.standard_normal(d)
        xs[k], means[k], sigmas[k], noises[k] = sample_step(mu, sig, xi), mu, sig, xi
    return DraftBatch(xs, ts, means, sigmas, noises, cond, eps0, seeded)


def verify(target, batch: DraftBatch, params: SpecParams, sched: NoiseSchedule,
           rng: np.random.Generator):
    """Score all candidates with one batched target pass.

    Returns ``(record, target_outputs)`` where ``target_outputs[i]`` is the
    target's eps prediction at candidate ``i`` (omitted for a candidate at t=0).
    In stochastic mode one uniform per draft is drawn from ``rng``.
    """
    K = batch.num_drafts
    rows = batch.ts >= 1
    outputs = target.evaluate(batch.xs[rows], batch.ts[rows], batch.cond)
    log_alpha = np.zeros(K + 1)
    tmeans = np.empty_like(batch.means)
    tmeans[0] = batch.means[0]
    if K:
        mu, sig = posterior_step(outputs[:K], batch.ts[:K], batch.xs[:K], sched)
        tmeans[1:] = mu
        log_alpha[1:] = log_accept_ratio(batch.means[1:], mu, sig * params.sigma_scale,
                                         batch.noises[1:])
    p = accept_prob(log_alpha)
    uniforms = None
    if params.accept_mode == "stochastic":
        uniforms = rng.random(K)
        ok = uniforms <= p[1:]
    else:
        ok = p[1:] >= params.accept_threshold
    accepted = np.zeros(K + 1, dtype=bool)
    accepted[0] = True
    first_reject = None
    for i in range(1, K + 1):
        if not ok[i - 1]:
            first_reject = i
            break
        accepted[i] = True
    rec = AcceptanceRecord(log_alpha, p, accepted, uniforms, first_reject, tmeans,
                           t_start=int(batch.ts[0]) + 1)
    return rec, list(outputs)


# ------------------------------------------------------------------ full loops


def speculative_denoise(target, drafter, param_source: ParamSource, x_T, cond,
                        sched: NoiseSchedule, streams: RngStreams, events=None, trajectory=None):
    """Run speculative rounds from ``x_T`` down to ``t = 0``.

    Returns ``(x0, records, tally)``. When given, ``events`` receives one dict
    per round (the JSON-lines event log) and ``trajectory`` every committed
    ``(t, x)`` pair.
    """
    x = np.asarray(x_T, dtype=np.float64).copy()
    t = sched.num_steps
    tally = NfeTally(cost_weight=drafter.cost_weight, baseline_nfe=float(sched.num_steps))
    records = []
    cached = None
    rnd = 0
    while t > 0:
        params = resolve_params(param_source, t)
        k_eff = min(int(params.draft_horizon), t - 1)
        batch = draft_rollout(target, drafter, LatentState(x, t), cond, k_eff, sched,
                              streams.latent, target_eps=cached)
        d_tp = int(batch.seeded)
        coupled = False
        if k_eff == 0:
            rec = AcceptanceRecord(np.zeros(1), np.ones(1), np.ones(1, dtype=bool), None, None,
                                   batch.means[:1].copy(), t_start=t)
            x, t_new, cached = batch.xs[0], int(batch.ts[0]), None
        else:
            rec, outputs = verify(target, batch, params, sched, streams.accept)
            d_tp += 1
            if rec.first_reject is None:
                x, t_new = batch.xs[-1], int(batch.ts[-1])
                cached = outputs[-1] if t_new >= 1 else None
            else:
                j = rec.first_reject
                x = reflect_couple(batch.xs[j], batch.means[j], rec.target_means[j], batch.sigmas[j])
                t_new, cached, coupled = int(batch.ts[j]), None, True
        if trajectory is not None:
            n_commit = int(rec.accepted.sum()) + coupled
            for i in range(n_commit - 1):
                trajectory.append((int(batch.ts[i]), batch.xs[i].copy()))
            trajectory.append((t_new, np.array(x, copy=True)))
        tally.target_passes += d_tp
        tally.draft_calls += k_eff
        records.append(rec)
        if events is not None:
            events.append({
                "round": rnd,
                "t_start": int(t),
                "t_end": int(t_new),
                "k": int(params.draft_horizon),
                "k_eff": int(k_eff),
                "p": [float(v) for v in rec.p[1:]],
                "accepted": rec.num_accepted_drafts,
                "coupled": coupled,
                "seed_pass": bool(batch.seeded),
                "d_target_passes": d_tp,
                "d_draft_calls": int(k_eff),
                "accept_mode": params.accept_mode,
                "accept_threshold": float(params.accept_threshold),
                "sigma_scale": float(params.sigma_scale),
            })
        t = t_new
        rnd += 1
    return x, records, tally


def ddpm_sample(target, x_T, cond, sched: NoiseSchedule, streams: RngStreams, trajectory=None):
    """Plain ancestral sampling; returns ``(x0, tally)`` with ``T`` target passes."""
    x = np.asarray(x_T, dtype=np.float64).copy()
    for t in range(sched.num_steps, 0, -1):
        mu, sig = posterior_step(target.evaluate(x, t, cond), t, x, sched)
        x = sample_step(mu, sig, streams.latent.standard_normal(x.shape[-1]))
        if trajectory is not None:
            trajectory.append((t - 1, x.copy()))
    tally = NfeTally(target_passes=sched.num_steps, cost_weight=0.0,
                     baseline_nfe=float(sched.num_steps))
    return x, tally


# ------------------------------------------------------------------ vectorized


@dataclass
class BatchResult:
    """Per-chain outcome of :func:`speculative_denoise_batch`."""

    x0: np.ndarray
    target_passes: np.ndarray
    draft_calls: np.ndarray
    drafts_proposed: np.ndarray
    drafts_tested: np.ndarray
    drafts_accepted: np.ndarray
    rounds: np.ndarray
    cost_weight: float
    num_steps: int
    extra: dict = field(default_factory=dict)

    @property
    def nfe(self) -> np.ndarray:
        return self.target_passes + self.cost_weight * self.draft_calls

    @property
    def nfe_percent(self) -> float:
        return float(self.nfe.mean() / self.num_steps * 100.0)

    @property
    def per_test_acceptance(self) -> float:
        return float(self.drafts_accepted.sum() / max(self.drafts_tested.sum(), 1))

    @property
    def acceptance_rate(self) -> float:
        return float(self.drafts_accepted.sum() / max(self.drafts_proposed.sum(), 1))


def _rows(cond, idx):
    if cond is None:
        return None
    c = np.asarray(cond)
    return c if c.ndim == 1 else c[idx]


def speculative_denoise_batch(target, drafter, param_source: ParamSource, x_T, cond,
                              sched: NoiseSchedule, streams: RngStreams) -> BatchResult:
    """Same algorithm as :func:`speculative_denoise` for ``N`` independent chains in lockstep.

    All chains share the latent and accept streams. With ``N = 1`` the random
    draws, and therefore the result, coincide with the single-chain loop.
    """
    x = np.array(x_T, dtype=np.float64, ndmin=2)
    n_all, d = x.shape
    T = sched.num_steps
    t = np.full(n_all, T, dtype=np.int64)
    cache = np.zeros_like(x)
    has_cache = np.zeros(n_all, dtype=bool)
    tp = np.zeros(n_all, dtype=np.int64)
    dc = np.zeros(n_all, dtype=np.int64)
    n_acc = np.zeros(n_all, dtype=np.int64)
    n_test = np.zeros(n_all, dtype=np.int64)
    rounds = np.zeros(n_all, dtype=np.int64)
    memo = {}

    def params_for(tt):
        if tt not in memo:
            memo[tt] = resolve_params(param_source, tt)
        return memo[tt]

    while True:
        act = np.flatnonzero(t > 0)
        if act.size == 0:
            break
        ta, xa, ca = t[act], x[act], _rows(cond, act)
        n = act.size
        plist = [params_for(int(v)) for v in ta]
        keff = np.minimum(np.array([p.draft_horizon for p in plist]), ta - 1)
        scale = np.array([p.sigma_scale for p in plist])
        thr = np.array([p.accept_threshold for p in plist])
        stoch = np.array([p.accept_mode == "stochastic" for p in plist])

        eps0 = cache[act].copy()
        need = ~has_cache[act]
        if need.any():
            eps0[need] = target.evaluate(xa[need], ta[need], _rows(ca, need))
            tp[act[need]] += 1
        kmax = int(keff.max())
        XS = np.zeros((n, kmax + 1, d))
        MH = np.zeros_like(XS)
        NZ = np.zeros_like(XS)
        mu, sg = posterior_step(eps0, ta, xa, sched)
        xi = streams.latent.standard_normal((n, d))
        XS[:, 0] = sample_step(mu, sg, xi)
        for k in range(1, kmax + 1):
            live = np.flatnonzero(keff >= k)
            s = ta[live] - k
            e = drafter.evaluate(XS[live, k - 1], s, _rows(ca, live))
            mu, sg = posterior_step(e, s, XS[live, k - 1], sched)
            xi = streams.latent.standard_normal((live.size, d))
            XS[live, k] = sample_step(mu, sg, xi)
            MH[live, k] = mu
            NZ[live, k] = xi
        dc[act] += keff
        rounds[act] += 1

        new_t = ta - 1 - keff
        new_x = XS[np.arange(n), keff].copy()
        new_cache = np.zeros((n, d))
        new_has = np.zeros(n, dtype=bool)
        v = np.flatnonzero(keff > 0)
        if v.size:
            kv = keff[v]
            tsv = ta[v, None] - 1 - np.arange(kmax + 1)[None]
            ev = (np.arange(kmax + 1)[None] <= kv[:, None]) & (tsv >= 1)
            ii, jj = np.nonzero(ev)
            XV = XS[v]
            OUT = np.zeros((v.size, kmax + 1, d))
            OUT[ii, jj] = target.evaluate(XV[ii, jj], tsv[ii, jj], _rows(_rows(ca, v), ii))
            tp[act[v]] += 1
            vi = np.arange(1, kmax + 1)[None] <= kv[:, None]
            i2, j2 = np.nonzero(vi)
            MU = np.zeros((v.size, kmax + 1, d))
            mu_t, sg_t = posterior_step(OUT[i2, j2], tsv[i2, j2], XV[i2, j2], sched)
            MU[i2, j2 + 1] = mu_t
            la = log_accept_ratio(MH[v][i2, j2 + 1], mu_t, sg_t * scale[v][i2], NZ[v][i2, j2 + 1])
            P = np.zeros((v.size, kmax))
            P[i2, j2] = accept_prob(la)
            ok = P >= thr[v][:, None]
            sv = np.flatnonzero(stoch[v])
            if sv.size:
                U = streams.accept.random((sv.size, kmax))
                ok[sv] = U <= P[sv]
            ok &= vi
            acc = np.cumprod(ok, axis=1).sum(axis=1)
            rej = acc < kv
            n_acc[act[v]] += acc
            n_test[act[v]] += acc + rej
            full = np.flatnonzero(~rej)
            fv = v[full]
            new_has[fv] = new_t[fv] >= 1
            new_cache[fv] = OUT[full, kv[full]]
            rv = np.flatnonzero(rej)
            if rv.size:
                j = acc[rv] + 1
                vr = v[rv]
                new_x[vr] = reflect_couple(XV[rv, j], MH[v][rv, j], MU[rv, j])
                new_t[vr] = ta[vr] - 1 - j
        x[act] = new_x
        t[act] = new_t
        cache[act] = new_cache
        has_cache[act] = new_has

    return BatchResult(x, tp, dc, dc.copy(), n_test, n_acc, rounds, drafter.cost_weight, T)


def ddpm_sample_batch(target, x_T, cond, sched: NoiseSchedule, rng: np.random.Generator):
    x = np.array(x_T, dtype=np.float64, ndmin=2)
    for t in range(sched.num_steps, 0, -1):
        mu, sig = posterior_step(target.evaluate(x, np.full(x.shape[0], t), cond), t, x, sched)
        x = sample_step(mu, sig, rng.standard_normal(x.shape))
    return x


def acceptance_profile(target, drafter, sched: NoiseSchedule, n_chains: int, rng,
                       sigma_scale: float = 1.0, cond=None, dim=None):
    """Mean acceptance probability ``p`` of one drafter step at every timestep.

    Latents are drawn along target ancestral chains; at each ``x_t`` the
    drafter's and the target's step means are compared under a fresh noise
    draw, exactly as verification would. Returns an array indexed by ``t - 1``.
    """
    if dim is None:
        dim = target.dim
    x = rng.standard_normal((n_chains, dim))
    out = np.zeros(sched.num_steps)
    for t in range(sched.num_steps, 0, -1):
        tt = np.full(n_chains, t)
        mu, sig = posterior_step(target.evaluate(x, tt, cond), t, x, sched)
        mu_hat, _ = posterior_step(drafter.evaluate(x, tt, cond), t, x, sched)
        xi = rng.standard_normal(x.shape)
        out[t - 1] = accept_prob(log_accept_ratio(mu_hat, mu, sig * sigma_scale, xi)).mean()
        x = sample_step(mu, sig, rng.standard_normal(x.shape))
    return out
