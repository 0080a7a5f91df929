"""Pipeline stages shared by the command line and the test-suite.

Each stage reads its inputs from, and writes its artifacts to, one output
directory and leaves a ``<stage>.manifest.json`` with the config hash and the
sha256 of every input and output file. Manifests carry no timestamps, so the
same config and seeds give byte-identical manifests.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .config import RunConfig, config_from_dict
from .denoiser import (AnalyticGaussianMixtureDenoiser, DistillConfig, MeanBiasedDenoiser,
                       MlpDenoiser, TrainConfig, ddpm_train_target, distill_drafter,
                       load_denoiser)
from .env import PushEnvConfig, generate_dataset, load_dataset
from .errors import DependencyMissingError
from .metrics import aggregate, export, ks_two_sample, write_events
from .policy import DiffusionPolicy, FixedController, evaluate
from .rng import RngStreams
from .schedule import NoiseSchedule, build_schedule
from .scheduler import (PPOConfig, RewardConfig, SchedulerController, SchedulerTrainConfig,
                        load_scheduler, make_scheduler_net, save_scheduler, train_scheduler)
from .speculative import (SpecParams, ddpm_sample_batch, reflect_couple,
                          speculative_denoise_batch)

ARTIFACTS = {"data": "data.bin", "target": "target.ckpt", "drafter": "drafter.ckpt",
             "scheduler": "scheduler.ckpt"}
COUPLE_CASES = ((1.0, 0.0, 1.0), (0.3, 0.0, 0.5), (2.0, -1.0, 1.0))


# ------------------------------------------------------------------ plumbing


def schedule_from_config(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return build_schedule(s.num_steps, s.beta_start, s.beta_end, s.kind, s.variance_mode)


def env_from_config(cfg: RunConfig) -> PushEnvConfig:
    e = cfg.env
    return PushEnvConfig(e.agent_radius, e.object_radius, e.goal_radius, e.v_max, e.max_steps,
                         tuple(e.goal), e.randomize_goal, e.horizon, e.n_exec, e.min_start_dist)


def reward_from_config(cfg: RunConfig) -> RewardConfig:
    s = cfg.scheduler
    return RewardConfig(s.r_final, s.outcome_kind, cfg.env.max_steps, s.delta_t)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def require(out: Path, *names) -> list:
    """Paths of the named artifacts, or :class:`DependencyMissingError` naming the stage to run."""
    producers = {"data": "gen-data", "target": "train-target", "drafter": "distill",
                 "scheduler": "train-scheduler"}
    paths = []
    for n in names:
        p = Path(out) / ARTIFACTS[n]
        if not p.exists():
            raise DependencyMissingError(
                f"missing {p}; run `specdiff {producers[n]} --out {out}` first")
        paths.append(p)
    return paths


def write_manifest(out, stage: str, cfg: RunConfig, inputs=(), outputs=(), extra=None) -> Path:
    out = Path(out)

    def digest(paths):
        return {Path(p).name: sha256_file(p) for p in sorted(paths, key=lambda p: Path(p).name)}

    doc = {"stage": stage, "config_hash": cfg.hash(), "config": cfg.to_dict(),
           "inputs": digest(inputs), "outputs": digest(outputs)}
    if extra:
        doc["result"] = extra
    doc["config"].pop("out")
    path = out / f"{stage}.manifest.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def _log(log, msg):
    if log:
        log(msg)


# ------------------------------------------------------------------ training stages


def gen_data(cfg: RunConfig, out, log=None) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_dataset(cfg.data.episodes, cfg.seed, env_from_config(cfg), cfg.data.noise)
    path = data.save(out / ARTIFACTS["data"])
    _log(log, f"{len(data.x0)} chunk samples from {cfg.data.episodes} episodes -> {path}")
    write_manifest(out, "gen-data", cfg, outputs=[path])
    return path


def train_target(cfg: RunConfig, out, log=None) -> Path:
    out = Path(out)
    (data_path,) = require(out, "data")
    data = load_dataset(data_path)
    sched = schedule_from_config(cfg)
    t = cfg.target
    net = MlpDenoiser(data.x0.shape[1], data.cond.shape[1], sched.num_steps, tuple(t.hidden),
                      seed=cfg.seed)
    tc = TrainConfig(iterations=t.iterations, batch_size=t.batch_size, lr=t.lr,
                     momentum=t.momentum, lr_final_frac=t.lr_final_frac, seed=cfg.seed)
    net, hist = ddpm_train_target((data.x0, data.cond), sched, net, tc)
    path = net.save(out / ARTIFACTS["target"], sched)
    _write_history(out / "target_loss.csv", hist)
    if hist:
        _log(log, f"target loss {hist[-1]['smoothed']:.4f} -> {path}")
    write_manifest(out, "train-target", cfg, [data_path], [path, out / "target_loss.csv"])
    return path


def distill(cfg: RunConfig, out, log=None) -> Path:
    out = Path(out)
    data_path, target_path = require(out, "data", "target")
    data = load_dataset(data_path)
    sched = schedule_from_config(cfg)
    target = load_denoiser(target_path, sched)
    d = cfg.distill
    dc = DistillConfig(lambda1=d.lambda1, lambda2=d.lambda2, lr=d.lr, momentum=d.momentum,
                       batch_size=d.batch_size, iterations=d.iterations, seed=cfg.seed + 1,
                       hidden=tuple(d.hidden), lr_final_frac=d.lr_final_frac)
    drafter = MlpDenoiser(data.x0.shape[1], data.cond.shape[1], sched.num_steps, tuple(d.hidden),
                          cost_weight=d.cost_weight, seed=cfg.seed + 1)
    drafter, hist = distill_drafter(target, (data.x0, data.cond), sched, dc, drafter)
    path = drafter.save(out / ARTIFACTS["drafter"], sched)
    _write_history(out / "distill_loss.csv", hist)
    if hist:
        _log(log, f"distill loss {hist[-1]['loss']:.4f} -> {path}")
    write_manifest(out, "distill", cfg, [data_path, target_path],
                   [path, out / "distill_loss.csv"])
    return path


def _write_history(path, hist):
    if not hist:
        Path(path).write_text("")
        return
    cols = list(hist[0])
    lines = [",".join(cols)] + [",".join(repr(float(h[c])) if c != "iteration" else str(h[c])
                                         for c in cols) for h in hist]
    Path(path).write_text("\n".join(lines) + "\n")


def load_policy(cfg: RunConfig, out) -> DiffusionPolicy:
    data_path, target_path, drafter_path = require(out, "data", "target", "drafter")
    sched = schedule_from_config(cfg)
    return DiffusionPolicy(load_denoiser(target_path, sched), load_denoiser(drafter_path, sched),
                           sched, load_dataset(data_path))


def scheduler_train_config(cfg: RunConfig) -> SchedulerTrainConfig:
    s = cfg.scheduler
    ppo = PPOConfig(s.clip_eps, s.gae_lambda, s.gamma, s.epochs, s.minibatch, s.lr,
                    entropy_coef=s.entropy_coef, reward_divisor=s.r_final, seed=cfg.seed)
    return SchedulerTrainConfig(s.iterations, s.episodes_per_iter, s.window, cfg.seed,
                                tuple(s.boundaries), cfg.spec.accept_mode, ppo,
                                reward_from_config(cfg))


def train_scheduler_stage(cfg: RunConfig, out, log=None) -> Path:
    out = Path(out)
    inputs = require(out, "data", "target", "drafter")
    policy = load_policy(cfg, out)
    sc = cfg.scheduler
    net = make_scheduler_net(policy, sc.window, cfg.seed)
    if sc.warm_start:
        net.warm_start(sc.warm_start, sc.warm_confidence)
    net, curve = train_scheduler(policy, scheduler_train_config(cfg), net=net,
                                 curve_path=out / "scheduler_curve.csv", log=log)
    path = save_scheduler(net, out / ARTIFACTS["scheduler"])
    write_manifest(out, "train-scheduler", cfg, inputs, [path, out / "scheduler_curve.csv"])
    return path


# ------------------------------------------------------------------ evaluation


def spec_params(cfg: RunConfig) -> SpecParams:
    s = cfg.spec
    return SpecParams(s.draft_horizon, s.accept_threshold, s.sigma_scale, s.accept_mode)


class _ControllerFactory:
    """Picklable per-episode controller factory."""

    def __init__(self, kind, params=None, net=None, num_steps=None, reward=None,
                 boundaries=None, accept_mode="threshold", features=None):
        self.kind, self.params, self.net = kind, params, net
        self.num_steps, self.reward, self.boundaries = num_steps, reward, boundaries
        self.accept_mode, self.features = accept_mode, features

    def __call__(self, episode):
        if self.kind == "baseline":
            return FixedController(None)
        if self.kind == "fixed":
            return FixedController(self.params)
        return SchedulerController(self.net, self.num_steps, self.reward, None,
                                   deterministic=True, boundaries=self.boundaries,
                                   accept_mode=self.accept_mode, features=self.features)


def controller_factory(kind: str, cfg: RunConfig, policy: DiffusionPolicy, net=None,
                       params=None):
    if kind not in ("baseline", "fixed", "scheduler"):
        raise ValueError(f"unknown policy kind {kind!r}")
    if kind == "scheduler" and net is None:
        raise DependencyMissingError("scheduler evaluation needs a trained scheduler")
    return _ControllerFactory(kind, params or spec_params(cfg), net, policy.schedule.num_steps,
                              reward_from_config(cfg), tuple(cfg.scheduler.boundaries),
                              cfg.spec.accept_mode, policy.cond)


def _eval_chunk(args):
    cfg_dict, out, kind, params, seeds, master, keep = args
    cfg = config_from_dict(cfg_dict)
    policy = load_policy(cfg, out)
    net = load_scheduler(require(out, "scheduler")[0]) if kind == "scheduler" else None
    return evaluate(policy, controller_factory(kind, cfg, policy, net, params), seeds, master, keep)


def run_evaluation(cfg: RunConfig, out, kind="fixed", params=None, episodes=None, workers=None,
                   keep_events=False, policy=None, net=None):
    """Evaluate one controller over ``episodes`` fixed-seed episodes; returns the episodes."""
    episodes = cfg.eval.episodes if episodes is None else episodes
    workers = cfg.workers if workers is None else workers
    seeds = list(range(episodes))
    if workers <= 1 or episodes < 2 * workers:
        policy = policy or load_policy(cfg, out)
        if kind == "scheduler" and net is None:
            net = load_scheduler(require(out, "scheduler")[0])
        return evaluate(policy, controller_factory(kind, cfg, policy, net, params), seeds,
                        cfg.eval.seed, keep_events)
    chunks = [seeds[i::workers] for i in range(workers)]
    jobs = [(cfg.to_dict(), str(out), kind, params, c, cfg.eval.seed, keep_events) for c in chunks]
    with ProcessPoolExecutor(workers) as pool:
        parts = list(pool.map(_eval_chunk, jobs))
    merged = [ep for part in parts for ep in part]
    return sorted(merged, key=lambda ep: ep.report.episode_id)


def eval_stage(cfg: RunConfig, out, kind="fixed", params=None, log=None, keep_events=False):
    """Evaluate and export reports, plots and a summary under ``out/eval_<kind>``."""
    out = Path(out)
    eps = run_evaluation(cfg, out, kind, params, keep_events=keep_events)
    reports = [e.report for e in eps]
    summary = aggregate(reports)
    dest = out / f"eval_{kind}"
    dest.mkdir(parents=True, exist_ok=True)
    written = export(reports, dest / "reports.json", "json")
    written += export(reports, dest / "reports.csv", "csv")
    written += export(reports, dest / "plots", "svg-plots")
    (dest / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    written.append(dest / "summary.json")
    if keep_events:
        written.append(write_events([ev for e in eps for ev in e.events], dest / "events.jsonl"))
    names = ["data", "target", "drafter"] + (["scheduler"] if kind == "scheduler" else [])
    write_manifest(out, f"eval-{kind}", cfg, require(out, *names), written, summary)
    _log(log, f"{kind}: success {summary['success_rate']:.3f}  NFE {summary['nfe_percent']:.2f}%  "
              f"target-pass reduction {summary['target_pass_reduction']:.2f}x  "
              f"acceptance {summary['acceptance_rate']:.3f}")
    return summary


# ------------------------------------------------------------------ synthetic benchmarks


def synthetic_pair(num_steps=100, bias=0.0, dim=1, kind="linear"):
    """Standard-normal analytic target and a mean-biased copy of it as drafter."""
    sched = build_schedule(num_steps, 1e-4, 0.02, kind)
    target = AnalyticGaussianMixtureDenoiser.standard_normal(dim, sched)
    return sched, target, MeanBiasedDenoiser(target, bias, sched)


def bench(k=9, mode="stochastic", threshold=0.3, episodes=50, bias=0.0, num_steps=100, dim=1,
          seed=0, sigma_scale=1.0) -> dict:
    """NFE accounting of the speculative sampler on the analytic target.

    With ``bias = 0`` the drafter equals the target and every draft is accepted.
    """
    sched, target, drafter = synthetic_pair(num_steps, bias, dim)
    params = SpecParams(k, threshold, sigma_scale, mode)
    streams = RngStreams.from_seed(seed, 0)
    x_T = streams.latent.standard_normal((episodes, dim))
    t0 = time.perf_counter()
    res = speculative_denoise_batch(target, drafter, params, x_T, None, sched, streams)
    t_spec = time.perf_counter() - t0
    base_streams = RngStreams.from_seed(seed, 1)
    t0 = time.perf_counter()
    ddpm_sample_batch(target, base_streams.latent.standard_normal((episodes, dim)), None, sched,
                      base_streams.latent)
    t_base = time.perf_counter() - t0
    nfe_pct = res.nfe_percent
    return {"episodes": episodes, "draft_horizon": k, "accept_mode": mode, "bias": bias,
            "num_steps": num_steps, "mean_nfe": float(res.nfe.mean()), "nfe_percent": nfe_pct,
            "speedup": 100.0 / nfe_pct,
            "target_pass_reduction": num_steps / float(res.target_passes.mean()),
            "mean_target_passes": float(res.target_passes.mean()),
            "mean_draft_calls": float(res.draft_calls.mean()),
            "acceptance_rate": res.acceptance_rate,
            "per_test_acceptance": res.per_test_acceptance,
            "wall_clock_ratio": t_base / t_spec if t_spec > 0 else float("inf")}


def bias_for_acceptance(a: float) -> float:
    """Mean bias (in step-sigma units) whose one-step acceptance probability is ``a``.

    For equal-variance Gaussians the expected acceptance is ``2 Phi(-d/2)``.
    """
    if not 0 < a <= 1:
        raise ValueError("acceptance must lie in (0, 1]")
    return 0.0 if a == 1 else float(-2.0 * norm.ppf(a / 2.0))


def nfe_sweep(acceptances=(1.0, 0.99, 0.97, 0.95, 0.92, 0.9, 0.88, 0.85), num_steps=100, k=9,
              chains=2000, seed=0) -> list:
    """NFE% of the stochastic sampler as the drafter's per-step acceptance varies."""
    rows = []
    for a in acceptances:
        r = bench(k, "stochastic", 0.3, chains, bias_for_acceptance(a), num_steps, 1, seed)
        rows.append({"nominal_acceptance": a, **r})
    return rows


def couple_test(draws=1_000_000, seed=0, alpha=1e-3, cases=COUPLE_CASES) -> list:
    """Marginal check of accept-or-reflect against the target Gaussian, one KS test per case."""
    rows = []
    for i, (m_r, m_s, sigma) in enumerate(cases):
        rng = np.random.default_rng([seed, i])
        x = m_r + sigma * rng.standard_normal(draws)
        log_ratio = ((x - m_r) ** 2 - (x - m_s) ** 2) / (2.0 * sigma ** 2)
        keep = np.log(rng.uniform(size=draws)) < np.minimum(log_ratio, 0.0)
        y = np.where(keep, x, reflect_couple(x[:, None], np.array([m_r]), np.array([m_s]),
                                             sigma)[:, 0])
        ref = m_s + sigma * rng.standard_normal(draws)
        stat, crit = ks_two_sample(y, ref, alpha)
        rows.append({"m_r": m_r, "m_s": m_s, "sigma": sigma, "statistic": stat,
                     "critical": crit, "accept_fraction": float(keep.mean()),
                     "passed": bool(stat <= crit)})
    return rows


def sample_test(chains=200_000, num_steps=50, k=5, bias=0.2, mode="stochastic", seed=0,
                alpha=1e-3, threshold=0.3) -> dict:
    """KS comparison of speculative and ancestral samples on the 1D analytic target."""
    sched = build_schedule(num_steps, 1e-4, 0.02)
    target = AnalyticGaussianMixtureDenoiser.standard_normal(1, sched)
    drafter = MeanBiasedDenoiser(target, bias, sched)
    s1 = RngStreams.from_seed(seed, 0)
    res = speculative_denoise_batch(target, drafter, SpecParams(k, threshold, 1.0, mode),
                                    s1.latent.standard_normal((chains, 1)), None, sched, s1)
    s2 = RngStreams.from_seed(seed, 1)
    base = ddpm_sample_batch(target, s2.latent.standard_normal((chains, 1)), None, sched,
                             s2.latent)
    stat, crit = ks_two_sample(res.x0[:, 0], base[:, 0], alpha)
    return {"chains": chains, "num_steps": num_steps, "draft_horizon": k, "bias": bias,
            "accept_mode": mode, "statistic": stat, "critical": crit, "passed": bool(stat <= crit),
            "per_test_acceptance": res.per_test_acceptance,
            "expected_acceptance": float(2.0 * norm.cdf(-abs(bias) / 2.0)),
            "nfe_percent": res.nfe_percent}

