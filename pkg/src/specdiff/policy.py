"""Closed-loop glue: a diffusion policy bundle driving the push environment.

Each control cycle denoises one action chunk (speculatively, or with plain
ancestral sampling for the baseline), executes its first ``n_exec`` rows and
re-plans. A *controller* decides the speculative parameters per cycle; the
scheduler module supplies a learned one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import Demonstrations, PushEnvConfig, env_step, is_success, progress, reset
from .metrics import RunReport
from .rng import RngStreams
from .schedule import NoiseSchedule
from .speculative import NfeTally, ParamSource, ddpm_sample, speculative_denoise


@dataclass
class DiffusionPolicy:
    target: object
    drafter: object
    schedule: NoiseSchedule
    data: Demonstrations

    @property
    def env_cfg(self) -> PushEnvConfig:
        return self.data.env

    def cond(self, state) -> np.ndarray:
        return self.data.normalize_obs(state.features())

    def plan(self, state, params: ParamSource | None, streams: RngStreams, events=None,
             trajectory=None):
        """Denoise one chunk; ``params=None`` selects plain ancestral sampling.

        Returns ``(chunk, latent x0, records, tally)``.
        """
        cond = self.cond(state)
        x_T = streams.latent.standard_normal(self.env_cfg.action_dim)
        if params is None:
            x0, tally = ddpm_sample(self.target, x_T, cond, self.schedule, streams, trajectory)
            records = []
        else:
            x0, records, tally = speculative_denoise(self.target, self.drafter, params, x_T, cond,
                                                     self.schedule, streams, events, trajectory)
        return self.data.decode_chunk(x0), x0, records, tally


class FixedController:
    """Same parameters every cycle; ``None`` means baseline sampling."""

    def __init__(self, params: ParamSource | None):
        self.params = params

    def params_for_cycle(self, ctx):
        return self.params

    def cycle_done(self, ctx, stats):
        pass


@dataclass
class EpisodeContext:
    episode_id: int
    state: object
    cycle: int = 0
    recent_chunks: list = field(default_factory=list)
    progress: float = 0.0


@dataclass
class Episode:
    report: RunReport
    positions: list
    latents: list
    events: list


def run_episode(policy: DiffusionPolicy, controller, streams: RngStreams, episode_id=0,
                keep_events=False, window=2) -> Episode:
    cfg = policy.env_cfg
    state = reset(streams.env, cfg)
    ctx = EpisodeContext(episode_id, state, progress=progress(state, cfg))
    zero = np.zeros(cfg.action_dim)
    ctx.recent_chunks = [zero] * window
    total = NfeTally(cost_weight=policy.drafter.cost_weight)
    report = RunReport(episode_id, False, 0.0, total, policy.schedule.num_steps)
    positions = [state.agent_pos.copy()]
    latents = []
    events = [] if keep_events else None
    done = is_success(state, cfg) or state.step_count >= cfg.max_steps
    while not done:
        params = controller.params_for_cycle(ctx)
        chunk, x0, records, tally = policy.plan(state, params, streams, events)
        latents.append(x0)
        state, pos, done, _, prog = env_step(state, chunk[:cfg.n_exec], cfg)
        positions.extend(pos)
        total.add(tally)
        acc = sum(r.num_accepted_drafts for r in records)
        prop = sum(len(r.p) - 1 for r in records)
        report.accepted_per_cycle.append(acc)
        report.proposed_per_cycle.append(prop)
        report.tested_per_cycle.append(sum(r.num_tested_drafts for r in records))
        report.target_passes_per_cycle.append(tally.target_passes)
        report.params_per_cycle.append(_params_repr(params))
        ctx.state = state
        ctx.progress = prog
        ctx.recent_chunks = (ctx.recent_chunks + [x0])[-window:]
        controller.cycle_done(ctx, {"accepted": acc, "proposed": prop,
                                    "diffusion_steps": policy.schedule.num_steps,
                                    "executed": len(pos), "done": done})
        ctx.cycle += 1
    report.success = is_success(state, cfg)
    report.progress = progress(state, cfg)
    report.steps = state.step_count
    report.speed_per_step = [float(v) for v in np.linalg.norm(np.diff(positions, axis=0), axis=1)]
    return Episode(report, positions, latents, events or [])


def _params_repr(params):
    if params is None:
        return {"sampler": "ddpm"}
    if hasattr(params, "to_dict"):
        return params.to_dict()
    return {"source": getattr(params, "describe", lambda: repr(params))()}


def evaluate(policy: DiffusionPolicy, controller_factory, seeds, master_seed=0, keep_events=False):
    """Run one episode per seed index; each episode gets its own stream family."""
    out = []
    for e in seeds:
        streams = RngStreams.from_seed(master_seed, e)
        out.append(run_episode(policy, controller_factory(e), streams, e, keep_events))
    return out
