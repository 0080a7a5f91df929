"""Speculative sampling for diffusion policies.

A cheap drafter proposes several denoising steps, the target verifies them in
one batched pass with a Gaussian acceptance test, and the first rejected step
is repaired by reflection coupling so the target's sampling law is kept. A
PPO-trained scheduler picks the speculative parameters per action chunk.
"""

from .denoiser import (AnalyticGaussianMixtureDenoiser, MeanBiasedDenoiser, MlpDenoiser,
                       distill_drafter, load_denoiser)
from .errors import (ConfigError, ContractError, DependencyMissingError, ParameterError,
                     ScheduleMismatchError, TrainingDivergedError)
from .metrics import RunReport, aggregate, ks_two_sample
from .rng import RngStreams
from .schedule import NoiseSchedule, build_schedule, forward_noise, posterior_step, sample_step
from .scheduler import (PolicyNetwork, RewardConfig, SchedulerAction, final_reward,
                        policy_act, ppo_update, process_reward, reward_scale, stage_of)
from .speculative import (NfeTally, SpecParams, ddpm_sample, log_accept_ratio, reflect_couple,
                          speculative_denoise, speculative_denoise_batch)

__version__ = "0.1.0"

__all__ = [
    "AnalyticGaussianMixtureDenoiser", "ConfigError", "ContractError", "DependencyMissingError",
    "MeanBiasedDenoiser", "MlpDenoiser", "NfeTally", "NoiseSchedule", "ParameterError",
    "PolicyNetwork", "RewardConfig", "RngStreams", "RunReport", "ScheduleMismatchError",
    "SchedulerAction", "SpecParams", "TrainingDivergedError", "aggregate", "build_schedule",
    "ddpm_sample", "distill_drafter", "final_reward", "forward_noise", "ks_two_sample",
    "load_denoiser", "log_accept_ratio", "policy_act", "posterior_step", "ppo_update",
    "process_reward", "reflect_couple", "reward_scale", "sample_step", "speculative_denoise",
    "speculative_denoise_batch", "stage_of",
]
