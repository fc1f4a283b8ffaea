"""Diffusion-X sampling: the reverse pass plus extra refining steps.

Starting from a standard-normal action, the loop runs i = T down to 1 - M
with the step index clamped at tau = max(i, 1); injected noise is zero once
tau reaches 1, so the last M + 1 updates are a deterministic map. The update
uses the standard posterior-mean coefficient (1 - alpha) / sqrt(1 - abar) by
default; the alternative square-root form can be selected for auditability.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .denoiser import embed_observation, predict_noise_given_features
from .errors import ConfigError, DimensionError
from .observation import ImageGrid
from .pose import ACTION_DIM, FacilitatorTrace
from .schedule import coefficients_at
from .trainer import DenoiserCheckpoint

COEFF_STANDARD = "standard"
COEFF_AS_PRINTED = "as_printed"


@dataclass(frozen=True)
class SamplerConfig:
    num_denoise_steps: int = 50
    extra_steps: int = 8
    seed: int = 0
    coefficient: str = COEFF_STANDARD

    def __post_init__(self):
        if self.num_denoise_steps < 1:
            raise ConfigError("num_denoise_steps must be >= 1")
        if self.extra_steps < 0:
            raise ConfigError("extra_steps must be >= 0")
        if self.coefficient not in (COEFF_STANDARD, COEFF_AS_PRINTED):
            raise ConfigError(
                f"coefficient must be '{COEFF_STANDARD}' or '{COEFF_AS_PRINTED}', "
                f"got {self.coefficient!r}"
            )


def diffusion_x_sample(
    ckpt: DenoiserCheckpoint,
    obs: ImageGrid | None,
    cfg: SamplerConfig,
    *,
    predict_fn=None,
) -> np.ndarray:
    """Sample one action vector conditioned on an observation.

    Makes exactly T + M noise predictions. predict_fn(a, tau, obs) overrides
    the checkpoint's network (instrumentation and stub hooks); the returned
    vector is mapped back through the checkpoint's action normalization.
    """
    schedule = ckpt.schedule
    if cfg.num_denoise_steps != schedule.num_steps:
        raise ConfigError(
            f"sampler configured for {cfg.num_denoise_steps} steps but checkpoint "
            f"schedule has {schedule.num_steps}"
        )
    if predict_fn is None:
        feats = embed_observation(ckpt.params, obs)

        def predict_fn(a, tau, _obs):
            return predict_noise_given_features(ckpt.params, a, tau, feats)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    a = rng.standard_normal(ACTION_DIM)
    for i in range(schedule.num_steps, -cfg.extra_steps, -1):
        tau = max(i, 1)
        alpha, abar, sigma = coefficients_at(schedule, tau)
        eps_hat = np.asarray(predict_fn(a, tau, obs), dtype=np.float64)
        if cfg.coefficient == COEFF_STANDARD:
            coeff = (1.0 - alpha) / np.sqrt(1.0 - abar)
        else:
            coeff = np.sqrt(1.0 - alpha) / np.sqrt(1.0 - abar)
        z = rng.standard_normal(ACTION_DIM) if tau > 1 else np.zeros(ACTION_DIM)
        a = (a - coeff * eps_hat) / np.sqrt(alpha) + sigma * z
    return a * ckpt.action_scale.astype(np.float64) + ckpt.action_mean.astype(np.float64)


def rollout(
    ckpt: DenoiserCheckpoint,
    obs_sequence: list[ImageGrid],
    gt_trace: FacilitatorTrace,
    cfg: SamplerConfig,
    *,
    predict_fn=None,
) -> FacilitatorTrace:
    """Teacher-forced one-step rollout: each prediction starts from the
    ground-truth previous frame; frame f uses sampling seed cfg.seed XOR f.

    predict_fn, when given, receives (a, tau, obs, frame_index).
    """
    n = len(gt_trace)
    if len(obs_sequence) != n - 1:
        raise DimensionError(
            f"need one observation per transition: got {len(obs_sequence)} for {n} frames"
        )
    predicted = np.empty_like(gt_trace.frames)
    predicted[0] = gt_trace.frames[0]
    for f in range(n - 1):
        step_fn = None
        if predict_fn is not None:
            step_fn = lambda a, tau, o, _f=f: predict_fn(a, tau, o, _f)
        delta = diffusion_x_sample(
            ckpt, obs_sequence[f], replace(cfg, seed=cfg.seed ^ f), predict_fn=step_fn
        )
        predicted[f + 1] = gt_trace.frames[f] + delta.reshape(-1, 2)
    return FacilitatorTrace(predicted, frame_rate=gt_trace.frame_rate)
