"""Evaluation and benchmarking: MPJPE vs the zero-motion baseline, percent
differences, per-frame processing time, and metrics/scatter file emission.

Teacher-forced one-step evaluation: the predicted position for frame f+1 is
the ground-truth frame f plus the sampled delta, so the MPJPE over one-step
positions equals the mean per-joint magnitude of the delta error. The bench
timed span covers observation construction (resize or rasterize) plus
sampling; disk I/O stays outside the span so numbers are machine-load
independent. All file numbers use fixed decimal with 6 significant digits.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import UsageError
from .observation import ObsMode, make_observation
from .pose import DemoDataset, mpjpe
from .sampler import SamplerConfig, diffusion_x_sample
from .trainer import DenoiserCheckpoint, default_obs_loader

METRICS_HEADER = "session,obs_mode,mpjpe,baseline_mpjpe,ms_per_frame_mean,ms_per_frame_std,seed"
SCATTER_HEADER = "ms_per_frame,mpjpe"


@dataclass
class EvalReport:
    session_id: str
    obs_mode: str
    mpjpe: float
    frames: int
    baseline_mpjpe: float
    ms_per_frame_mean: float
    ms_per_frame_std: float
    seed: int


@dataclass
class BenchStats:
    ms_mean: float
    ms_std: float
    ms_min: float
    ms_max: float
    frames: int


def fmt6(value: float) -> str:
    """Fixed decimal with 6 significant digits."""
    return np.format_float_positional(
        float(value), precision=6, unique=False, fractional=False, trim="-"
    )


def evaluate(
    ckpt: DenoiserCheckpoint,
    dataset: DemoDataset,
    cfg: SamplerConfig,
    *,
    predict_fn=None,
    obs_loader=None,
) -> EvalReport:
    """Teacher-forced MPJPE over a dataset (normally the eval split).

    Frame f samples with seed cfg.seed XOR (frame_offset + f), so any report
    can be replayed. predict_fn, when given, receives (a, tau, obs, frame).
    """
    n = len(dataset)
    if n == 0:
        raise UsageError("cannot evaluate an empty dataset")
    loader = obs_loader or default_obs_loader
    offset = int(dataset.meta.get("frame_offset", 0))
    deltas = np.empty_like(dataset.actions)
    times_ms = np.empty(n)
    for j in range(n):
        obs = loader(dataset, j)
        frame = offset + j
        step_fn = None
        if predict_fn is not None:
            step_fn = lambda a, tau, o, _f=frame: predict_fn(a, tau, o, _f)
        t0 = time.perf_counter()
        deltas[j] = diffusion_x_sample(
            ckpt, obs, replace(cfg, seed=cfg.seed ^ frame), predict_fn=step_fn
        )
        times_ms[j] = (time.perf_counter() - t0) * 1000.0
    pred = deltas.reshape(n, -1, 2)
    gt = dataset.actions.reshape(n, -1, 2)
    return EvalReport(
        session_id=dataset.session_id,
        obs_mode=dataset.obs_mode,
        mpjpe=mpjpe(pred, gt),
        frames=n,
        baseline_mpjpe=mpjpe(np.zeros_like(gt), gt),
        ms_per_frame_mean=float(times_ms.mean()),
        ms_per_frame_std=float(times_ms.std()),
        seed=cfg.seed,
    )


def percent_diff(raw_value: float, plotted_value: float) -> float:
    """(raw - plotted) / raw * 100, rounded to 2 decimals for display."""
    if raw_value <= 0:
        raise UsageError(f"raw_value must be positive, got {raw_value}")
    return round((raw_value - plotted_value) / raw_value * 100.0, 2)


def bench(
    ckpt: DenoiserCheckpoint,
    dataset: DemoDataset,
    cfg: SamplerConfig,
    warmup_frames: int,
    *,
    sources: list,
    obs_builder=None,
    predict_fn=None,
) -> BenchStats:
    """Per-frame wall time of observation construction plus sampling.

    sources holds the in-memory pre-observation inputs (full-size ImageGrid
    for raw mode, KeypointFrame for plotted); keeping them in memory keeps
    file I/O out of the timed span. The first warmup_frames are discarded.
    """
    if warmup_frames < 0:
        raise UsageError("warmup_frames must be >= 0")
    if len(sources) <= warmup_frames:
        raise UsageError(
            f"need more frames than warmup: {len(sources)} sources, warmup {warmup_frames}"
        )
    mode = ObsMode(ckpt.obs_mode)
    if obs_builder is None:
        obs_builder = lambda src: make_observation(mode, src)
    offset = int(dataset.meta.get("frame_offset", 0))
    times_ms = []
    for f, src in enumerate(sources):
        frame = offset + f
        step_fn = None
        if predict_fn is not None:
            step_fn = lambda a, tau, o, _f=frame: predict_fn(a, tau, o, _f)
        t0 = time.perf_counter()
        obs = obs_builder(src)
        diffusion_x_sample(ckpt, obs, replace(cfg, seed=cfg.seed ^ frame), predict_fn=step_fn)
        times_ms.append((time.perf_counter() - t0) * 1000.0)
    timed = np.asarray(times_ms[warmup_frames:])
    return BenchStats(
        ms_mean=float(timed.mean()),
        ms_std=float(timed.std()),
        ms_min=float(timed.min()),
        ms_max=float(timed.max()),
        frames=len(timed),
    )


def emit_report(reports: list[EvalReport], path: Path) -> list[Path]:
    """Write the metrics file plus one two-column scatter file per obs mode."""
    if not reports:
        raise UsageError("emit_report requires at least one report")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [METRICS_HEADER]
    for r in reports:
        lines.append(
            f"{r.session_id},{r.obs_mode},{fmt6(r.mpjpe)},{fmt6(r.baseline_mpjpe)},"
            f"{fmt6(r.ms_per_frame_mean)},{fmt6(r.ms_per_frame_std)},{r.seed}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written = [path]
    for mode in ("raw", "plotted"):
        mode_reports = [r for r in reports if r.obs_mode == mode]
        if not mode_reports:
            continue
        scatter = path.with_name(f"{path.stem}_scatter_{mode}.csv")
        rows = [SCATTER_HEADER]
        rows += [f"{fmt6(r.ms_per_frame_mean)},{fmt6(r.mpjpe)}" for r in mode_reports]
        scatter.write_text("\n".join(rows) + "\n", encoding="utf-8")
        written.append(scatter)
    return written
