"""Command-line surface: synth | train | sample | eval | bench | stats.

Experiments are driven by a plain-text key=value config file; command-line
flags override file keys. Every command echoes its resolved configuration,
seeds, and artifact hashes into a run manifest so outputs are replayable.
Exit codes: 0 success, 1 usage/config error, 2 data/format error, 3 numeric
failure.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig
from .errors import ConfigError, DataFormatError, NumericError, PoseBCError, UsageError
from .evalbench import bench, emit_report, evaluate, fmt6
from .observation import ObsMode, parse_obs_mode, read_netpbm
from .pose import displacement_stats, joint_id
from .sampler import SamplerConfig, diffusion_x_sample
from .schedule import build_linear_schedule
from .synthscene import (
    CANVAS_H,
    CANVAS_W,
    SceneConfig,
    export_dataset,
    generate_session,
    load_dataset,
    load_frames,
    load_trace,
    render_raw,
)
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, split_dataset, train

# key -> (parser, default); None default means "use the profile default".
_CONFIG_KEYS = {
    "scene.participants": (int, 6),
    "scene.duration_frames": (int, 2001),
    "scene.fps": (float, 30.0),
    "scene.seed": (int, 7),
    "scene.profile": (str, "teacher_like"),
    "scene.wrist_amplitude_px": (float, None),
    "scene.gesture_freq_hz": (float, None),
    "scene.burst_multiplier": (float, None),
    "scene.rotation_period": (int, None),
    "scene.gain_mod_depth": (float, None),
    "scene.jitter_px": (float, 0.15),
    "scene.clutter_level": (float, 0.5),
    "schedule.num_steps": (int, 50),
    "schedule.beta_start": (float, 1e-4),
    "schedule.beta_end": (float, 0.02),
    "denoiser.arch": (str, "transformer"),
    "denoiser.embed_dim": (int, 64),
    "denoiser.num_layers": (int, 2),
    "denoiser.num_heads": (int, 4),
    "denoiser.patch_size": (int, 16),
    "denoiser.mlp_hidden": (str, "256,256"),
    "train.epochs": (int, 20),
    "train.batch_size": (int, 32),
    "train.learning_rate": (float, 1e-4),
    "train.adam_beta1": (float, 0.9),
    "train.adam_beta2": (float, 0.999),
    "train.adam_eps": (float, 1e-8),
    "train.split_fraction": (float, 0.8),
    "train.seed": (int, 7),
    "sampler.extra_steps": (int, 8),
    "sampler.seed": (int, 7),
    "sampler.coefficient": (str, "standard"),
    "obs_mode": (str, "plotted"),
}


class ExperimentConfig:
    """Flat key=value configuration with typed lookups."""

    def __init__(self, values: dict):
        self.values = values

    @classmethod
    def load(cls, path: Path | None, overrides: dict | None = None) -> "ExperimentConfig":
        values = {k: default for k, (_, default) in _CONFIG_KEYS.items()}
        if path is not None:
            text = Path(path).read_text(encoding="utf-8")
            for lineno, ln in enumerate(text.splitlines(), 1):
                ln = ln.strip()
                if not ln or ln.startswith("#"):
                    continue
                if "=" not in ln:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {ln!r}")
                key, raw = (s.strip() for s in ln.split("=", 1))
                if key not in _CONFIG_KEYS:
                    raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
                parser = _CONFIG_KEYS[key][0]
                try:
                    values[key] = parser(raw) if raw.lower() != "none" else None
                except ValueError as exc:
                    raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        return cls(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def scene_config(self) -> SceneConfig:
        v = self.values
        return SceneConfig(
            num_participants=v["scene.participants"],
            duration_frames=v["scene.duration_frames"],
            fps=v["scene.fps"],
            seed=v["scene.seed"],
            profile=v["scene.profile"],
            wrist_amplitude_px=v["scene.wrist_amplitude_px"],
            gesture_freq_hz=v["scene.gesture_freq_hz"],
            burst_multiplier=v["scene.burst_multiplier"],
            rotation_period=v["scene.rotation_period"],
            gain_mod_depth=v["scene.gain_mod_depth"],
            jitter_px=v["scene.jitter_px"],
            clutter_level=v["scene.clutter_level"],
        )

    def schedule(self):
        v = self.values
        return build_linear_schedule(
            v["schedule.num_steps"], v["schedule.beta_start"], v["schedule.beta_end"]
        )

    def denoiser_config(self) -> DenoiserConfig:
        v = self.values
        hidden = tuple(int(h) for h in str(v["denoiser.mlp_hidden"]).split(",") if h)
        return DenoiserConfig(
            arch=v["denoiser.arch"],
            embed_dim=v["denoiser.embed_dim"],
            num_layers=v["denoiser.num_layers"],
            num_heads=v["denoiser.num_heads"],
            patch_size=v["denoiser.patch_size"],
            max_timestep=v["schedule.num_steps"],
            mlp_hidden=hidden,
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["train.epochs"],
            batch_size=v["train.batch_size"],
            learning_rate=v["train.learning_rate"],
            adam_beta1=v["train.adam_beta1"],
            adam_beta2=v["train.adam_beta2"],
            adam_eps=v["train.adam_eps"],
            split_fraction=v["train.split_fraction"],
            seed=v["train.seed"],
        )

    def sampler_config(self) -> SamplerConfig:
        v = self.values
        return SamplerConfig(
            num_denoise_steps=v["schedule.num_steps"],
            extra_steps=v["sampler.extra_steps"],
            seed=v["sampler.seed"],
            coefficient=v["sampler.coefficient"],
        )


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, config: ExperimentConfig, artifacts: list[Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["# run manifest"]
    for key in sorted(config.values):
        lines.append(f"{key}={config.values[key]}")
    for art in artifacts:
        rel = Path(art).relative_to(out_dir) if Path(art).is_relative_to(out_dir) else Path(art)
        lines.append(f"sha256 {_sha256(art)} {rel}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def _collect_files(root: Path) -> list[Path]:
    return sorted(p for p in Path(root).rglob("*") if p.is_file() and p.name != "manifest.txt")


def cmd_synth(config: ExperimentConfig, out_dir: Path) -> int:
    session = generate_session(config.scene_config())
    for mode in (ObsMode.RAW, ObsMode.PLOTTED):
        export_dataset(session, mode, Path(out_dir) / mode.value)
    write_manifest(out_dir, config, _collect_files(out_dir))
    print(f"synth: wrote {config['scene.duration_frames']} frames to {out_dir}/{{raw,plotted}}")
    return 0


def cmd_train(config: ExperimentConfig, data_dir: Path, out_ckpt: Path) -> int:
    dataset = load_dataset(data_dir)
    out_ckpt = Path(out_ckpt)
    out_ckpt.parent.mkdir(parents=True, exist_ok=True)
    metrics_path = out_ckpt.with_suffix(".metrics.csv")
    ckpt = train(
        dataset,
        config.train_config(),
        config.denoiser_config(),
        config.schedule(),
        metrics_path=metrics_path,
    )
    save_checkpoint(ckpt, out_ckpt)
    write_manifest(out_ckpt.parent, config, [out_ckpt, metrics_path])
    print(
        f"train: {ckpt.epochs_run} epochs on {dataset.obs_mode} observations, "
        f"final train loss {fmt6(ckpt.final_train_loss)}, eval loss {fmt6(ckpt.final_eval_loss)}"
    )
    return 0


def cmd_sample(config: ExperimentConfig, ckpt_path: Path, obs_file: Path, seed: int | None) -> int:
    ckpt = load_checkpoint(ckpt_path)
    cfg = config.sampler_config()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    cfg = replace(cfg, num_denoise_steps=ckpt.schedule.num_steps)
    obs = read_netpbm(obs_file)
    action = diffusion_x_sample(ckpt, obs, cfg)
    print(",".join(repr(float(v)) for v in action))
    return 0


def cmd_eval(config: ExperimentConfig, ckpt_path: Path, data_dir: Path, out_dir: Path) -> int:
    ckpt = load_checkpoint(ckpt_path)
    dataset = load_dataset(data_dir)
    _, eval_split = split_dataset(dataset, config["train.split_fraction"])
    cfg = replace(config.sampler_config(), num_denoise_steps=ckpt.schedule.num_steps)
    report = evaluate(ckpt, eval_split, cfg)
    out_dir = Path(out_dir)
    written = emit_report([report], out_dir / "metrics.csv")
    write_manifest(out_dir, config, written)
    print(
        f"eval: session {report.session_id} mode {report.obs_mode} "
        f"mpjpe {fmt6(report.mpjpe)} baseline {fmt6(report.baseline_mpjpe)} "
        f"frames {report.frames}"
    )
    return 0


def _bench_sources(data_dir: Path, mode: ObsMode, config: ExperimentConfig, limit: int):
    frames = load_frames(data_dir)[:limit]
    if mode is ObsMode.PLOTTED:
        return frames
    scene_cfg = config.scene_config()
    return [render_raw(f, scene_cfg) for f in frames]


def cmd_bench(
    config: ExperimentConfig,
    ckpt_paths: list[Path],
    data_dirs: list[Path],
    out_dir: Path,
    warmup_frames: int,
    bench_frames: int,
) -> int:
    if len(ckpt_paths) != len(data_dirs):
        raise UsageError("bench needs one --data per --ckpt")
    reports = []
    for ckpt_path, data_dir in zip(ckpt_paths, data_dirs):
        ckpt = load_checkpoint(ckpt_path)
        dataset = load_dataset(data_dir)
        mode = parse_obs_mode(ckpt.obs_mode)
        if mode.value != dataset.obs_mode:
            raise UsageError(
                f"checkpoint mode {ckpt.obs_mode} does not match dataset mode {dataset.obs_mode}"
            )
        cfg = replace(config.sampler_config(), num_denoise_steps=ckpt.schedule.num_steps)
        n_frames = min(len(dataset), warmup_frames + bench_frames)
        sources = _bench_sources(data_dir, mode, config, n_frames)
        stats = bench(ckpt, dataset, cfg, warmup_frames, sources=sources)
        _, eval_split = split_dataset(dataset, config["train.split_fraction"])
        report = evaluate(ckpt, eval_split, cfg)
        report.ms_per_frame_mean = stats.ms_mean
        report.ms_per_frame_std = stats.ms_std
        reports.append(report)
        print(
            f"bench: {dataset.obs_mode} {fmt6(stats.ms_mean)} ms/frame over {stats.frames} frames "
            f"(mpjpe {fmt6(report.mpjpe)})"
        )
    out_dir = Path(out_dir)
    written = emit_report(reports, out_dir / "bench_metrics.csv")
    write_manifest(out_dir, config, written)
    return 0


def cmd_stats(data_dir: Path, joint_name: str) -> int:
    trace = load_trace(data_dir)
    from .pose import read_session_meta

    meta = read_session_meta(Path(data_dir) / "session.txt")
    width = float(meta.get("width", CANVAS_W))
    height = float(meta.get("height", CANVAS_H))
    stats = displacement_stats(trace, joint_id(joint_name), (width, height))
    print("# displacement magnitudes in pixels; std is population std; range = max - min")
    print("joint,mean,std,range")
    print(f"{joint_name},{fmt6(stats['mean'])},{fmt6(stats['std'])},{fmt6(stats['range'])}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posebc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", type=Path, default=None, help="key=value experiment config")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override every seed key")

    p = sub.add_parser("synth", help="generate a synthetic session, export both obs modes")
    common(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a denoiser on an exported dataset")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint output path")
    p.add_argument("--obs", choices=["raw", "plotted"], default=None)

    p = sub.add_parser("sample", help="sample one action vector for an observation image")
    common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--obs-file", type=Path, required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("bench", help="per-frame processing time + MPJPE scatter")
    common(p)
    p.add_argument("--ckpt", type=Path, action="append", required=True)
    p.add_argument("--data", type=Path, action="append", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--warmup-frames", type=int, default=5)
    p.add_argument("--bench-frames", type=int, default=100)

    p = sub.add_parser("stats", help="displacement distribution for one joint")
    common(p, seed=False)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--joint", default="RWrist")

    return parser


def _overrides_from_args(args) -> dict:
    overrides = {}
    seed = getattr(args, "seed", None)
    if seed is not None:
        overrides.update({"scene.seed": seed, "train.seed": seed, "sampler.seed": seed})
    obs = getattr(args, "obs", None)
    if obs is not None:
        overrides["obs_mode"] = obs
    return overrides


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        config = ExperimentConfig.load(args.config, _overrides_from_args(args))
        if args.command == "synth":
            return cmd_synth(config, args.out)
        if args.command == "train":
            return cmd_train(config, args.data, args.out)
        if args.command == "sample":
            return cmd_sample(config, args.ckpt, args.obs_file, args.seed)
        if args.command == "eval":
            return cmd_eval(config, args.ckpt, args.data, args.out)
        if args.command == "bench":
            return cmd_bench(
                config, args.ckpt, args.data, args.out, args.warmup_frames, args.bench_frames
            )
        if args.command == "stats":
            return cmd_stats(args.data, args.joint)
        raise UsageError(f"unknown command {args.command!r}")
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except PoseBCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
