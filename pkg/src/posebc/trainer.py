"""Training: forward diffusion, contiguous splits, Adam loop, checkpoints.

Training is deterministic for a fixed seed: shuffles are keyed by epoch,
per-example noise is keyed by (derived seed, position), and the optimizer
runs single-worker. Actions are whitened per dimension with statistics from
the training split; the affine coefficients ride along in the checkpoint so
sampling can map back to raw delta units.

Checkpoint format (little-endian): magic "DBC1", u32 version, u32-length
prefixed UTF-8 key=value config text, schedule block (u32 T then T float64
betas), parameter blocks [u16 name_len, name, u8 rank, u32 x rank dims,
float32 data], u32 CRC32 over all preceding bytes.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig, DenoiserParams, batch_loss, init_params, loss_and_gradients
from .errors import (
    CheckpointChecksumError,
    CheckpointMagicError,
    CheckpointVersionError,
    ConfigError,
    DataFormatError,
    DimensionError,
    NumericError,
    UsageError,
)
from .observation import ImageGrid, read_netpbm
from .pose import ACTION_DIM, DemoDataset
from .schedule import NoiseSchedule, build_linear_schedule, coefficients_at

CHECKPOINT_MAGIC = b"DBC1"
CHECKPOINT_VERSION = 1
NORM_SCALE_FLOOR = 1e-6


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    split_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("split_fraction must lie in (0, 1)")


@dataclass
class DenoiserCheckpoint:
    """Trained denoiser plus everything needed to sample with it."""

    config: DenoiserConfig
    schedule: NoiseSchedule
    params: DenoiserParams
    obs_mode: str = "plotted"
    seed: int = 0
    epochs_run: int = 0
    final_train_loss: float = 0.0
    final_eval_loss: float = 0.0
    beta_start: float = 1e-4
    beta_end: float = 0.02
    action_mean: np.ndarray = field(default_factory=lambda: np.zeros(ACTION_DIM, dtype=np.float32))
    action_scale: np.ndarray = field(default_factory=lambda: np.ones(ACTION_DIM, dtype=np.float32))
    version: int = CHECKPOINT_VERSION

    def equals(self, other: "DenoiserCheckpoint") -> bool:
        return (
            self.version == other.version
            and self.config == other.config
            and self.schedule == other.schedule
            and self.obs_mode == other.obs_mode
            and self.seed == other.seed
            and self.epochs_run == other.epochs_run
            and self.final_train_loss == other.final_train_loss
            and self.final_eval_loss == other.final_eval_loss
            and self.beta_start == other.beta_start
            and self.beta_end == other.beta_end
            and np.array_equal(self.action_mean, other.action_mean)
            and np.array_equal(self.action_scale, other.action_scale)
            and list(self.params.tensors) == list(other.params.tensors)
            and all(
                np.array_equal(v, other.params.tensors[k]) for k, v in self.params.tensors.items()
            )
        )


def forward_diffuse(a0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form noising: sqrt(abar_t) * a0 + sqrt(1 - abar_t) * eps."""
    a0 = np.asarray(a0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if a0.shape != (ACTION_DIM,) or eps.shape != (ACTION_DIM,):
        raise DimensionError(f"a0 and eps must have shape (36,), got {a0.shape}, {eps.shape}")
    _, abar, _ = coefficients_at(schedule, t)
    return np.sqrt(abar) * a0 + np.sqrt(1.0 - abar) * eps


def split_dataset(dataset: DemoDataset, fraction: float, mode: str = "contiguous"):
    """Contiguous split: first floor(fraction * n) pairs train, rest eval."""
    if mode != "contiguous":
        raise ConfigError(f"only contiguous splits are supported, got {mode!r}")
    n = len(dataset)
    if n == 0:
        raise UsageError("cannot split an empty dataset")
    n_train = int(np.floor(fraction * n + 1e-9))
    if n_train < 1 or n_train >= n:
        raise ConfigError(f"split fraction {fraction} leaves an empty side for n={n}")

    def slice_ds(lo: int, hi: int) -> DemoDataset:
        meta = dict(dataset.meta)
        meta["frame_offset"] = int(dataset.meta.get("frame_offset", 0)) + lo
        return DemoDataset(
            obs_refs=dataset.obs_refs[lo:hi],
            actions=dataset.actions[lo:hi].copy(),
            session_id=dataset.session_id,
            obs_mode=dataset.obs_mode,
            frame_rate=dataset.frame_rate,
            root=dataset.root,
            meta=meta,
        )

    return slice_ds(0, n_train), slice_ds(n_train, n)


def _derived_seed(*key: int) -> int:
    return int(np.random.SeedSequence(tuple(key)).generate_state(1)[0])


def default_obs_loader(dataset: DemoDataset, index: int) -> ImageGrid:
    if dataset.root is None:
        raise UsageError("dataset has no root directory to resolve observation refs")
    return read_netpbm(Path(dataset.root) / dataset.obs_refs[index])


class _ObsCache:
    """Keeps every observation as quantized bytes; rehydrates per access."""

    def __init__(self, dataset: DemoDataset, loader):
        self._store = []
        for i in range(len(dataset)):
            img = loader(dataset, i)
            self._store.append(np.clip(np.floor(img.pixels * 255.0 + 0.5), 0, 255).astype(np.uint8))

    def get(self, index: int) -> ImageGrid:
        return ImageGrid(self._store[index].astype(np.float32) / 255.0)


def _adam_step(params, grads, state, cfg: TrainConfig):
    state["t"] += 1
    t = state["t"]
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in params.tensors.items():
        g = grads[name]
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (cfg.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)).astype(p.dtype)


def _first_nonfinite_block(params: DenoiserParams, grads) -> str:
    for name, v in params.tensors.items():
        if not np.isfinite(v).all():
            return name
    for name, g in grads.items():
        if not np.isfinite(g).all():
            return name
    return "<loss only>"


def _epoch_loss(params, pairs, schedule, rng_seed: int, batch_size: int) -> float:
    losses = []
    weights = []
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo : lo + batch_size]
        losses.append(batch_loss(params, chunk, schedule, _derived_seed(rng_seed, lo)))
        weights.append(len(chunk))
    return float(np.average(losses, weights=weights))


def compute_action_normalizer(actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and scale (std floored at 1e-6) in float32."""
    mean = actions.mean(axis=0)
    scale = np.maximum(actions.std(axis=0), NORM_SCALE_FLOOR)
    return mean.astype(np.float32), scale.astype(np.float32)


def train(
    dataset: DemoDataset,
    train_cfg: TrainConfig,
    denoiser_cfg: DenoiserConfig,
    schedule: NoiseSchedule,
    metrics_path: Path | None = None,
    obs_loader=None,
) -> DenoiserCheckpoint:
    """Train a denoiser on the contiguous train split; log per-epoch losses."""
    if denoiser_cfg.max_timestep != schedule.num_steps:
        denoiser_cfg = replace(denoiser_cfg, max_timestep=schedule.num_steps)
    train_ds, eval_ds = split_dataset(dataset, train_cfg.split_fraction)
    loader = obs_loader or default_obs_loader
    cache_train = _ObsCache(train_ds, loader)
    cache_eval = _ObsCache(eval_ds, loader)

    mean, scale = compute_action_normalizer(train_ds.actions)
    norm_train = ((train_ds.actions - mean.astype(np.float64)) / scale.astype(np.float64))
    norm_eval = ((eval_ds.actions - mean.astype(np.float64)) / scale.astype(np.float64))

    params = init_params(denoiser_cfg, train_cfg.seed)
    state = {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.tensors.items()},
        "v": {k: np.zeros_like(v) for k, v in params.tensors.items()},
    }

    eval_pairs = [(cache_eval.get(i), norm_eval[i]) for i in range(len(eval_ds))]
    log_rows: list[tuple[int, float, float]] = []
    final_train = final_eval = float("nan")

    if train_cfg.epochs == 0:
        train_pairs = [(cache_train.get(i), norm_train[i]) for i in range(len(train_ds))]
        final_train = _epoch_loss(params, train_pairs, schedule, _derived_seed(train_cfg.seed, 2, 0), train_cfg.batch_size)
        final_eval = _epoch_loss(params, eval_pairs, schedule, _derived_seed(train_cfg.seed, 3, 0), train_cfg.batch_size)
        log_rows.append((0, final_train, final_eval))

    for epoch in range(train_cfg.epochs):
        shuffle_rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((train_cfg.seed, 1, epoch)))
        )
        order = shuffle_rng.permutation(len(train_ds))
        batch_losses = []
        batch_sizes = []
        for batch_idx, lo in enumerate(range(0, len(order), train_cfg.batch_size)):
            idxs = order[lo : lo + train_cfg.batch_size]
            batch = [(cache_train.get(int(i)), norm_train[int(i)]) for i in idxs]
            rng_seed = _derived_seed(train_cfg.seed, 2, epoch, batch_idx)
            loss, grads = loss_and_gradients(params, batch, schedule, rng_seed)
            if not np.isfinite(loss):
                raise NumericError(
                    "non-finite training loss; first offending parameter block: "
                    + _first_nonfinite_block(params, grads)
                )
            _adam_step(params, grads, state, train_cfg)
            batch_losses.append(loss)
            batch_sizes.append(len(batch))
        final_train = float(np.average(batch_losses, weights=batch_sizes))
        final_eval = _epoch_loss(
            params, eval_pairs, schedule, _derived_seed(train_cfg.seed, 3, epoch), train_cfg.batch_size
        )
        log_rows.append((epoch + 1, final_train, final_eval))

    if not params.all_finite():
        raise NumericError(
            "non-finite parameters after training; first offending parameter block: "
            + _first_nonfinite_block(params, {})
        )

    if metrics_path is not None:
        lines = ["epoch,train_loss,eval_loss"]
        lines += [f"{e},{tr:.6g},{ev:.6g}" for e, tr, ev in log_rows]
        Path(metrics_path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    betas = schedule.betas
    return DenoiserCheckpoint(
        config=denoiser_cfg,
        schedule=schedule,
        params=params,
        obs_mode=dataset.obs_mode,
        seed=train_cfg.seed,
        epochs_run=train_cfg.epochs,
        final_train_loss=final_train,
        final_eval_loss=final_eval,
        beta_start=float(betas[0]),
        beta_end=float(betas[-1]),
        action_mean=mean,
        action_scale=scale,
    )


# --- checkpoint serialization -------------------------------------------------


def _config_text(ckpt: DenoiserCheckpoint) -> str:
    cfg = ckpt.config
    fields = [
        ("arch", cfg.arch),
        ("embed_dim", cfg.embed_dim),
        ("num_layers", cfg.num_layers),
        ("num_heads", cfg.num_heads),
        ("patch_size", cfg.patch_size),
        ("action_dim", cfg.action_dim),
        ("max_timestep", cfg.max_timestep),
        ("mlp_hidden", ",".join(str(h) for h in cfg.mlp_hidden)),
        ("obs_mode", ckpt.obs_mode),
        ("seed", ckpt.seed),
        ("epochs_run", ckpt.epochs_run),
        ("final_train_loss", repr(ckpt.final_train_loss)),
        ("final_eval_loss", repr(ckpt.final_eval_loss)),
        ("beta_start", repr(ckpt.beta_start)),
        ("beta_end", repr(ckpt.beta_end)),
        ("action_mean", ",".join(repr(float(v)) for v in ckpt.action_mean)),
        ("action_scale", ",".join(repr(float(v)) for v in ckpt.action_scale)),
    ]
    return "\n".join(f"{k}={v}" for k, v in fields)


def save_checkpoint(ckpt: DenoiserCheckpoint, path: Path) -> None:
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<I", ckpt.version)
    config_bytes = _config_text(ckpt).encode("utf-8")
    body += struct.pack("<I", len(config_bytes))
    body += config_bytes
    betas = np.ascontiguousarray(ckpt.schedule.betas, dtype="<f8")
    body += struct.pack("<I", ckpt.schedule.num_steps)
    body += betas.tobytes()
    for name, tensor in ckpt.params.tensors.items():
        name_b = name.encode("utf-8")
        body += struct.pack("<H", len(name_b))
        body += name_b
        body += struct.pack("<B", tensor.ndim)
        body += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
        body += np.ascontiguousarray(tensor, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def _parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for ln in text.splitlines():
        if not ln.strip():
            continue
        key, value = ln.split("=", 1)
        out[key] = value
    return out


def load_checkpoint(path: Path) -> DenoiserCheckpoint:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise CheckpointChecksumError(f"{path}: file too short to be a checkpoint")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointChecksumError(f"{path}: CRC mismatch (truncated or corrupted)")

    pos = 8
    (config_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    kv = _parse_config_text(data[pos : pos + config_len].decode("utf-8"))
    pos += config_len
    (num_steps,) = struct.unpack_from("<I", data, pos)
    pos += 4
    betas = np.frombuffer(data, dtype="<f8", count=num_steps, offset=pos).astype(np.float64)
    pos += 8 * num_steps

    cfg = DenoiserConfig(
        arch=kv["arch"],
        embed_dim=int(kv["embed_dim"]),
        num_layers=int(kv["num_layers"]),
        num_heads=int(kv["num_heads"]),
        patch_size=int(kv["patch_size"]),
        action_dim=int(kv["action_dim"]),
        max_timestep=int(kv["max_timestep"]),
        mlp_hidden=tuple(int(h) for h in kv["mlp_hidden"].split(",") if h),
    )
    tensors: dict[str, np.ndarray] = {}
    end = len(data) - 4
    while pos < end:
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        rank = data[pos]
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = (
            np.frombuffer(data, dtype="<f4", count=count, offset=pos)
            .astype(np.float32)
            .reshape(dims)
        )
        pos += 4 * count
    if pos != end:
        raise DataFormatError(f"{path}: trailing bytes in parameter section")

    alphas = 1.0 - betas
    schedule = NoiseSchedule(num_steps, betas, alphas, np.cumprod(alphas), np.sqrt(betas))
    mean = np.array([float(v) for v in kv["action_mean"].split(",")], dtype=np.float32)
    scale = np.array([float(v) for v in kv["action_scale"].split(",")], dtype=np.float32)
    return DenoiserCheckpoint(
        config=cfg,
        schedule=schedule,
        params=DenoiserParams(cfg, tensors),
        obs_mode=kv["obs_mode"],
        seed=int(kv["seed"]),
        epochs_run=int(kv["epochs_run"]),
        final_train_loss=float(kv["final_train_loss"]),
        final_eval_loss=float(kv["final_eval_loss"]),
        beta_start=float(kv["beta_start"]),
        beta_end=float(kv["beta_end"]),
        action_mean=mean,
        action_scale=scale,
        version=version,
    )


def fresh_checkpoint(
    denoiser_cfg: DenoiserConfig,
    schedule: NoiseSchedule,
    obs_mode: str = "plotted",
    seed: int = 0,
) -> DenoiserCheckpoint:
    """Untrained checkpoint with identity action normalization (test/support)."""
    betas = schedule.betas
    return DenoiserCheckpoint(
        config=replace(denoiser_cfg, max_timestep=schedule.num_steps),
        schedule=schedule,
        params=init_params(replace(denoiser_cfg, max_timestep=schedule.num_steps), seed),
        obs_mode=obs_mode,
        seed=seed,
        beta_start=float(betas[0]),
        beta_end=float(betas[-1]),
    )


def default_schedule(num_steps: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    return build_linear_schedule(num_steps, beta_start, beta_end)
