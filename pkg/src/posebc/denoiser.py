"""Noise-prediction networks: a small transformer and an MLP baseline.

Both architectures embed the observation image by flattening non-overlapping
patches through a shared linear map and mean-pooling to a single feature
vector. The transformer runs full self-attention over three tokens
[observation, timestep, action] with pre-normalization and GELU, and reads
the prediction off the action token. Gradients come from the in-repo
reverse-mode engine in autodiff.py.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, NumericError, UsageError
from .observation import OBS_SIZE, ImageGrid
from .pose import ACTION_DIM
from .schedule import NoiseSchedule

ARCH_TRANSFORMER = "transformer"
ARCH_MLP = "mlp"


@dataclass(frozen=True)
class DenoiserConfig:
    arch: str = ARCH_TRANSFORMER
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    patch_size: int = 16
    action_dim: int = ACTION_DIM
    max_timestep: int = 50
    mlp_hidden: tuple[int, ...] = (256, 256)

    def __post_init__(self):
        if self.arch not in (ARCH_TRANSFORMER, ARCH_MLP):
            raise ConfigError(f"arch must be '{ARCH_TRANSFORMER}' or '{ARCH_MLP}', got {self.arch!r}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if OBS_SIZE % self.patch_size != 0:
            raise ConfigError(f"patch_size {self.patch_size} must divide {OBS_SIZE}")
        if self.max_timestep < 1:
            raise ConfigError("max_timestep must be >= 1")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def num_patches(self) -> int:
        return (OBS_SIZE // self.patch_size) ** 2


@dataclass
class DenoiserParams:
    """Named parameter tensors; shapes are a pure function of the config."""

    config: DenoiserConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())


def _shape_table(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "obs_patch.w": (cfg.patch_dim, d),
        "obs_patch.b": (d,),
        "obs_patch.gain": (cfg.num_patches, d),
        "time_embed.w": (d, d),
        "time_embed.b": (d,),
    }
    if cfg.arch == ARCH_TRANSFORMER:
        shapes["act_embed.w"] = (cfg.action_dim, d)
        shapes["act_embed.b"] = (d,)
        hidden = 4 * d
        for layer in range(cfg.num_layers):
            p = f"layers.{layer}."
            shapes[p + "ln1.g"] = (d,)
            shapes[p + "ln1.b"] = (d,)
            for name in ("wq", "wk", "wv", "wo"):
                shapes[p + "attn." + name] = (d, d)
            # no key bias: softmax is invariant to a constant shift per query
            for name in ("bq", "bv", "bo"):
                shapes[p + "attn." + name] = (d,)
            shapes[p + "ln2.g"] = (d,)
            shapes[p + "ln2.b"] = (d,)
            shapes[p + "mlp.w1"] = (d, hidden)
            shapes[p + "mlp.b1"] = (hidden,)
            shapes[p + "mlp.w2"] = (hidden, d)
            shapes[p + "mlp.b2"] = (d,)
        shapes["final_ln.g"] = (d,)
        shapes["final_ln.b"] = (d,)
        shapes["head.w"] = (d, cfg.action_dim)
        shapes["head.b"] = (cfg.action_dim,)
    else:
        width = cfg.action_dim + 2 * d
        for i, h in enumerate(cfg.mlp_hidden):
            shapes[f"mlp.w{i}"] = (width, h)
            shapes[f"mlp.b{i}"] = (h,)
            width = h
        n = len(cfg.mlp_hidden)
        shapes[f"mlp.w{n}"] = (width, cfg.action_dim)
        shapes[f"mlp.b{n}"] = (cfg.action_dim,)
    return shapes


def param_count(cfg: DenoiserConfig) -> int:
    """Total parameter count.

    Transformer: pd*d + d + P*d  +  d*d + d  +  a*d + d
                 + L * (4d + 3*(d*d + d) + d*d + d*4d + 4d + 4d*d + d)
                 + 2d + d*a + a     with pd = patch_size^2 * 3, P patches, a = 36.
    MLP:         pd*d + d + P*d + d*d + d + chain over [a + 2d, *hidden, a].
    """
    return sum(int(np.prod(s)) for s in _shape_table(cfg).values())


def init_params(cfg: DenoiserConfig, seed: int) -> DenoiserParams:
    """Seeded init: weights uniform in +-1/sqrt(fan_in), biases 0, LN gains 1."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _shape_table(cfg).items():
        if name.endswith(".g"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif name == "obs_patch.gain":
            # patch-location gating around 1 so pooling starts as a plain mean
            tensors[name] = (1.0 + rng.uniform(-0.5, 0.5, size=shape)).astype(np.float32)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return DenoiserParams(cfg, tensors)


def sinusoidal_embedding(ts: np.ndarray, dim: int, dtype=np.float64) -> np.ndarray:
    """Standard sin/cos positional features of the (1-based) timestep."""
    ts = np.asarray(ts, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = ts * freqs[None, :]
    emb = np.zeros((ts.shape[0], dim))
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang[:, : dim - half])
    return emb.astype(dtype)


def extract_patches(obs: ImageGrid, patch_size: int, dtype=np.float32) -> np.ndarray:
    """Flatten an observation into (num_patches, patch_dim), centered at 0."""
    if obs.height != OBS_SIZE or obs.width != OBS_SIZE or obs.channels != 3:
        raise DimensionError(
            f"denoiser expects {OBS_SIZE}x{OBS_SIZE} RGB observations, got "
            f"{obs.height}x{obs.width}x{obs.channels}"
        )
    n = OBS_SIZE // patch_size
    grid = obs.pixels.astype(dtype) - np.asarray(0.5, dtype=dtype)
    patches = grid.reshape(n, patch_size, n, patch_size, 3)
    patches = patches.transpose(0, 2, 1, 3, 4).reshape(n * n, patch_size * patch_size * 3)
    return patches


def _affine_ln(x: ad.Tensor, g: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.mul(ad.layernorm(x), g), b)


def _embed_obs_tokens(pt: dict[str, ad.Tensor], patches: ad.Tensor) -> ad.Tensor:
    """(B, P, patch_dim) patches -> (B, D) pooled observation tokens.

    Patch embeddings share one linear map; a learned per-patch gain keeps
    location information alive through the mean pool (a plain mean is
    position-blind, which provably cannot express position-driven dynamics).
    """
    emb = ad.add(ad.matmul(patches, pt["obs_patch.w"]), pt["obs_patch.b"])
    return ad.mean(ad.mul(emb, pt["obs_patch.gain"]), axis=1)


def _forward_core(
    cfg: DenoiserConfig,
    pt: dict[str, ad.Tensor],
    actions: np.ndarray,
    ts: np.ndarray,
    obs_tokens: ad.Tensor,
) -> ad.Tensor:
    """Batched noise prediction given precomputed observation tokens."""
    dtype = pt["obs_patch.w"].dtype
    batch = actions.shape[0]
    d = cfg.embed_dim
    t_sin = sinusoidal_embedding(ts, d, dtype=dtype)
    t_tok = ad.add(ad.matmul(ad.Tensor(t_sin), pt["time_embed.w"]), pt["time_embed.b"])
    acts = ad.Tensor(np.asarray(actions, dtype=dtype))

    if cfg.arch == ARCH_MLP:
        h = ad.concat([acts, t_tok, obs_tokens], axis=-1)
        n = len(cfg.mlp_hidden)
        for i in range(n):
            h = ad.gelu(ad.add(ad.matmul(h, pt[f"mlp.w{i}"]), pt[f"mlp.b{i}"]))
        return ad.add(ad.matmul(h, pt[f"mlp.w{n}"]), pt[f"mlp.b{n}"])

    heads = cfg.num_heads
    dh = d // heads
    x = ad.stack([obs_tokens, t_tok, acts_embed(pt, acts)], axis=1)  # (B, 3, D)
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}."
        h = _affine_ln(x, pt[p + "ln1.g"], pt[p + "ln1.b"])
        q = ad.add(ad.matmul(h, pt[p + "attn.wq"]), pt[p + "attn.bq"])
        k = ad.matmul(h, pt[p + "attn.wk"])
        v = ad.add(ad.matmul(h, pt[p + "attn.wv"]), pt[p + "attn.bv"])
        q = ad.transpose(ad.reshape(q, (batch, 3, heads, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (batch, 3, heads, dh)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, (batch, 3, heads, dh)), (0, 2, 1, 3))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        ctx = ad.matmul(ad.softmax(scores), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, 3, d))
        attn_out = ad.add(ad.matmul(ctx, pt[p + "attn.wo"]), pt[p + "attn.bo"])
        x = ad.add(x, attn_out)
        h2 = _affine_ln(x, pt[p + "ln2.g"], pt[p + "ln2.b"])
        m = ad.gelu(ad.add(ad.matmul(h2, pt[p + "mlp.w1"]), pt[p + "mlp.b1"]))
        m = ad.add(ad.matmul(m, pt[p + "mlp.w2"]), pt[p + "mlp.b2"])
        x = ad.add(x, m)
    y = _affine_ln(x, pt["final_ln.g"], pt["final_ln.b"])
    act_row = ad.getitem(y, (slice(None), 2))
    return ad.add(ad.matmul(act_row, pt["head.w"]), pt["head.b"])


def acts_embed(pt: dict[str, ad.Tensor], acts: ad.Tensor) -> ad.Tensor:
    return ad.add(ad.matmul(acts, pt["act_embed.w"]), pt["act_embed.b"])


def _wrap_params(params: DenoiserParams, requires_grad: bool) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in params.tensors.items()}


def _check_inputs(params: DenoiserParams, noisy_action: np.ndarray, t: int) -> np.ndarray:
    noisy_action = np.asarray(noisy_action, dtype=np.float64)
    if noisy_action.shape != (params.config.action_dim,):
        raise DimensionError(
            f"action must have shape ({params.config.action_dim},), got {noisy_action.shape}"
        )
    if not 1 <= t <= params.config.max_timestep:
        raise IndexError(f"timestep {t} outside [1, {params.config.max_timestep}]")
    if not params.all_finite():
        raise NumericError("denoiser parameters contain non-finite values")
    return noisy_action


def embed_observation(params: DenoiserParams, obs: ImageGrid) -> np.ndarray:
    """Pooled observation features; reusable across sampler steps."""
    patches = extract_patches(obs, params.config.patch_size, dtype=params.tensors["obs_patch.w"].dtype)
    pt = _wrap_params(params, requires_grad=False)
    return _embed_obs_tokens(pt, ad.Tensor(patches[None])).data[0]


def predict_noise_given_features(
    params: DenoiserParams, noisy_action: np.ndarray, t: int, obs_features: np.ndarray
) -> np.ndarray:
    """Single-example prediction from cached observation features."""
    noisy_action = _check_inputs(params, noisy_action, t)
    pt = _wrap_params(params, requires_grad=False)
    feats = ad.Tensor(np.asarray(obs_features, dtype=params.tensors["obs_patch.w"].dtype)[None])
    out = _forward_core(params.config, pt, noisy_action[None], np.array([t]), feats)
    return out.data[0].astype(np.float64)


def predict_noise(params: DenoiserParams, noisy_action: np.ndarray, t: int, obs: ImageGrid) -> np.ndarray:
    """Predict the noise in noisy_action at timestep t given the observation."""
    return predict_noise_given_features(params, noisy_action, t, embed_observation(params, obs))


def _build_loss(
    params: DenoiserParams,
    batch: list[tuple[ImageGrid, np.ndarray]],
    schedule: NoiseSchedule,
    rng_seed: int,
    requires_grad: bool,
) -> tuple[ad.Tensor, dict[str, ad.Tensor]]:
    if not batch:
        raise UsageError("loss computation requires a non-empty batch")
    cfg = params.config
    if schedule.num_steps != cfg.max_timestep:
        raise ConfigError(
            f"schedule has {schedule.num_steps} steps but denoiser expects {cfg.max_timestep}"
        )
    dtype = params.tensors["obs_patch.w"].dtype
    n = len(batch)
    a0 = np.stack([np.asarray(a, dtype=np.float64) for _, a in batch])
    if a0.shape != (n, cfg.action_dim):
        raise DimensionError(f"batch actions must be ({n}, {cfg.action_dim}), got {a0.shape}")

    ts = np.empty(n, dtype=np.int64)
    eps = np.empty((n, cfg.action_dim))
    for i in range(n):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((rng_seed, i))))
        ts[i] = rng.integers(1, schedule.num_steps + 1)
        eps[i] = rng.standard_normal(cfg.action_dim)
    abar = schedule.alpha_bars[ts - 1][:, None]
    noisy = np.sqrt(abar) * a0 + np.sqrt(1.0 - abar) * eps

    patches = np.stack([extract_patches(obs, cfg.patch_size, dtype=dtype) for obs, _ in batch])
    pt = _wrap_params(params, requires_grad=requires_grad)
    obs_tokens = _embed_obs_tokens(pt, ad.Tensor(patches))
    pred = _forward_core(cfg, pt, noisy.astype(dtype), ts, obs_tokens)
    err = ad.sub(ad.Tensor(eps.astype(dtype)), pred)
    return ad.mean(ad.mul(err, err)), pt


def loss_and_gradients(
    params: DenoiserParams,
    batch: list[tuple[ImageGrid, np.ndarray]],
    schedule: NoiseSchedule,
    rng_seed: int,
) -> tuple[float, dict[str, np.ndarray]]:
    """Noise-prediction MSE and exact reverse-mode gradients for one batch.

    Per example i: t_i uniform in [1, T] and eps_i ~ N(0, I) are drawn from a
    generator keyed by (rng_seed, i); the noisy action is
    sqrt(abar_t) * a0 + sqrt(1 - abar_t) * eps, and the loss is the mean over
    the batch of ||eps - prediction||^2 / action_dim.
    """
    loss, pt = _build_loss(params, batch, schedule, rng_seed, requires_grad=True)
    ad.backward(loss)
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in pt.items()
    }
    return float(loss.data), grads


def batch_loss(
    params: DenoiserParams,
    batch: list[tuple[ImageGrid, np.ndarray]],
    schedule: NoiseSchedule,
    rng_seed: int,
) -> float:
    """Same objective as loss_and_gradients, without the backward pass."""
    loss, _ = _build_loss(params, batch, schedule, rng_seed, requires_grad=False)
    return float(loss.data)
