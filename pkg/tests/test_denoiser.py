import numpy as np
import pytest

from posebc.denoiser import (
    DenoiserConfig,
    batch_loss,
    extract_patches,
    init_params,
    loss_and_gradients,
    param_count,
    predict_noise,
    sinusoidal_embedding,
)
from posebc.errors import ConfigError, DimensionError, NumericError, UsageError
from posebc.observation import ImageGrid
from posebc.schedule import build_linear_schedule

TINY = DenoiserConfig(embed_dim=8, num_layers=1, num_heads=1, patch_size=64, max_timestep=10)
TINY_MLP = DenoiserConfig(
    arch="mlp", embed_dim=8, num_layers=1, num_heads=1, patch_size=64,
    mlp_hidden=(16, 16), max_timestep=10,
)


def rand_obs(seed):
    rng = np.random.default_rng(seed)
    return ImageGrid(rng.uniform(0, 1, (128, 128, 3)).astype(np.float32))


def straight_line_forward(params, action, t, obs):
    """Independent loop-based reimplementation of the tiny transformer."""
    cfg = params.config
    w = {k: v.astype(np.float64) for k, v in params.tensors.items()}
    d = cfg.embed_dim

    def layer_norm(x, g, b):
        mu = x.mean()
        var = ((x - mu) ** 2).mean()
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    def gelu(x):
        c = np.sqrt(2.0 / np.pi)
        return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))

    patches = extract_patches(obs, cfg.patch_size, dtype=np.float64)
    obs_tok = ((patches @ w["obs_patch.w"] + w["obs_patch.b"]) * w["obs_patch.gain"]).mean(axis=0)
    t_tok = sinusoidal_embedding([t], d)[0] @ w["time_embed.w"] + w["time_embed.b"]
    a_tok = np.asarray(action, dtype=np.float64) @ w["act_embed.w"] + w["act_embed.b"]
    x = np.stack([obs_tok, t_tok, a_tok])
    heads = cfg.num_heads
    dh = d // heads
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}."
        h = np.stack([layer_norm(x[i], w[p + "ln1.g"], w[p + "ln1.b"]) for i in range(3)])
        q = h @ w[p + "attn.wq"] + w[p + "attn.bq"]
        k = h @ w[p + "attn.wk"]
        v = h @ w[p + "attn.wv"] + w[p + "attn.bv"]
        ctx = np.zeros((3, d))
        for head in range(heads):
            sl = slice(head * dh, (head + 1) * dh)
            scores = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
            for i in range(3):
                e = np.exp(scores[i] - scores[i].max())
                attn = e / e.sum()
                ctx[i, sl] = attn @ v[:, sl]
        x = x + (ctx @ w[p + "attn.wo"] + w[p + "attn.bo"])
        h2 = np.stack([layer_norm(x[i], w[p + "ln2.g"], w[p + "ln2.b"]) for i in range(3)])
        m = gelu(h2 @ w[p + "mlp.w1"] + w[p + "mlp.b1"]) @ w[p + "mlp.w2"] + w[p + "mlp.b2"]
        x = x + m
    y = layer_norm(x[2], w["final_ln.g"], w["final_ln.b"])
    return y @ w["head.w"] + w["head.b"]


def test_param_count_matches_construction():
    for cfg in (TINY, TINY_MLP, DenoiserConfig(), DenoiserConfig(arch="mlp")):
        params = init_params(cfg, 0)
        assert param_count(cfg) == sum(v.size for v in params.tensors.values())


def test_config_validation():
    with pytest.raises(ConfigError):
        DenoiserConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ConfigError):
        DenoiserConfig(patch_size=17)
    with pytest.raises(ConfigError):
        DenoiserConfig(arch="cnn")


def test_zero_params_give_zero_output():
    params = init_params(TINY, 0)
    for k in params.tensors:
        params.tensors[k] = np.zeros_like(params.tensors[k])
    out = predict_noise(params, np.ones(36), 3, rand_obs(0))
    assert np.all(out == 0.0)


def test_predict_noise_deterministic():
    params = init_params(TINY, 1)
    a = np.random.default_rng(2).standard_normal(36)
    obs = rand_obs(3)
    out1 = predict_noise(params, a, 5, obs)
    out2 = predict_noise(params, a, 5, obs)
    assert np.array_equal(out1, out2)


def test_forward_matches_straight_line_oracle():
    params = init_params(TINY, 4).astype(np.float64)
    rng = np.random.default_rng(5)
    for t in (1, 4, 10):
        a = rng.standard_normal(36)
        obs = rand_obs(t)
        got = predict_noise(params, a, t, obs)
        want = straight_line_forward(params, a, t, obs)
        assert np.abs(got - want).max() < 1e-5


def test_predict_noise_input_validation():
    params = init_params(TINY, 0)
    obs = rand_obs(0)
    with pytest.raises(DimensionError):
        predict_noise(params, np.zeros(35), 1, obs)
    with pytest.raises(IndexError):
        predict_noise(params, np.zeros(36), 0, obs)
    with pytest.raises(IndexError):
        predict_noise(params, np.zeros(36), 11, obs)
    with pytest.raises(DimensionError):
        predict_noise(params, np.zeros(36), 1, ImageGrid(np.zeros((64, 64, 3), dtype=np.float32)))
    params.tensors["head.w"][0, 0] = np.nan
    with pytest.raises(NumericError):
        predict_noise(params, np.zeros(36), 1, obs)


def test_loss_zero_params_matches_chi_square_expectation():
    # theta == 0: loss is mean ||eps||^2 / 36, expectation 1
    sched = build_linear_schedule(10, 1e-4, 0.05)
    params = init_params(TINY, 0)
    for k in params.tensors:
        params.tensors[k] = np.zeros_like(params.tensors[k])
    obs = rand_obs(7)
    losses = []
    for chunk in range(50):
        batch = [(obs, np.zeros(36))] * 200
        losses.append(batch_loss(params, batch, sched, 1000 + chunk))
    assert abs(np.mean(losses) - 1.0) < 0.05


def test_duplicate_example_same_loss():
    sched = build_linear_schedule(10, 1e-4, 0.05)
    params = init_params(TINY, 3)
    obs = rand_obs(1)
    a = np.random.default_rng(0).standard_normal(36)
    single, _ = loss_and_gradients(params, [(obs, a)], sched, 42)
    # same rng key per position would change draws; duplicate via same seed stream
    dup = batch_loss(params, [(obs, a)], sched, 42)
    assert single == dup


def test_empty_batch_rejected():
    sched = build_linear_schedule(10, 1e-4, 0.05)
    with pytest.raises(UsageError):
        loss_and_gradients(init_params(TINY, 0), [], sched, 0)


def _block_relative_errors(cfg, seed, n_coords=6):
    """Central finite differences (h=1e-3, float64) per parameter block."""
    from posebc.denoiser import _build_loss

    sched = build_linear_schedule(10, 1e-4, 0.05)
    params = init_params(cfg, seed).astype(np.float64)
    rng = np.random.default_rng(seed + 100)
    batch = [(rand_obs(seed * 7 + i), rng.standard_normal(36)) for i in range(3)]
    _, grads = loss_and_gradients(params, batch, sched, 99)
    h = 1e-3
    coord_rng = np.random.default_rng(seed)
    rels = {}
    for name, tensor in params.tensors.items():
        flat = tensor.reshape(-1)
        gflat = grads[name].reshape(-1)
        idxs = coord_rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        idxs = np.unique(np.concatenate([idxs, np.argsort(-np.abs(gflat))[:2]]))
        ga, gf = [], []
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = _build_loss(params, batch, sched, 99, requires_grad=False)
            flat[i] = orig - h
            lm, _ = _build_loss(params, batch, sched, 99, requires_grad=False)
            flat[i] = orig
            gf.append((float(lp.data) - float(lm.data)) / (2 * h))
            ga.append(gflat[i])
        ga, gf = np.asarray(ga), np.asarray(gf)
        rels[name] = float(
            np.linalg.norm(ga - gf) / max(np.linalg.norm(ga), np.linalg.norm(gf), 1e-12)
        )
    return rels


@pytest.mark.parametrize("cfg", [TINY, TINY_MLP], ids=["transformer", "mlp"])
def test_gradients_match_finite_differences(cfg):
    rels = _block_relative_errors(cfg, seed=0)
    assert max(rels.values()) < 1e-4, rels


def test_batch_permutation_equivariance():
    from posebc.denoiser import _forward_core, _embed_obs_tokens, _wrap_params, extract_patches
    import posebc.autodiff as ad

    params = init_params(TINY, 9)
    rng = np.random.default_rng(3)
    actions = rng.standard_normal((4, 36)).astype(np.float32)
    ts = np.array([1, 3, 7, 10])
    patches = np.stack(
        [extract_patches(rand_obs(i), TINY.patch_size, dtype=np.float32) for i in range(4)]
    )
    pt = _wrap_params(params, requires_grad=False)
    out = _forward_core(TINY, pt, actions, ts, _embed_obs_tokens(pt, ad.Tensor(patches))).data
    perm = np.array([2, 0, 3, 1])
    out_p = _forward_core(
        TINY, pt, actions[perm], ts[perm], _embed_obs_tokens(pt, ad.Tensor(patches[perm]))
    ).data
    assert np.array_equal(out[perm], out_p)


def test_seeded_init_reproducible():
    a = init_params(TINY, 123)
    b = init_params(TINY, 123)
    c = init_params(TINY, 124)
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
    assert any(not np.array_equal(a.tensors[k], c.tensors[k]) for k in a.tensors)
