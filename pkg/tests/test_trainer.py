import numpy as np
import pytest

from posebc.denoiser import DenoiserConfig, init_params
from posebc.errors import (
    CheckpointChecksumError,
    CheckpointMagicError,
    CheckpointVersionError,
    ConfigError,
    DimensionError,
    UsageError,
)
from posebc.observation import ImageGrid
from posebc.pose import ACTION_DIM, DemoDataset
from posebc.schedule import NoiseSchedule, build_linear_schedule
from posebc.trainer import (
    DenoiserCheckpoint,
    TrainConfig,
    forward_diffuse,
    fresh_checkpoint,
    load_checkpoint,
    save_checkpoint,
    split_dataset,
    train,
)

TINY = DenoiserConfig(embed_dim=8, num_layers=1, num_heads=1, patch_size=64, max_timestep=6)
SQRT_072 = 0.8485281374238570  # sqrt(0.72)
SQRT_028 = 0.5291502622129181  # sqrt(0.28)


def make_dataset(n=20, seed=0, constant=None):
    rng = np.random.default_rng(seed)
    actions = (
        np.tile(constant, (n, 1)) if constant is not None else rng.normal(0, 0.01, (n, ACTION_DIM))
    )
    imgs = [
        ImageGrid(rng.uniform(0, 1, (128, 128, 3)).astype(np.float32)) for _ in range(n)
    ]

    def loader(ds, i):
        return imgs[int(ds.meta.get("frame_offset", 0)) + i]

    ds = DemoDataset(
        obs_refs=[f"obs/frame_{i:05d}.ppm" for i in range(n)],
        actions=actions,
        session_id="synthetic",
        obs_mode="plotted",
        frame_rate=30.0,
    )
    return ds, loader


def test_forward_diffuse_zero_signal_and_identity():
    sched = build_linear_schedule(2, 0.1, 0.2)
    eps = np.random.default_rng(0).standard_normal(ACTION_DIM)
    out = forward_diffuse(np.zeros(ACTION_DIM), 2, eps, sched)
    assert np.allclose(out, np.sqrt(1 - 0.72) * eps, atol=1e-15)

    # injected table with abar == 1 reduces to the identity on a0
    ones = np.ones(1)
    inj = NoiseSchedule(1, ones * 1e-9, ones, ones, np.sqrt(ones * 1e-9))
    a0 = np.random.default_rng(1).standard_normal(ACTION_DIM)
    assert np.array_equal(forward_diffuse(a0, 1, eps, inj), a0)


def test_forward_diffuse_hand_values():
    sched = build_linear_schedule(2, 0.1, 0.2)  # abar_2 = 0.72
    a0 = np.zeros(ACTION_DIM)
    a0[0] = 1.0
    eps = np.zeros(ACTION_DIM)
    eps[1] = 1.0
    out = forward_diffuse(a0, 2, eps, sched)
    assert out[0] == pytest.approx(SQRT_072, abs=1e-12)
    assert out[1] == pytest.approx(SQRT_028, abs=1e-12)
    assert np.all(out[2:] == 0)


def test_forward_diffuse_errors():
    sched = build_linear_schedule(2, 0.1, 0.2)
    with pytest.raises(IndexError):
        forward_diffuse(np.zeros(ACTION_DIM), 3, np.zeros(ACTION_DIM), sched)
    with pytest.raises(DimensionError):
        forward_diffuse(np.zeros(10), 1, np.zeros(10), sched)


def test_forward_diffuse_monte_carlo_moments():
    sched = build_linear_schedule(50, 1e-4, 0.02)
    rng = np.random.default_rng(2024)
    a0 = rng.normal(0, 1, ACTION_DIM)
    n = 10_000
    for t in (1, 25, 50):
        _, abar, _ = 1.0, float(sched.alpha_bars[t - 1]), None
        draws = np.empty((n, ACTION_DIM))
        for i in range(n):
            draws[i] = forward_diffuse(a0, t, rng.standard_normal(ACTION_DIM), sched)
        tol = 4.0 * np.sqrt((1.0 - abar) / n)
        assert np.abs(draws.mean(axis=0) - np.sqrt(abar) * a0).max() < tol
        var = draws.var(axis=0)
        assert np.all(np.abs(var - (1.0 - abar)) < 0.1 * (1.0 - abar))


def test_split_sizes_and_order():
    ds, _ = make_dataset(10)
    tr, ev = split_dataset(ds, 0.8)
    assert (len(tr), len(ev)) == (8, 2)
    assert np.array_equal(ev.actions, ds.actions[8:])
    assert ev.meta["frame_offset"] == 8

    ds5, _ = make_dataset(5)
    tr, ev = split_dataset(ds5, 0.8)
    assert (len(tr), len(ev)) == (4, 1)


def test_split_no_leakage():
    ds, _ = make_dataset(25)
    tr, ev = split_dataset(ds, 0.8)
    assert max(range(len(tr))) < ev.meta["frame_offset"]


def test_split_degenerate_rejected():
    ds, _ = make_dataset(3)
    with pytest.raises(ConfigError):
        split_dataset(ds, 0.01)
    one, _ = make_dataset(1)
    with pytest.raises(ConfigError):
        split_dataset(one, 0.8)
    empty = DemoDataset([], np.zeros((0, ACTION_DIM)), "s", "plotted", 30.0)
    with pytest.raises(UsageError):
        split_dataset(empty, 0.8)


def test_zero_epochs_returns_initialization():
    ds, loader = make_dataset(10, seed=3)
    sched = build_linear_schedule(6, 0.01, 0.1)
    cfg = TrainConfig(epochs=0, batch_size=4, seed=11)
    ckpt = train(ds, cfg, TINY, sched, obs_loader=loader)
    init = init_params(TINY, 11)
    assert all(np.array_equal(ckpt.params.tensors[k], init.tensors[k]) for k in init.tensors)
    assert np.isfinite(ckpt.final_eval_loss)


def test_training_deterministic_and_serializable(tmp_path):
    ds, loader = make_dataset(12, seed=4)
    sched = build_linear_schedule(6, 0.01, 0.1)
    cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3, seed=5)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(train(ds, cfg, TINY, sched, obs_loader=loader), p1)
    save_checkpoint(train(ds, cfg, TINY, sched, obs_loader=loader), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_metrics_log_format(tmp_path):
    ds, loader = make_dataset(12, seed=4)
    sched = build_linear_schedule(6, 0.01, 0.1)
    path = tmp_path / "metrics.csv"
    train(ds, TrainConfig(epochs=3, batch_size=4, seed=5), TINY, sched,
          metrics_path=path, obs_loader=loader)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,eval_loss"
    assert len(lines) == 4
    for ln in lines[1:]:
        epoch, tr, ev = ln.split(",")
        assert int(epoch) >= 1 and float(tr) > 0 and float(ev) > 0


def test_training_loss_decreases_on_constant_dataset():
    sched = build_linear_schedule(6, 0.01, 0.1)
    const = np.full(ACTION_DIM, 0.004)
    firsts, lasts = [], []
    for seed in (0, 1, 2):
        ds, loader = make_dataset(16, seed=seed, constant=const)
        cfg = TrainConfig(epochs=4, batch_size=8, learning_rate=3e-3, seed=seed)
        import io, tempfile, pathlib

        path = pathlib.Path(tempfile.mkdtemp()) / "m.csv"
        train(ds, cfg, TINY, sched, metrics_path=path, obs_loader=loader)
        rows = [ln.split(",") for ln in path.read_text().splitlines()[1:]]
        firsts.append(float(rows[0][1]))
        lasts.append(float(rows[-1][1]))
    assert np.median(lasts) < np.median(firsts)


def test_checkpoint_round_trip_field_by_field(tmp_path):
    sched = build_linear_schedule(6, 0.01, 0.1)
    ckpt = fresh_checkpoint(TINY, sched, obs_mode="raw", seed=9)
    ckpt.final_train_loss = 0.123456789
    ckpt.action_mean = np.arange(ACTION_DIM, dtype=np.float32) / 1000
    path = tmp_path / "c.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.equals(ckpt)
    # save(load(x)) is byte-identical
    path2 = tmp_path / "c2.ckpt"
    save_checkpoint(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_truncation_detected(tmp_path):
    sched = build_linear_schedule(6, 0.01, 0.1)
    path = tmp_path / "c.ckpt"
    save_checkpoint(fresh_checkpoint(TINY, sched), path)
    data = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-10])
    with pytest.raises(CheckpointChecksumError):
        load_checkpoint(tmp_path / "t.ckpt")


def test_checkpoint_corruption_harness(tmp_path):
    sched = build_linear_schedule(6, 0.01, 0.1)
    path = tmp_path / "c.ckpt"
    save_checkpoint(fresh_checkpoint(TINY, sched), path)
    data = bytearray(path.read_bytes())
    rng = np.random.default_rng(0)
    # flip one byte inside the tensor region (second half of the file)
    for _ in range(5):
        i = int(rng.integers(len(data) // 2, len(data) - 5))
        bad = bytearray(data)
        bad[i] ^= 0xFF
        (tmp_path / "bad.ckpt").write_bytes(bytes(bad))
        with pytest.raises(CheckpointChecksumError):
            load_checkpoint(tmp_path / "bad.ckpt")


def test_checkpoint_bad_magic_and_version(tmp_path):
    sched = build_linear_schedule(6, 0.01, 0.1)
    path = tmp_path / "c.ckpt"
    save_checkpoint(fresh_checkpoint(TINY, sched), path)
    data = bytearray(path.read_bytes())

    bad = bytearray(data)
    bad[:4] = b"NOPE"
    (tmp_path / "m.ckpt").write_bytes(bytes(bad))
    with pytest.raises(CheckpointMagicError):
        load_checkpoint(tmp_path / "m.ckpt")

    ckpt = fresh_checkpoint(TINY, sched)
    ckpt.version = 2
    with pytest.raises(Exception):
        # version is validated on load; write with patched version and fixed CRC
        import struct, zlib

        save_checkpoint(ckpt, tmp_path / "v.ckpt")
        raw = bytearray((tmp_path / "v.ckpt").read_bytes())
        body = raw[:-4]
        (tmp_path / "v.ckpt").write_bytes(
            bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
        )
        load_checkpoint(tmp_path / "v.ckpt")


def test_version_error_is_distinct(tmp_path):
    import struct, zlib

    sched = build_linear_schedule(6, 0.01, 0.1)
    ckpt = fresh_checkpoint(TINY, sched)
    ckpt.version = 99
    path = tmp_path / "v.ckpt"
    save_checkpoint(ckpt, path)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)
