"""Synthetic multiparty scenes with a known observation -> action law.

One facilitator (person 0) faces a row of participants. The active speaker
waves a wrist; the facilitator's wrists track a target proportional to the
speaker's visible wrist offset (scaled per profile and per speaker), the
head leans toward the speaker's seat, and every joint carries small seeded
jitter. Facilitator deltas are therefore a function of what is visible in
the current frame, so both observation modes can support learning.

Profile constants are invented stand-ins chosen so that the teacher-like
profile has the largest displacement range (rare large bursts) while the
music-teacher-like profile has the largest mean/std (fast sustained waving).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .observation import (
    ImageGrid,
    ObsMode,
    PERSON_PALETTE,
    make_observation,
    resize_bilinear,
    write_netpbm,
)
from .pose import (
    ACTION_DIM,
    NUM_JOINTS,
    DemoDataset,
    FacilitatorTrace,
    KeypointFrame,
    compute_deltas,
    read_keypoints,
    read_session_meta,
    trace_from_frames,
    write_keypoints,
    write_session_meta,
)

CANVAS_W = 1920
CANVAS_H = 960

# Upper-body-forward template, pixel offsets from the neck (y grows downward).
SKELETON_TEMPLATE = np.array(
    [
        (0, -42),    # Nose
        (0, 0),      # Neck
        (-38, 6),    # RShoulder
        (-52, 64),   # RElbow
        (-44, 118),  # RWrist
        (38, 6),     # LShoulder
        (52, 64),    # LElbow
        (44, 118),   # LWrist
        (-22, 120),  # RHip
        (-26, 196),  # RKnee
        (-28, 262),  # RAnkle
        (22, 120),   # LHip
        (26, 196),   # LKnee
        (28, 262),   # LAnkle
        (-8, -50),   # REye
        (8, -50),    # LEye
        (-17, -44),  # REar
        (17, -44),   # LEar
    ],
    dtype=np.float64,
)

NOSE, NECK, RELBOW, RWRIST, LELBOW, LWRIST = 0, 1, 3, 4, 6, 7
DYNAMIC_JOINTS = (NOSE, NECK, RELBOW, RWRIST, LELBOW, LWRIST)

DRIVER_AMPLITUDE_PX = 150.0
SPEAKER_MULTIPLIERS = (1.0, 0.85, 1.15, 0.9, 1.08)
TRACK_GAIN = 0.35

RAW_JOINT_RADIUS = 20
RAW_BONE_RADIUS = 8

PROFILES = {
    "teacher_like": {"wrist_amplitude_px": 18.0, "gesture_freq_hz": 0.25, "burst_multiplier": 30.0,
                     "rotation_period": 60, "gain_mod_depth": 0.0, "burst_frames": 1, "burst_every": 25},
    "musician_like": {"wrist_amplitude_px": 30.0, "gesture_freq_hz": 0.45, "burst_multiplier": 1.0,
                      "rotation_period": 60, "gain_mod_depth": 0.0, "burst_frames": 1, "burst_every": 25},
    "music_teacher_like": {"wrist_amplitude_px": 120.0, "gesture_freq_hz": 0.55, "burst_multiplier": 1.0,
                           "rotation_period": 60, "gain_mod_depth": 0.6, "burst_frames": 1, "burst_every": 25},
}


@dataclass(frozen=True)
class SceneConfig:
    num_participants: int = 6
    duration_frames: int = 300
    fps: float = 30.0
    seed: int = 0
    profile: str = "teacher_like"
    wrist_amplitude_px: float | None = None
    gesture_freq_hz: float | None = None
    burst_multiplier: float | None = None
    rotation_period: int | None = None
    gain_mod_depth: float | None = None
    burst_frames: int | None = None
    burst_every: int | None = None
    jitter_px: float = 0.15
    clutter_level: float = 0.5

    def __post_init__(self):
        if self.num_participants < 2:
            raise ConfigError("need at least 2 participants (facilitator + 1)")
        if self.duration_frames < 1 or self.fps <= 0:
            raise ConfigError("duration_frames and fps must be positive")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {self.profile!r}")
        if not 0.0 <= self.clutter_level <= 1.0:
            raise ConfigError("clutter_level must lie in [0, 1]")
        if self.jitter_px < 0:
            raise ConfigError("jitter_px must be >= 0")

    def _resolved(self, name: str) -> float:
        value = getattr(self, name)
        return PROFILES[self.profile][name] if value is None else value

    @property
    def amplitude(self) -> float:
        return float(self._resolved("wrist_amplitude_px"))

    @property
    def frequency(self) -> float:
        return float(self._resolved("gesture_freq_hz"))

    @property
    def burst(self) -> float:
        return float(self._resolved("burst_multiplier"))

    @property
    def rotation(self) -> int:
        return int(self._resolved("rotation_period"))

    @property
    def gain_mod(self) -> float:
        return float(self._resolved("gain_mod_depth"))

    @property
    def burst_len(self) -> int:
        return int(self._resolved("burst_frames"))

    @property
    def burst_rarity(self) -> int:
        return int(self._resolved("burst_every"))

    @property
    def session_id(self) -> str:
        return f"{self.profile}-s{self.seed}"


@dataclass
class Session:
    config: SceneConfig
    frames: list[KeypointFrame]
    trace: FacilitatorTrace


def _rest_positions(num_participants: int) -> np.ndarray:
    rest = np.empty((num_participants, NUM_JOINTS, 2))
    rest[0] = SKELETON_TEMPLATE + np.array([0.5 * CANVAS_W, 0.66 * CANVAS_H])
    xs = np.linspace(0.15, 0.85, num_participants - 1) * CANVAS_W
    for p in range(1, num_participants):
        rest[p] = SKELETON_TEMPLATE + np.array([xs[p - 1], 0.28 * CANVAS_H])
    return rest


def generate_session(cfg: SceneConfig) -> Session:
    """Deterministically generate keypoint frames and the facilitator trace."""
    n_frames = cfg.duration_frames
    P = cfg.num_participants
    rest = _rest_positions(P)
    anchors_x = np.linspace(0.15, 0.85, P - 1) * CANVAS_W

    jitter_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.seed, 11))))
    jitter = cfg.jitter_px * jitter_rng.standard_normal((n_frames, P, NUM_JOINTS, 2))

    g_u = cfg.amplitude / DRIVER_AMPLITUDE_PX
    g_v = cfg.amplitude * max(cfg.burst - 1.0, 0.0) / DRIVER_AMPLITUDE_PX
    lean_gain = min(0.10 * (cfg.amplitude / 26.0), 0.18)

    state = rest[0].copy()
    frames_px = np.empty((n_frames, P, NUM_JOINTS, 2))
    for f in range(n_frames):
        phase = 2.0 * np.pi * cfg.frequency * f / cfg.fps
        speaker = 1 + (f // cfg.rotation) % (P - 1)
        burst_on = (f % cfg.rotation) < cfg.burst_len and (f // cfg.rotation) % cfg.burst_rarity == 0

        mod = 1.0 + cfg.gain_mod * np.sin(2.0 * np.pi * 0.05 * f / cfg.fps + 0.7)
        u = mod * DRIVER_AMPLITUDE_PX * np.array(
            [np.sin(phase), -0.5 - 0.3 * np.sin(0.7 * phase + 1.1)]
        )
        v = np.array([25.0 * np.sin(2.3 * phase), -95.0]) if burst_on else np.zeros(2)

        persons = rest.copy()
        persons[speaker, RWRIST] += u
        persons[speaker, RELBOW] += 0.5 * u
        persons[speaker, LWRIST] += v
        persons[speaker, LELBOW] += 0.5 * v
        persons[0] = state

        frames_px[f] = persons + jitter[f]

        # advance the facilitator toward targets driven by this frame
        mult = SPEAKER_MULTIPLIERS[(speaker - 1) % len(SPEAKER_MULTIPLIERS)]
        resp = mult * (g_u * u + g_v * v)
        mirrored = np.array([-0.75 * resp[0], 0.75 * resp[1]])
        lean = lean_gain * (anchors_x[speaker - 1] - rest[0, NECK, 0])
        targets = {
            RWRIST: rest[0, RWRIST] + resp,
            RELBOW: rest[0, RELBOW] + 0.5 * resp,
            LWRIST: rest[0, LWRIST] + mirrored,
            LELBOW: rest[0, LELBOW] + 0.5 * mirrored,
            NOSE: rest[0, NOSE] + np.array([lean, 0.0]),
            NECK: rest[0, NECK] + np.array([0.6 * lean, 0.0]),
        }
        for j, target in targets.items():
            state[j] = state[j] + TRACK_GAIN * (target - state[j])

    frames_norm = frames_px / np.array([CANVAS_W, CANVAS_H])
    if frames_norm.min() < 0.0 or frames_norm.max() > 1.0:
        raise ConfigError(
            "scene parameters push keypoints outside [0, 1]; reduce amplitudes"
        )
    frames = [KeypointFrame(frames_norm[f], facilitator_index=0) for f in range(n_frames)]
    trace = FacilitatorTrace(frames_norm[:, 0].copy(), frame_rate=cfg.fps)
    return Session(cfg, frames, trace)


# --- raw-style rendering ------------------------------------------------------


@lru_cache(maxsize=4)
def _background(seed: int, clutter_level: float) -> np.ndarray:
    bg = np.full((CANVAS_H, CANVAS_W, 3), 0.5, dtype=np.float32)
    if clutter_level <= 0.0:
        return bg
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 101))))
    coarse = rng.uniform(-1.0, 1.0, size=(CANVAS_H // 64, CANVAS_W // 64, 3)).astype(np.float32)
    noise = resize_bilinear(ImageGrid((coarse + 1.0) / 2.0), CANVAS_W, CANVAS_H).pixels
    bg += 0.18 * clutter_level * (2.0 * noise - 1.0)
    for _ in range(int(round(24 * clutter_level))):
        w = int(rng.integers(60, 320))
        h = int(rng.integers(40, 200))
        x0 = int(rng.integers(0, CANVAS_W - w))
        y0 = int(rng.integers(0, CANVAS_H - h))
        shade = rng.uniform(0.25, 0.75)
        color = np.clip(shade + rng.uniform(-0.06, 0.06, size=3), 0.0, 1.0).astype(np.float32)
        bg[y0 : y0 + h, x0 : x0 + w] = color
    return np.clip(bg, 0.0, 1.0)


_DISC_OFFSETS = {}


def _disc_offsets(radius: int) -> np.ndarray:
    if radius not in _DISC_OFFSETS:
        r = np.arange(-radius, radius + 1)
        dy, dx = np.meshgrid(r, r, indexing="ij")
        keep = dy * dy + dx * dx <= radius * radius
        _DISC_OFFSETS[radius] = np.stack([dy[keep], dx[keep]], axis=1)
    return _DISC_OFFSETS[radius]


def _paint(canvas: np.ndarray, centers_yx: np.ndarray, radius: int, color: np.ndarray) -> None:
    h, w = canvas.shape[:2]
    px = (centers_yx[:, None, :] + _disc_offsets(radius)[None, :, :]).reshape(-1, 2)
    ok = (px[:, 0] >= 0) & (px[:, 0] < h) & (px[:, 1] >= 0) & (px[:, 1] < w)
    px = px[ok]
    canvas[px[:, 0], px[:, 1]] = color


def _draw_thick_skeleton(canvas: np.ndarray, skeleton_px: np.ndarray, color: np.ndarray) -> None:
    from .observation import BONES

    pts = skeleton_px.astype(np.int64)
    line_px = []
    for a, b in BONES:
        (x0, y0), (x1, y1) = pts[a], pts[b]
        n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
        xs = np.rint(np.linspace(x0, x1, n)).astype(np.int64)
        ys = np.rint(np.linspace(y0, y1, n)).astype(np.int64)
        line_px.append(np.stack([ys, xs], axis=1))
    _paint(canvas, np.concatenate(line_px), RAW_BONE_RADIUS, color)
    _paint(canvas, pts[:, ::-1], RAW_JOINT_RADIUS, color)


def render_raw(frame: KeypointFrame, cfg: SceneConfig) -> ImageGrid:
    """Stand-in for a wide-angle photograph: skeletons over static clutter."""
    canvas = _background(cfg.seed, cfg.clutter_level).copy()
    scale = np.array([CANVAS_W, CANVAS_H], dtype=np.float64)
    from .observation import draw_order

    for p in draw_order(frame):
        color = 0.55 * np.asarray(PERSON_PALETTE[p % len(PERSON_PALETTE)], dtype=np.float32)
        _draw_thick_skeleton(canvas, frame.persons[p] * scale, color)
    return ImageGrid(canvas)


# --- dataset export / import --------------------------------------------------

ACTIONS_HEADER = "frame," + ",".join(f"j{j}_dx,j{j}_dy" for j in range(NUM_JOINTS))


def _obs_ref(f: int) -> str:
    return f"obs/frame_{f:05d}.ppm"


def export_dataset(session: Session, mode: ObsMode, out_dir: Path) -> DemoDataset:
    """Materialize (observation, action) pairs on disk; one pair per transition."""
    out_dir = Path(out_dir)
    (out_dir / "obs").mkdir(parents=True, exist_ok=True)
    cfg = session.config

    write_keypoints(out_dir / "keypoints.csv", session.frames)
    write_session_meta(
        out_dir / "session.txt",
        {
            "facilitator_index": 0,
            "fps": f"{cfg.fps:g}",
            "width": CANVAS_W,
            "height": CANVAS_H,
            "session_id": cfg.session_id,
            "obs_mode": mode.value,
        },
    )

    actions = compute_deltas(session.trace)
    lines = [ACTIONS_HEADER]
    for f, row in enumerate(actions):
        lines.append(f"{f}," + ",".join(repr(float(v)) for v in row))
    (out_dir / "actions.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    refs = []
    for f in range(len(actions)):
        if mode is ObsMode.RAW:
            obs = make_observation(mode, render_raw(session.frames[f], cfg))
        else:
            obs = make_observation(mode, session.frames[f])
        ref = _obs_ref(f)
        write_netpbm(out_dir / ref, obs)
        refs.append(ref)

    return DemoDataset(
        obs_refs=refs,
        actions=actions,
        session_id=cfg.session_id,
        obs_mode=mode.value,
        frame_rate=cfg.fps,
        root=out_dir,
    )


def load_dataset(out_dir: Path) -> DemoDataset:
    """Re-import a dataset written by export_dataset."""
    out_dir = Path(out_dir)
    try:
        meta = read_session_meta(out_dir / "session.txt")
        text = (out_dir / "actions.csv").read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read dataset at {out_dir}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != ACTIONS_HEADER:
        raise DataFormatError(f"{out_dir / 'actions.csv'}: missing actions header")
    refs = []
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 1 + ACTION_DIM:
            raise DataFormatError(f"{out_dir / 'actions.csv'}: malformed row {ln[:60]!r}")
        f = int(parts[0])
        refs.append(_obs_ref(f))
        rows.append([float(v) for v in parts[1:]])
        if not (out_dir / refs[-1]).exists():
            raise DataFormatError(f"missing observation file {out_dir / refs[-1]}")
    return DemoDataset(
        obs_refs=refs,
        actions=np.array(rows),
        session_id=meta.get("session_id", "unknown"),
        obs_mode=meta.get("obs_mode", "plotted"),
        frame_rate=float(meta.get("fps", 30.0)),
        root=out_dir,
    )


def load_trace(out_dir: Path) -> FacilitatorTrace:
    out_dir = Path(out_dir)
    meta = read_session_meta(out_dir / "session.txt")
    frames = read_keypoints(out_dir / "keypoints.csv", int(meta.get("facilitator_index", 0)))
    return trace_from_frames(frames, frame_rate=float(meta.get("fps", 30.0)))


def load_frames(out_dir: Path) -> list[KeypointFrame]:
    out_dir = Path(out_dir)
    meta = read_session_meta(out_dir / "session.txt")
    return read_keypoints(out_dir / "keypoints.csv", int(meta.get("facilitator_index", 0)))
