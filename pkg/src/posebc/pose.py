"""Pose data model: keypoint frames, delta actions, MPJPE, displacement stats.

Coordinates are stored normalized to [0, 1] by the source image dimensions.
MPJPE is reported in normalized units; displacement statistics are reported in
pixels (std is the population standard deviation, range is max - min).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, DimensionError, UsageError

NUM_JOINTS = 18
ACTION_DIM = 2 * NUM_JOINTS

JOINT_NAMES = (
    "Nose", "Neck", "RShoulder", "RElbow", "RWrist", "LShoulder", "LElbow",
    "LWrist", "RHip", "RKnee", "RAnkle", "LHip", "LKnee", "LAnkle",
    "REye", "LEye", "REar", "LEar",
)

JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}
assert JOINT_INDEX["RWrist"] == 4 and JOINT_INDEX["LWrist"] == 7


def joint_id(name: str) -> int:
    """Map a joint name from the fixed 18-joint roster to its index."""
    try:
        return JOINT_INDEX[name]
    except KeyError:
        raise UsageError(f"unknown joint name {name!r}; expected one of {JOINT_NAMES}") from None


@dataclass
class KeypointFrame:
    """All skeletons of one video frame: persons (P, 18, 2) in [0, 1]."""

    persons: np.ndarray
    facilitator_index: int = 0

    def __post_init__(self):
        self.persons = np.asarray(self.persons, dtype=np.float64)
        if self.persons.ndim != 3 or self.persons.shape[1:] != (NUM_JOINTS, 2):
            raise DimensionError(f"persons must have shape (P, 18, 2), got {self.persons.shape}")
        if self.persons.shape[0] > 0 and not 0 <= self.facilitator_index < self.persons.shape[0]:
            raise DimensionError(
                f"facilitator_index {self.facilitator_index} out of range for "
                f"{self.persons.shape[0]} persons"
            )

    @property
    def num_persons(self) -> int:
        return self.persons.shape[0]

    @property
    def facilitator(self) -> np.ndarray:
        return self.persons[self.facilitator_index]


@dataclass
class FacilitatorTrace:
    """Facilitator skeleton over time: frames (N, 18, 2), sampled at frame_rate."""

    frames: np.ndarray
    frame_rate: float = 30.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (NUM_JOINTS, 2):
            raise DimensionError(f"frames must have shape (N, 18, 2), got {self.frames.shape}")
        if len(self.frames) < 1:
            raise UsageError("trace must contain at least one frame")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class DemoDataset:
    """Ordered (observation reference, action) pairs plus session metadata.

    Pair f couples the observation of frame f with the facilitator delta from
    frame f to f+1. Observation references are file paths relative to root.
    """

    obs_refs: list[str]
    actions: np.ndarray
    session_id: str
    obs_mode: str
    frame_rate: float
    root: Path | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.actions.ndim != 2 or self.actions.shape[1] != ACTION_DIM:
            raise DimensionError(f"actions must have shape (n, 36), got {self.actions.shape}")
        if len(self.obs_refs) != len(self.actions):
            raise DimensionError(
                f"{len(self.obs_refs)} observation refs vs {len(self.actions)} actions"
            )

    def __len__(self) -> int:
        return len(self.actions)

    def equals(self, other: "DemoDataset") -> bool:
        return (
            self.obs_refs == other.obs_refs
            and np.array_equal(self.actions, other.actions)
            and self.session_id == other.session_id
            and self.obs_mode == other.obs_mode
            and self.frame_rate == other.frame_rate
        )


def compute_deltas(trace: FacilitatorTrace) -> np.ndarray:
    """Per-frame action vectors: row f is frame[f+1] - frame[f], flattened to 36."""
    frames = trace.frames
    if len(frames) < 2:
        raise UsageError("need at least 2 frames to compute deltas")
    diffs = frames[1:] - frames[:-1]
    return diffs.reshape(len(frames) - 1, ACTION_DIM)


def apply_delta(frame: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Advance one facilitator skeleton (18, 2) by an action vector (36,)."""
    frame = np.asarray(frame, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if frame.shape != (NUM_JOINTS, 2):
        raise DimensionError(f"frame must have shape (18, 2), got {frame.shape}")
    if action.shape != (ACTION_DIM,):
        raise DimensionError(f"action must have shape (36,), got {action.shape}")
    if not (np.isfinite(frame).all() and np.isfinite(action).all()):
        raise UsageError("apply_delta requires finite inputs")
    return frame + action.reshape(NUM_JOINTS, 2)


def mpjpe(predicted: np.ndarray, ground_truth: np.ndarray) -> float:
    """Mean Euclidean distance between corresponding joints, over all frames.

    Accepts single skeletons (18, 2) or stacks (N, 18, 2); 0 iff inputs match.
    """
    pred = np.asarray(predicted, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.shape[-2:] != (NUM_JOINTS, 2) or pred.ndim not in (2, 3):
        raise DimensionError(f"expected (18, 2) or (N, 18, 2), got {pred.shape}")
    dists = np.linalg.norm(pred - gt, axis=-1)
    return float(np.mean(dists))


def displacement_stats(
    trace: FacilitatorTrace, joint: int, pixel_scale: tuple[float, float]
) -> dict[str, float]:
    """Pixel-space displacement magnitude stats for one joint.

    Returns population mean/std and range (max - min) of the per-frame
    Euclidean displacement magnitudes, with x scaled by width and y by height.
    """
    width, height = pixel_scale
    if width <= 0 or height <= 0:
        raise UsageError(f"pixel_scale must be positive, got {pixel_scale}")
    if not 0 <= joint < NUM_JOINTS:
        raise DimensionError(f"joint index {joint} outside [0, 18)")
    frames = trace.frames
    if len(frames) < 2:
        raise UsageError("need at least 2 frames for displacement statistics")
    deltas = frames[1:, joint, :] - frames[:-1, joint, :]
    mags = np.hypot(deltas[:, 0] * width, deltas[:, 1] * height)
    return {
        "mean": float(np.mean(mags)),
        "std": float(np.std(mags)),
        "range": float(np.max(mags) - np.min(mags)),
    }


# --- keypoint / session file formats ---------------------------------------

KEYPOINT_HEADER = "frame,person,joint,x,y"


def write_keypoints(path: Path, frames: list[KeypointFrame]) -> None:
    """Write frames as UTF-8 text, one row per joint per person per frame."""
    lines = [KEYPOINT_HEADER]
    for f, frame in enumerate(frames):
        for p in range(frame.num_persons):
            for j in range(NUM_JOINTS):
                x, y = frame.persons[p, j]
                lines.append(f"{f},{p},{j},{float(x)!r},{float(y)!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_keypoints(path: Path, facilitator_index: int = 0) -> list[KeypointFrame]:
    """Parse a keypoint file back into per-frame KeypointFrame objects."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != KEYPOINT_HEADER:
        raise DataFormatError(f"{path}: missing keypoint header {KEYPOINT_HEADER!r}")
    rows: dict[int, dict[int, np.ndarray]] = {}
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 5:
            raise DataFormatError(f"{path}: malformed keypoint row {ln!r}")
        f, p, j = int(parts[0]), int(parts[1]), int(parts[2])
        rows.setdefault(f, {}).setdefault(p, np.zeros((NUM_JOINTS, 2)))[j] = (
            float(parts[3]),
            float(parts[4]),
        )
    frames = []
    for f in sorted(rows):
        persons = np.stack([rows[f][p] for p in sorted(rows[f])])
        frames.append(KeypointFrame(persons, facilitator_index=facilitator_index))
    return frames


def write_session_meta(path: Path, meta: dict) -> None:
    """Write the sidecar metadata file as key=value text."""
    lines = [f"{k}={v}" for k, v in meta.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_session_meta(path: Path) -> dict[str, str]:
    meta = {}
    for ln in Path(path).read_text(encoding="utf-8").splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        if "=" not in ln:
            raise DataFormatError(f"{path}: malformed metadata line {ln!r}")
        key, value = ln.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def trace_from_frames(frames: list[KeypointFrame], frame_rate: float = 30.0) -> FacilitatorTrace:
    """Extract the facilitator's skeleton sequence from a frame list."""
    if not frames:
        raise UsageError("no frames given")
    stack = np.stack([f.facilitator for f in frames])
    return FacilitatorTrace(stack, frame_rate=frame_rate)
