"""Observation images: raw resized scenes and keypoints plotted on white.

Both observation modes produce 128x128 RGB grids with values in [0, 1].
Rasterization constants (bone list, per-person palette, disc radius 2 px,
1 px Bresenham bones) are fixed so identical input yields identical pixels.
Images are stored on disk as binary NetPBM (P5 grayscale / P6 RGB, maxval
255) with round-half-up quantization.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, DimensionError, UsageError
from .pose import NUM_JOINTS, KeypointFrame

OBS_SIZE = 128

# Skeleton edges over the 18-joint roster (17 bones).
BONES = (
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10), (1, 11), (11, 12), (12, 13),
    (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
)

# Per-person RGB colors used when plotting skeletons (facilitator first).
PERSON_PALETTE = (
    (0.86, 0.08, 0.24),
    (0.00, 0.45, 0.74),
    (0.47, 0.67, 0.19),
    (0.93, 0.69, 0.13),
    (0.49, 0.18, 0.56),
    (0.30, 0.75, 0.93),
)

JOINT_RADIUS_PX = 2
assert len(BONES) == 17


class ObsMode(Enum):
    RAW = "raw"
    PLOTTED = "plotted"


def parse_obs_mode(name: str) -> ObsMode:
    try:
        return ObsMode(name.lower())
    except ValueError:
        raise ConfigError(f"obs mode must be 'raw' or 'plotted', got {name!r}") from None


@dataclass
class ImageGrid:
    """H x W x C pixel grid with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise DimensionError(f"pixels must be (H, W, 1|3), got {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def resize_bilinear(img: ImageGrid, out_w: int, out_h: int) -> ImageGrid:
    """Bilinear resample with pixel-center alignment and edge clamping."""
    if out_w < 1 or out_h < 1:
        raise ConfigError(f"target dims must be positive, got {out_w}x{out_h}")
    src = img.pixels
    in_h, in_w = src.shape[:2]

    def axis_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = np.clip(pos - lo, 0.0, 1.0).astype(np.float32)
        return lo, hi, frac

    x0, x1, fx = axis_taps(in_w, out_w)
    y0, y1, fy = axis_taps(in_h, out_h)
    # lerp form keeps constants exact: v0 + (v1 - v0) * f
    rows0 = src[y0]
    rows1 = src[y1]
    top = rows0[:, x0] + (rows0[:, x1] - rows0[:, x0]) * fx[None, :, None]
    bot = rows1[:, x0] + (rows1[:, x1] - rows1[:, x0]) * fx[None, :, None]
    out = top + (bot - top) * fy[:, None, None]
    return ImageGrid(np.clip(out, 0.0, 1.0))


def _pixel_of(coord: float, extent: int) -> int:
    return min(int(coord * extent), extent - 1)


def _line_pixels(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Integer line walk (Bresenham) from (x0, y0) to (x1, y1), inclusive."""
    pixels = []
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        pixels.append((x, y))
        if x == x1 and y == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy
    return pixels


def _draw_disc(pixels: np.ndarray, cx: int, cy: int, radius: int, color) -> None:
    h, w = pixels.shape[:2]
    for py in range(max(0, cy - radius), min(h, cy + radius + 1)):
        for px in range(max(0, cx - radius), min(w, cx + radius + 1)):
            if (px - cx) ** 2 + (py - cy) ** 2 <= radius * radius:
                pixels[py, px] = color


def draw_skeleton(
    pixels: np.ndarray, skeleton: np.ndarray, color, joint_radius: int = JOINT_RADIUS_PX
) -> None:
    """Draw one skeleton (bones then joint discs) onto an RGB pixel array."""
    h, w = pixels.shape[:2]
    pts = [( _pixel_of(float(x), w), _pixel_of(float(y), h)) for x, y in skeleton]
    for a, b in BONES:
        for px, py in _line_pixels(*pts[a], *pts[b]):
            if 0 <= px < w and 0 <= py < h:
                pixels[py, px] = color
    for px, py in pts:
        _draw_disc(pixels, px, py, joint_radius, color)


def rasterize_keypoints(frame: KeypointFrame, out_w: int = OBS_SIZE, out_h: int = OBS_SIZE) -> ImageGrid:
    """Plot all skeletons of a frame on a white canvas, facilitator in color 0."""
    if out_w < 1 or out_h < 1:
        raise ConfigError(f"canvas dims must be positive, got {out_w}x{out_h}")
    if np.any(frame.persons < 0.0) or np.any(frame.persons > 1.0):
        raise UsageError("keypoint coordinates must lie in [0, 1]")
    pixels = np.ones((out_h, out_w, 3), dtype=np.float32)
    for p in draw_order(frame):
        color = np.asarray(PERSON_PALETTE[p % len(PERSON_PALETTE)], dtype=np.float32)
        draw_skeleton(pixels, frame.persons[p], color)
    return ImageGrid(pixels)


def draw_order(frame: KeypointFrame) -> list[int]:
    """Painting order: participants first, facilitator last (top z-order)."""
    order = [p for p in range(frame.num_persons) if p != frame.facilitator_index]
    if frame.num_persons > 0:
        order.append(frame.facilitator_index)
    return order


def make_observation(mode: ObsMode, source) -> ImageGrid:
    """Build the 128x128 conditioning image for either observation mode."""
    if mode is ObsMode.RAW:
        if not isinstance(source, ImageGrid):
            raise UsageError("raw mode requires an ImageGrid source")
        return resize_bilinear(source, OBS_SIZE, OBS_SIZE)
    if mode is ObsMode.PLOTTED:
        if not isinstance(source, KeypointFrame):
            raise UsageError("plotted mode requires a KeypointFrame source")
        return rasterize_keypoints(source, OBS_SIZE, OBS_SIZE)
    raise UsageError(f"unknown observation mode {mode!r}")


# --- NetPBM I/O --------------------------------------------------------------


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0,1] reals to [0,255] bytes, rounding half up."""
    return np.clip(np.floor(values * 255.0 + 0.5), 0, 255).astype(np.uint8)


def dequantize(bytes_: np.ndarray) -> np.ndarray:
    return bytes_.astype(np.float32) / 255.0


def write_netpbm(path: Path, img: ImageGrid) -> None:
    """Write a binary P5 (1 channel) or P6 (3 channel) file, maxval 255."""
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + quantize(img.pixels).tobytes())


def read_netpbm(path: Path) -> ImageGrid:
    data = Path(path).read_bytes()
    if data[:2] == b"P5":
        channels = 1
    elif data[:2] == b"P6":
        channels = 3
    else:
        raise DataFormatError(f"{path}: not a binary P5/P6 NetPBM file")
    # header = magic, width, height, maxval separated by whitespace (plus
    # optional '#' comment lines), followed by a single whitespace byte.
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(data):
            raise DataFormatError(f"{path}: truncated NetPBM header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise DataFormatError(f"{path}: unterminated comment")
            continue
        if ch.isspace():
            pos += 1
            continue
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        fields.append(int(data[pos:end]))
        pos = end
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise DataFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    expected = width * height * channels
    if len(data) - pos < expected:
        raise DataFormatError(f"{path}: pixel payload shorter than {expected} bytes")
    raw = np.frombuffer(data, dtype=np.uint8, count=expected, offset=pos)
    return ImageGrid(dequantize(raw.reshape(height, width, channels)))
