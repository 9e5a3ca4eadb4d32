"""Marker flows, displacement rasters, and sequence assembly.

A tactile frame is a dense 2-channel raster (dX, dY) of millimeter
displacements on a 30x30 grid, built by interpolating tracked marker motions.
Sequences resample a 1 s window at stride 2, giving 15 frames of shape
2x30x30 (1800 values when flattened).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Optional

import numpy as np

from .checkpoint import write_atomic
from .errors import (
    ConfigurationError,
    DegenerateFieldError,
    DimensionError,
    TrackingLossError,
)

if TYPE_CHECKING:  # pragma: no cover
    from .dataset import EventClass

GRID_H = 30
GRID_W = 30
CHANNELS = 2
FLAT_LEN = CHANNELS * GRID_H * GRID_W  # 1800

DEFAULT_FS = 30.0
DEFAULT_WINDOW_S = 1.0
DEFAULT_STRIDE = 2

MAX_DISPLACEMENT_MM = 5.0
MATCH_RADIUS_MM = 3.0
MIN_MARKERS = 4
_SNAP_EPS_MM = 1e-9


# ---------------------------------------------------------------------------
# Marker flows
# ---------------------------------------------------------------------------


@dataclass
class MarkerFlow:
    """Rest positions and their current displacement vectors, in mm."""

    rest: np.ndarray  # (N, 2)
    disp: np.ndarray  # (N, 2)
    timestamp: float = 0.0
    max_disp: float = MAX_DISPLACEMENT_MM

    def __post_init__(self):
        self.rest = np.asarray(self.rest, dtype=np.float64).reshape(-1, 2)
        self.disp = np.asarray(self.disp, dtype=np.float64).reshape(-1, 2)
        if self.rest.shape != self.disp.shape:
            raise DimensionError(
                f"{self.rest.shape[0]} rest positions vs {self.disp.shape[0]} displacements"
            )
        mags = np.linalg.norm(self.disp, axis=1)
        if mags.size and float(mags.max()) > self.max_disp + 1e-9:
            raise ConfigurationError(
                f"marker displacement {mags.max():.3f} mm exceeds the "
                f"{self.max_disp} mm physical cap"
            )

    def __len__(self) -> int:
        return self.rest.shape[0]


def marker_grid(n: int = 8, area_mm: float = 20.0) -> np.ndarray:
    """Rest positions of an n x n marker grid spanning a square sensing area."""
    axis = np.linspace(0.0, area_mm, n)
    gx, gy = np.meshgrid(axis, axis, indexing="xy")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def track_markers(
    prev: MarkerFlow,
    detected: list[tuple[float, float]],
    timestamp: Optional[float] = None,
    r_max: float = MATCH_RADIUS_MM,
    max_lost_fraction: float = 0.2,
) -> MarkerFlow:
    """Match each rest position to its nearest detected centroid.

    Markers with no candidate within `r_max` keep their previous displacement;
    if more than `max_lost_fraction` of markers go unmatched the whole frame is
    rejected with TrackingLossError (callers discard the sequence).
    """
    pts = np.asarray(detected, dtype=np.float64).reshape(-1, 2)
    n = len(prev)
    disp = prev.disp.copy()
    lost = 0
    if pts.shape[0] == 0:
        lost = n
    else:
        d2 = np.sum((prev.rest[:, None, :] - pts[None, :, :]) ** 2, axis=2)
        nearest = np.argmin(d2, axis=1)
        dist = np.sqrt(d2[np.arange(n), nearest])
        for i in range(n):
            if dist[i] <= r_max:
                disp[i] = pts[nearest[i]] - prev.rest[i]
            else:
                lost += 1
    if lost > max_lost_fraction * n:
        raise TrackingLossError(
            f"{lost}/{n} markers unmatched (limit {max_lost_fraction:.0%})"
        )
    ts = prev.timestamp + 1.0 / DEFAULT_FS if timestamp is None else timestamp
    return MarkerFlow(prev.rest, disp, timestamp=ts, max_disp=prev.max_disp)


# ---------------------------------------------------------------------------
# Displacement frames
# ---------------------------------------------------------------------------


@dataclass
class DisplacementFrame:
    """2x30x30 float32 raster of (dX, dY) displacements in mm."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != CHANNELS:
            raise DimensionError(
                f"displacement frame must be ({CHANNELS},H,W); got {arr.shape}"
            )
        self.data = arr

    @classmethod
    def from_channels(cls, dx: np.ndarray, dy: np.ndarray) -> "DisplacementFrame":
        dx = np.asarray(dx, dtype=np.float32)
        dy = np.asarray(dy, dtype=np.float32)
        if dx.shape != dy.shape or dx.ndim != 2:
            raise DimensionError(f"channel shapes differ: {dx.shape} vs {dy.shape}")
        return cls(np.stack([dx, dy]))

    @classmethod
    def zero(cls, h: int = GRID_H, w: int = GRID_W) -> "DisplacementFrame":
        return cls(np.zeros((CHANNELS, h, w), dtype=np.float32))

    @property
    def dx(self) -> np.ndarray:
        return self.data[0]

    @property
    def dy(self) -> np.ndarray:
        return self.data[1]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


def interpolate_field(
    flow: MarkerFlow,
    grid_shape: tuple[int, int] = (GRID_H, GRID_W),
    power: float = 2.0,
) -> DisplacementFrame:
    """Inverse-distance-weighted interpolation of marker displacements.

    Grid nodes span the bounding box of the rest positions (the sensing
    area).  A node within 1e-9 mm of a marker snaps to that marker's value,
    so the interpolant reproduces the data exactly at marker locations.
    """
    if len(flow) < MIN_MARKERS:
        raise DegenerateFieldError(
            f"need at least {MIN_MARKERS} markers, got {len(flow)}"
        )
    rest = flow.rest
    lo, hi = rest.min(axis=0), rest.max(axis=0)
    if np.any(hi - lo <= 0.0):
        raise DegenerateFieldError("markers are collinear; sensing area has no extent")
    gh, gw = grid_shape
    xs = np.linspace(lo[0], hi[0], gw)
    ys = np.linspace(lo[1], hi[1], gh)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.stack([gx.ravel(), gy.ravel()], axis=1)  # (gh*gw, 2)
    d2 = np.sum((nodes[:, None, :] - rest[None, :, :]) ** 2, axis=2)
    snap = d2 < _SNAP_EPS_MM**2
    with np.errstate(divide="ignore"):
        w = 1.0 / np.power(d2, power / 2.0)
    w[snap.any(axis=1)] = 0.0
    w[snap] = 1.0
    vals = (w @ flow.disp) / w.sum(axis=1, keepdims=True)
    grid = vals.T.reshape(CHANNELS, gh, gw)
    return DisplacementFrame(grid.astype(np.float32))


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------


@dataclass
class TactileSequence:
    """A stride-resampled window of displacement frames.

    frames has shape (N_s, 2, H, W); N_s must equal floor(f_s*t_w/stride).
    """

    frames: np.ndarray
    fs: float = DEFAULT_FS
    window_s: float = DEFAULT_WINDOW_S
    stride: int = DEFAULT_STRIDE
    label: "Optional[EventClass]" = None
    start_time: float = 0.0

    def __post_init__(self):
        arr = np.asarray(self.frames, dtype=np.float32)
        if arr.ndim != 4 or arr.shape[1] != CHANNELS:
            raise DimensionError(f"sequence frames must be (N,{CHANNELS},H,W); got {arr.shape}")
        expected = int(self.fs * self.window_s) // self.stride
        if arr.shape[0] != expected:
            raise DimensionError(
                f"sequence holds {arr.shape[0]} frames; f_s={self.fs}, t_w={self.window_s}, "
                f"stride={self.stride} requires {expected}"
            )
        self.frames = arr

    def __len__(self) -> int:
        return self.frames.shape[0]

    def frame(self, i: int) -> DisplacementFrame:
        return DisplacementFrame(self.frames[i])

    def timestamps(self) -> np.ndarray:
        step = self.stride / self.fs
        return self.start_time + step * np.arange(len(self))


def assemble_sequence(
    stream: Iterable,
    fs: float = DEFAULT_FS,
    window_s: float = DEFAULT_WINDOW_S,
    stride: int = DEFAULT_STRIDE,
    label: "Optional[EventClass]" = None,
) -> TactileSequence:
    """Resample the newest t_w-second window of a frame stream.

    Keeps every stride-th frame counted from the window start: a 30-frame
    window at stride 2 yields indices 0,2,...,28.  The stream may hold
    DisplacementFrames or raw (2,H,W) arrays.
    """
    frames = [f.data if isinstance(f, DisplacementFrame) else np.asarray(f, dtype=np.float32) for f in stream]
    window = int(fs * window_s)
    if len(frames) < window:
        raise DimensionError(
            f"stream holds {len(frames)} frames; window needs {window}"
        )
    tail = frames[-window:]
    count = window // stride
    kept = tail[::stride][:count]
    return TactileSequence(
        np.stack(kept), fs=fs, window_s=window_s, stride=stride, label=label
    )


def flatten(frame) -> np.ndarray:
    """Channel-major, row-major flattening: 2x30x30 -> (1800,)."""
    data = frame.data if isinstance(frame, DisplacementFrame) else np.asarray(frame, dtype=np.float32)
    if data.ndim != 3 or data.shape[0] != CHANNELS:
        raise DimensionError(f"flatten expects ({CHANNELS},H,W); got {data.shape}")
    return np.ascontiguousarray(data).reshape(-1)


def unflatten(vec: np.ndarray, grid_shape: tuple[int, int] = (GRID_H, GRID_W)) -> DisplacementFrame:
    vec = np.asarray(vec, dtype=np.float32)
    gh, gw = grid_shape
    if vec.size != CHANNELS * gh * gw:
        raise DimensionError(f"vector of {vec.size} values cannot fill {CHANNELS}x{gh}x{gw}")
    return DisplacementFrame(vec.reshape(CHANNELS, gh, gw))


# ---------------------------------------------------------------------------
# Visualization
# ---------------------------------------------------------------------------


def encode_hsv(frame, v_max: float) -> np.ndarray:
    """Direction-as-hue/magnitude-as-value color coding.

    hue = atan2(dY, dX), saturation = 1, value = min(|v|/v_max, 1); returns an
    (H, W, 3) uint8 RGB raster.  Zero vectors render black.
    """
    if v_max <= 0:
        raise ConfigurationError(f"v_max must be positive, got {v_max}")
    data = frame.data if isinstance(frame, DisplacementFrame) else np.asarray(frame, dtype=np.float32)
    dx, dy = data[0].astype(np.float64), data[1].astype(np.float64)
    mag = np.sqrt(dx * dx + dy * dy)
    value = np.minimum(mag / v_max, 1.0)
    hue = np.degrees(np.arctan2(dy, dx)) % 360.0
    # HSV -> RGB with S=1: chroma == value, m == 0.
    hp = hue / 60.0
    x = value * (1.0 - np.abs(hp % 2.0 - 1.0))
    sector = np.floor(hp).astype(int) % 6
    zeros = np.zeros_like(value)
    r = np.select([sector == 0, sector == 1, sector == 2, sector == 3, sector == 4, sector == 5],
                  [value, x, zeros, zeros, x, value])
    g = np.select([sector == 0, sector == 1, sector == 2, sector == 3, sector == 4, sector == 5],
                  [x, value, value, x, zeros, zeros])
    b = np.select([sector == 0, sector == 1, sector == 2, sector == 3, sector == 4, sector == 5],
                  [zeros, zeros, x, value, value, x])
    rgb = np.stack([r, g, b], axis=-1)
    return np.floor(rgb * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path: str, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 raster as binary PPM (P6)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise DimensionError(f"PPM writer needs (H,W,3) uint8; got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    write_atomic(path, header + rgb.tobytes())


def sequence_strip(frames: np.ndarray, v_max: float, separator_px: int = 1) -> np.ndarray:
    """Concatenate per-frame HSV encodings horizontally with white separators."""
    tiles = []
    for i in range(frames.shape[0]):
        if i:
            tiles.append(np.full((frames.shape[2], separator_px, 3), 255, dtype=np.uint8))
        tiles.append(encode_hsv(frames[i], v_max))
    return np.concatenate(tiles, axis=1)
