"""Event taxonomy, synthetic contact-event generator, corpus file format.

The generator substitutes for a human-labeled corpus: each of the 7 contact
event classes gets a distinct displacement-field kinematic built from a shared
contact-patch model, so labels are learnable by construction and the grasp
simulator can emit in-distribution fields by reusing the same helpers.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import field as fd
from .checkpoint import Reader, write_atomic
from .errors import ConfigurationError, DimensionError, FormatError, LabelError, StratificationError
from .numerics import rng_from

MAGIC = b"TEVD"
VERSION = 1

N_CLASSES = 7
AREA_MM = 20.0
FORCE_TO_AMP = 0.15  # mm of peak displacement per Newton of grip force
DEFAULT_NOISE_MM = 0.02
PATCH_EDGE_MM = 1.5  # raised-cosine falloff width around the plateau


class EventClass(enum.Enum):
    """The 7 contact events, in definition order (fixes one-hot layout)."""

    TRANSLATIONAL_SLIP = 0
    ROTATIONAL_SLIP = 1
    ROLLING = 2
    STABLE = 3
    NONCONTACT = 4
    MAKING_CONTACT = 5
    BREAKING_CONTACT = 6


CLASS_NAMES = tuple(e.name.lower() for e in EventClass)


def one_hot(label: EventClass) -> np.ndarray:
    y = np.zeros(N_CLASSES, dtype=np.float32)
    y[label.value] = 1.0
    return y


def label_from_name(name: str) -> EventClass:
    key = name.strip().lower()
    for e in EventClass:
        if e.name.lower() == key:
            return e
    raise LabelError(f"unknown event class {name!r}; choose from {', '.join(CLASS_NAMES)}")


# ---------------------------------------------------------------------------
# Field synthesis helpers (shared with the grasp simulator)
# ---------------------------------------------------------------------------


def grid_positions(shape: tuple[int, int] = (fd.GRID_H, fd.GRID_W), area_mm: float = AREA_MM):
    """(X, Y) mm coordinates of each grid node, each of shape (H, W)."""
    gh, gw = shape
    xs = np.linspace(0.0, area_mm, gw)
    ys = np.linspace(0.0, area_mm, gh)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    return gx, gy


_GX, _GY = grid_positions()


def patch_envelope(
    center_mm: tuple[float, float],
    radius_mm: float,
    edge_mm: float = PATCH_EDGE_MM,
    grid=None,
) -> np.ndarray:
    """Contact-patch weight map: 1 on the plateau, raised-cosine falloff to 0.

    Compact support (exactly zero beyond radius+edge) keeps the grid border
    quiet for every patch-local event class.
    """
    gx, gy = grid if grid is not None else (_GX, _GY)
    r = np.hypot(gx - center_mm[0], gy - center_mm[1])
    env = np.zeros_like(r)
    env[r <= radius_mm] = 1.0
    ring = (r > radius_mm) & (r < radius_mm + edge_mm)
    env[ring] = 0.5 * (1.0 + np.cos(np.pi * (r[ring] - radius_mm) / edge_mm))
    return env


def cap_field(d: np.ndarray, cap_mm: float = fd.MAX_DISPLACEMENT_MM) -> np.ndarray:
    """Saturate vector magnitudes at the elastomer's physical travel."""
    mag = np.sqrt(d[0] ** 2 + d[1] ** 2)
    scale = np.ones_like(mag)
    over = mag > cap_mm
    scale[over] = cap_mm / mag[over]
    return d * scale[None]


def _unit(angle: float) -> np.ndarray:
    return np.array([np.cos(angle), np.sin(angle)])


# ---------------------------------------------------------------------------
# Scenario configuration
# ---------------------------------------------------------------------------


@dataclass
class ScenarioConfig:
    """One synthetic interaction: the event plus its physical parameters."""

    event: EventClass
    force_n: float = 8.0
    duration_s: float = 1.0
    velocity_mm_s: float = 3.0
    angular_rate_rad_s: float = 0.5
    contact_radius_mm: float = 3.5
    noise_mm: float = DEFAULT_NOISE_MM
    seed: int = 0
    # When None these are sampled per scenario; set explicitly to pin motion
    # or loading direction (degrees, measured from +x toward +y).
    motion_direction_deg: Optional[float] = None
    press_direction_deg: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.force_n <= 20.0:
            raise ConfigurationError(f"force {self.force_n} N outside [0, 20]")
        if not 0.5 <= self.duration_s <= 2.0:
            raise ConfigurationError(f"duration {self.duration_s} s outside [0.5, 2]")
        if self.contact_radius_mm <= 0:
            raise ConfigurationError("contact radius must be positive")
        if self.noise_mm < 0:
            raise ConfigurationError("noise level cannot be negative")


def random_config(event: EventClass, rng: np.random.Generator, noise_mm: float = DEFAULT_NOISE_MM) -> ScenarioConfig:
    """Sample a scenario with learnable signal levels.

    Force is drawn from [2, 20] N rather than the full physical [0, 20] range:
    below ~2 N the peak displacement sinks toward the sensor noise floor and
    the label would be unrecoverable even for a human.
    """
    return ScenarioConfig(
        event=event,
        force_n=float(rng.uniform(2.0, 20.0)),
        duration_s=float(rng.uniform(0.5, 2.0)),
        velocity_mm_s=float(rng.uniform(1.5, 4.5)),
        angular_rate_rad_s=float(rng.uniform(0.25, 0.9)),
        contact_radius_mm=float(rng.uniform(2.5, 4.5)),
        noise_mm=noise_mm,
        seed=int(rng.integers(0, 2**62)),
    )


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

_N_FRAMES = 15
_FRAME_DT = fd.DEFAULT_STRIDE / fd.DEFAULT_FS  # seconds between resampled frames


def _base_frames(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Noise-free kinematics for the configured class, (15, 2, H, W)."""
    amp = FORCE_TO_AMP * cfg.force_n
    center = rng.uniform(7.0, 13.0, size=2)
    press_angle = rng.uniform(0.0, 2.0 * np.pi)
    motion_angle = rng.uniform(0.0, 2.0 * np.pi)
    if cfg.press_direction_deg is not None:
        press_angle = np.deg2rad(cfg.press_direction_deg)
    if cfg.motion_direction_deg is not None:
        motion_angle = np.deg2rad(cfg.motion_direction_deg)
    dir0 = _unit(press_angle)
    env = patch_envelope(center, cfg.contact_radius_mm)
    frames = np.zeros((_N_FRAMES, 2, fd.GRID_H, fd.GRID_W), dtype=np.float64)
    ev = cfg.event

    if ev is EventClass.NONCONTACT:
        pass

    elif ev is EventClass.STABLE:
        base = env[None] * (amp * dir0)[:, None, None]
        # Whole-patch magnitude jitter strictly under 5% of peak.
        jit = np.clip(rng.normal(0.0, 0.015, size=_N_FRAMES), -0.045, 0.045)
        for t in range(_N_FRAMES):
            frames[t] = base * (1.0 + jit[t])

    elif ev is EventClass.TRANSLATIONAL_SLIP:
        # Pre-tensioned patch plus whole-surface shear drift: the object drags
        # the entire gel while sliding, so the drift term is global.
        drift_dir = _unit(motion_angle)
        step = cfg.velocity_mm_s * _FRAME_DT
        pre = env[None] * (0.3 * amp * dir0)[:, None, None]
        for t in range(_N_FRAMES):
            frames[t] = pre + (step * t * drift_dir)[:, None, None]

    elif ev is EventClass.ROTATIONAL_SLIP:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        total = cfg.angular_rate_rad_s * (_N_FRAMES - 1) * _FRAME_DT
        px, py = _GX - center[0], _GY - center[1]
        for t in range(_N_FRAMES):
            # Pre-twist of half the sweep keeps frame 0 visibly loaded.
            theta = sign * (0.5 * total + cfg.angular_rate_rad_s * t * _FRAME_DT)
            ct, st = np.cos(theta), np.sin(theta)
            frames[t, 0] = env * ((ct - 1.0) * px - st * py)
            frames[t, 1] = env * (st * px + (ct - 1.0) * py)

    elif ev is EventClass.ROLLING:
        # Patch centroid translates; loading stays a constant press vector, so
        # the leading edge loads while the trailing edge releases.
        direction = _unit(motion_angle)
        path = cfg.velocity_mm_s * (_N_FRAMES - 1) * _FRAME_DT
        start = center - 0.5 * path * direction
        end = center + 0.5 * path * direction
        # Shift the whole travel segment so the patch support never touches
        # the grid border (keeps patch-local classes border-quiet).
        margin = cfg.contact_radius_mm + PATCH_EDGE_MM + 1.0
        for ax in range(2):
            lo, hi = min(start[ax], end[ax]), max(start[ax], end[ax])
            shift = max(0.0, margin - lo) - max(0.0, hi - (AREA_MM - margin))
            start[ax] += shift
        press = (0.8 * amp * dir0)[:, None, None]
        for t in range(_N_FRAMES):
            c = start + direction * cfg.velocity_mm_s * t * _FRAME_DT
            frames[t] = patch_envelope(c, cfg.contact_radius_mm)[None] * press

    elif ev in (EventClass.MAKING_CONTACT, EventClass.BREAKING_CONTACT):
        t_c = int(rng.integers(4, 14))  # transition inside frames 4..13
        ramp = int(np.clip(round(cfg.duration_s * 3.75), 2, 6))
        base = env[None] * (amp * dir0)[:, None, None]
        for t in range(_N_FRAMES):
            g = np.clip((t - t_c + 1) / ramp, 0.0, 1.0)
            if ev is EventClass.BREAKING_CONTACT:
                g = 1.0 - g
            frames[t] = g * base

    else:  # pragma: no cover
        raise LabelError(f"no kinematics defined for {ev}")

    for t in range(_N_FRAMES):
        frames[t] = cap_field(frames[t])
    return frames


def generate(cfg: ScenarioConfig) -> fd.TactileSequence:
    """Emit one labeled 15-frame sequence for the configured scenario."""
    kin_rng = rng_from(cfg.seed, "kinematics")
    frames = _base_frames(cfg, kin_rng)
    if cfg.noise_mm > 0:
        noise_rng = rng_from(cfg.seed, "noise")
        frames = frames + noise_rng.normal(0.0, cfg.noise_mm, size=frames.shape)
    return fd.TactileSequence(frames.astype(np.float32), label=cfg.event)


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------


@dataclass
class Corpus:
    """A labeled sequence collection plus the metadata models need."""

    sequences: list
    data_range: float
    seed: Optional[int] = None

    def __len__(self) -> int:
        return len(self.sequences)

    def class_counts(self) -> dict[EventClass, int]:
        counts = {e: 0 for e in EventClass}
        for s in self.sequences:
            counts[s.label] += 1
        return counts

    def labels(self) -> np.ndarray:
        return np.array([s.label.value for s in self.sequences], dtype=np.int64)


def _compute_data_range(sequences: Sequence) -> float:
    peak = 0.0
    for s in sequences:
        peak = max(peak, float(np.abs(s.frames).max()))
    return peak


def build_corpus(n_per_class: int, seed: int, noise_mm: float = DEFAULT_NOISE_MM) -> Corpus:
    """n_per_class scenarios per event class, deterministic in `seed`."""
    if n_per_class < 1:
        raise ConfigurationError("n_per_class must be at least 1")
    sequences = []
    for ci, event in enumerate(EventClass):
        for i in range(n_per_class):
            cfg = random_config(event, rng_from(seed, "cfg", ci, i), noise_mm=noise_mm)
            sequences.append(generate(cfg))
    return Corpus(sequences, data_range=_compute_data_range(sequences), seed=seed)


def filter_classes(corpus: Corpus, events: Iterable[EventClass]) -> Corpus:
    """Subset by label; data_range is kept so metrics stay comparable."""
    keep = set(events)
    return Corpus(
        [s for s in corpus.sequences if s.label in keep],
        data_range=corpus.data_range,
        seed=corpus.seed,
    )


def sequence_id(seq: fd.TactileSequence) -> str:
    """Content hash identifying a sequence independent of corpus ordering."""
    h = hashlib.sha1()
    h.update(bytes([seq.label.value if seq.label is not None else 0xFF]))
    h.update(np.ascontiguousarray(seq.frames).tobytes())
    return h.hexdigest()


def _parse_ratio(ratio) -> tuple[float, float]:
    if isinstance(ratio, str):
        parts = ratio.split(":")
        if len(parts) != 2:
            raise ConfigurationError(f"ratio {ratio!r} is not of the form A:B")
        ratio = (float(parts[0]), float(parts[1]))
    train_w, val_w = float(ratio[0]), float(ratio[1])
    if train_w <= 0 or val_w <= 0:
        raise ConfigurationError(
            f"split ratio {train_w:g}:{val_w:g} leaves one side empty"
        )
    return train_w, val_w


def split(corpus: Corpus, ratio=(9, 1), seed: int = 0) -> tuple[Corpus, Corpus]:
    """Stratified deterministic split.

    Membership is decided by hashing each sequence's content id with the seed,
    so the partition is stable under corpus reordering.
    """
    if len(corpus) == 0:
        raise ConfigurationError("cannot split an empty corpus")
    train_w, val_w = _parse_ratio(ratio)
    val_frac = val_w / (train_w + val_w)
    by_class: dict[EventClass, list] = {}
    for s in corpus.sequences:
        by_class.setdefault(s.label, []).append(s)
    train, val = [], []
    for event, members in by_class.items():
        if len(members) < 2:
            raise StratificationError(
                f"class {event.name} has {len(members)} member(s); need at least 2"
            )
        ranked = sorted(
            members,
            key=lambda s: hashlib.sha1(f"{sequence_id(s)}:{seed}".encode()).hexdigest(),
        )
        n_val = int(round(len(members) * val_frac))
        n_val = min(max(n_val, 1), len(members) - 1)
        val.extend(ranked[:n_val])
        train.extend(ranked[n_val:])
    return (
        Corpus(train, data_range=corpus.data_range, seed=corpus.seed),
        Corpus(val, data_range=corpus.data_range, seed=corpus.seed),
    )


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------


def save_corpus(path: str, corpus: Corpus) -> None:
    """Write a .tevd corpus file (see module docstring of checkpoint for the
    shared conventions; layout documented in the README)."""
    if not corpus.sequences:
        fs, tw, stride = fd.DEFAULT_FS, fd.DEFAULT_WINDOW_S, fd.DEFAULT_STRIDE
        gh, gw = fd.GRID_H, fd.GRID_W
    else:
        first = corpus.sequences[0]
        fs, tw, stride = first.fs, first.window_s, first.stride
        gh, gw = first.frames.shape[2], first.frames.shape[3]
    header = {
        "f_s": fs,
        "t_w": tw,
        "stride": stride,
        "N_h": gh,
        "N_w": gw,
        "C_h": fd.CHANNELS,
        "classes": list(CLASS_NAMES),
        "data_range": corpus.data_range,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(hb)), hb]
    chunks.append(struct.pack("<I", len(corpus.sequences)))
    for s in corpus.sequences:
        if s.label is None:
            raise LabelError("cannot serialize an unlabeled sequence")
        chunks.append(struct.pack("<B", s.label.value))
        chunks.append(struct.pack("<I", s.frames.shape[0]))
        chunks.append(np.ascontiguousarray(s.frames, dtype="<f4").tobytes())
    write_atomic(path, b"".join(chunks))


def load_corpus(path: str) -> Corpus:
    with open(path, "rb") as f:
        r = Reader(f.read())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = r.u16("format version")
    if version != VERSION:
        raise FormatError(f"unsupported corpus version {version}", 4)
    hlen = r.u32("header length")
    if hlen > (1 << 24):
        raise FormatError(f"header length {hlen} implausible", r.pos - 4)
    header = r.json_blob(hlen, "corpus header")
    for key in ("f_s", "t_w", "stride", "N_h", "N_w", "C_h", "classes"):
        if key not in header:
            raise FormatError(f"corpus header missing {key!r}", r.pos)
    classes = header["classes"]
    gh, gw, ch = int(header["N_h"]), int(header["N_w"]), int(header["C_h"])
    count = r.u32("sequence count")
    sequences = []
    for i in range(count):
        at = r.pos
        label_idx = r.u8(f"label of sequence {i}")
        if label_idx >= len(classes) or label_idx >= N_CLASSES:
            raise FormatError(f"sequence {i} label index {label_idx} out of range", at)
        n_frames = r.u32(f"frame count of sequence {i}")
        if n_frames > 10_000:
            raise FormatError(f"sequence {i} claims {n_frames} frames", r.pos - 4)
        vals = r.f32_array(n_frames * ch * gh * gw, f"frames of sequence {i}")
        try:
            seq = fd.TactileSequence(
                vals.reshape(n_frames, ch, gh, gw),
                fs=float(header["f_s"]),
                window_s=float(header["t_w"]),
                stride=int(header["stride"]),
                label=EventClass(label_idx),
            )
        except DimensionError as e:
            raise FormatError(f"sequence {i} inconsistent with header: {e}", at) from None
        sequences.append(seq)
    r.expect_end()
    return Corpus(
        sequences,
        data_range=float(header.get("data_range", _compute_data_range(sequences))),
        seed=None,
    )
