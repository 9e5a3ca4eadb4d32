"""Contact-event classifiers.

Three recurrent architectures score a 12-frame displacement window against the
7 event classes: an LSTM over flattened frames (the primary network), a
ConvLSTM that keeps the spatial layout, and a per-frame CNN encoder feeding a
compact LSTM.  All three share the parameter-dict + config conventions used by
the trainer and the checkpoint format.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field, asdict
from typing import Iterable, Iterator, Optional

import numpy as np

from . import field as fd
from . import numerics as nx
from .checkpoint import load_params, save_params
from .dataset import N_CLASSES, EventClass
from .errors import ConfigurationError, DimensionError

VARIANTS = ("lstm", "convlstm", "cnn_lstm")

_N_SEQ_FRAMES = int(fd.DEFAULT_FS * fd.DEFAULT_WINDOW_S) // fd.DEFAULT_STRIDE  # 15


@dataclass
class ClassifierConfig:
    variant: str = "lstm"
    input_len: int = 12
    hidden: int = 256  # LSTM width, or ConvLSTM hidden channels
    fc_width: int = 64
    dropout_p: float = 0.5
    conv_channels: tuple = (8, 16)  # cnn_lstm encoder widths
    grid: tuple = (fd.GRID_H, fd.GRID_W)
    n_classes: int = N_CLASSES
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(
                f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}"
            )
        if not 1 <= self.input_len <= _N_SEQ_FRAMES:
            raise ConfigurationError(
                f"input_len {self.input_len} outside [1, {_N_SEQ_FRAMES}]"
            )
        if self.n_classes != N_CLASSES:
            raise ConfigurationError(f"classifier heads are {N_CLASSES}-way, got {self.n_classes}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p {self.dropout_p} outside [0, 1)")
        if self.hidden < 1 or self.fc_width < 1:
            raise ConfigurationError("hidden and fc_width must be positive")

    @property
    def flat_len(self) -> int:
        return fd.CHANNELS * self.grid[0] * self.grid[1]


def default_config(variant: str, **overrides) -> ClassifierConfig:
    """Per-variant defaults: LSTM d_h=256, ConvLSTM 8 hidden channels,
    CNN+LSTM a light encoder into d_h=128."""
    if variant == "cnn_lstm":
        overrides.setdefault("hidden", 128)
    elif variant == "convlstm":
        overrides.setdefault("hidden", 8)
    return ClassifierConfig(variant=variant, **overrides)


@dataclass
class ClassifierOutput:
    probabilities: np.ndarray  # (7,), sums to 1
    label: EventClass
    logits: np.ndarray  # (7,), kept for loss computation
    latency_ms: float = 0.0
    stale: bool = False


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def init_classifier(config: ClassifierConfig) -> dict[str, nx.Tensor]:
    """Glorot weights, zero biases (forget gates at 1), insertion-ordered."""
    rng = nx.rng_from(config.seed, "init", config.variant)
    params: dict[str, nx.Tensor] = {}
    gh, gw = config.grid

    if config.variant == "lstm":
        cell = nx.init_lstm_params(rng, config.flat_len, config.hidden)
        params["lstm.w"], params["lstm.b"] = cell["w"], cell["b"]
        feat = config.hidden
    elif config.variant == "convlstm":
        cell = nx.init_convlstm_params(rng, fd.CHANNELS, config.hidden, 3)
        params["cell.w"], params["cell.b"] = cell["w"], cell["b"]
        feat = config.hidden * gh * gw
    else:  # cnn_lstm
        c1, c2 = config.conv_channels
        params["enc1.k"] = nx.parameter(nx.xavier_uniform(rng, (c1, fd.CHANNELS, 3, 3)))
        params["enc1.b"] = nx.parameter(np.zeros(c1, dtype=np.float32))
        params["enc2.k"] = nx.parameter(nx.xavier_uniform(rng, (c2, c1, 3, 3)))
        params["enc2.b"] = nx.parameter(np.zeros(c2, dtype=np.float32))
        h2, w2 = _twice_strided(gh), _twice_strided(gw)
        cell = nx.init_lstm_params(rng, c2 * h2 * w2, config.hidden)
        params["lstm.w"], params["lstm.b"] = cell["w"], cell["b"]
        feat = config.hidden

    params["fc1.w"] = nx.parameter(nx.xavier_uniform(rng, (feat, config.fc_width)))
    params["fc1.b"] = nx.parameter(np.zeros(config.fc_width, dtype=np.float32))
    params["fc2.w"] = nx.parameter(nx.xavier_uniform(rng, (config.fc_width, config.n_classes)))
    params["fc2.b"] = nx.parameter(np.zeros(config.n_classes, dtype=np.float32))
    return params


def _twice_strided(n: int) -> int:
    for _ in range(2):
        n = (n + 2 * 1 - 3) // 2 + 1  # 3x3 kernel, stride 2, same padding
    return n


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _check_mode(mode: str) -> None:
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"mode must be 'train' or 'infer', got {mode!r}")


def _as_batch(frames, config: ClassifierConfig) -> np.ndarray:
    """Coerce input to (B, N_in, C, H, W), keeping the newest N_in frames."""
    if isinstance(frames, fd.TactileSequence):
        frames = frames.frames
    arr = np.asarray(frames, dtype=np.float32)
    if arr.ndim == 4:
        arr = arr[None]
    if arr.ndim != 5:
        raise DimensionError(
            f"expected (T,C,H,W) or (B,T,C,H,W) frames, got shape {arr.shape}"
        )
    gh, gw = config.grid
    if arr.shape[2:] != (fd.CHANNELS, gh, gw):
        raise DimensionError(
            f"frames are {arr.shape[2:]}, classifier expects ({fd.CHANNELS}, {gh}, {gw})"
        )
    if arr.shape[1] < config.input_len:
        raise DimensionError(
            f"sequence holds {arr.shape[1]} frames; classifier consumes {config.input_len}"
        )
    return arr[:, -config.input_len :]


def forward(
    params: dict,
    config: ClassifierConfig,
    frames,
    mode: str = "infer",
    rng: Optional[np.random.Generator] = None,
) -> nx.Tensor:
    """Class probabilities (B, 7) for a batch; records on the active tape."""
    probs, _ = forward_with_logits(params, config, frames, mode=mode, rng=rng)
    return probs


def forward_with_logits(
    params: dict,
    config: ClassifierConfig,
    frames,
    mode: str = "infer",
    rng: Optional[np.random.Generator] = None,
) -> tuple[nx.Tensor, nx.Tensor]:
    """(probabilities, logits), both (B, 7); records on the active tape."""
    _check_mode(mode)
    batch = _as_batch(frames, config)
    b, t = batch.shape[:2]
    x = nx.tensor(batch)

    if config.variant == "lstm":
        flat = nx.reshape(x, (b, t, config.flat_len))
        cell = {"w": params["lstm.w"], "b": params["lstm.b"]}
        h = nx.tensor(np.zeros((b, config.hidden), dtype=np.float32))
        c = nx.tensor(np.zeros((b, config.hidden), dtype=np.float32))
        for i in range(t):
            x_i = nx.reshape(nx.narrow(flat, 1, i, 1), (b, config.flat_len))
            h, c = nx.lstm_cell(x_i, h, c, cell)
        feats = h
    elif config.variant == "convlstm":
        gh, gw = config.grid
        cell = {"w": params["cell.w"], "b": params["cell.b"]}
        h = nx.tensor(np.zeros((b, config.hidden, gh, gw), dtype=np.float32))
        c = nx.tensor(np.zeros((b, config.hidden, gh, gw), dtype=np.float32))
        for i in range(t):
            x_i = nx.reshape(nx.narrow(x, 1, i, 1), (b, fd.CHANNELS, gh, gw))
            h, c = nx.convlstm_cell(x_i, h, c, cell)
        feats = nx.reshape(h, (b, config.hidden * gh * gw))
    else:  # cnn_lstm: encode all frames in one conv batch, then recur
        gh, gw = config.grid
        c1, c2 = config.conv_channels
        stack = nx.reshape(x, (b * t, fd.CHANNELS, gh, gw))
        z = nx.conv2d(stack, params["enc1.k"], stride=2, padding="same")
        z = nx.relu(nx.add(z, nx.reshape(params["enc1.b"], (c1, 1, 1))))
        z = nx.conv2d(z, params["enc2.k"], stride=2, padding="same")
        z = nx.relu(nx.add(z, nx.reshape(params["enc2.b"], (c2, 1, 1))))
        d_feat = c2 * _twice_strided(gh) * _twice_strided(gw)
        seq_feats = nx.reshape(z, (b, t, d_feat))
        cell = {"w": params["lstm.w"], "b": params["lstm.b"]}
        h = nx.tensor(np.zeros((b, config.hidden), dtype=np.float32))
        c = nx.tensor(np.zeros((b, config.hidden), dtype=np.float32))
        for i in range(t):
            x_i = nx.reshape(nx.narrow(seq_feats, 1, i, 1), (b, d_feat))
            h, c = nx.lstm_cell(x_i, h, c, cell)
        feats = h

    z1 = nx.relu(nx.add(nx.matmul(feats, params["fc1.w"]), params["fc1.b"]))
    logits = _head(z1, params, config, mode, rng)
    return nx.softmax(logits), logits


def _head(z1, params, config, mode, rng):
    """FC head with the primary network's dropout placement: after the first
    FC's activation and again on the logits (inverted scaling, infer no-op)."""
    if config.variant == "lstm" and config.dropout_p > 0:
        z1 = nx.dropout(z1, config.dropout_p, mode, rng)
    logits = nx.add(nx.matmul(z1, params["fc2.w"]), params["fc2.b"])
    if config.variant == "lstm" and config.dropout_p > 0:
        logits = nx.dropout(logits, config.dropout_p, mode, rng)
    return logits


def _classify_one(params, config, frames, mode, rng=None) -> ClassifierOutput:
    start = time.perf_counter()
    batch = _as_batch(frames, config)
    if batch.shape[0] != 1:
        raise DimensionError("classify expects a single sequence; use forward for batches")
    probs, logits = forward_with_logits(params, config, batch, mode=mode, rng=rng)
    latency = (time.perf_counter() - start) * 1e3
    p = probs.data[0]
    return ClassifierOutput(
        probabilities=p,
        label=EventClass(int(np.argmax(p))),
        logits=logits.data[0].copy(),
        latency_ms=latency,
    )


def config_from_params(variant: str, params: dict, **overrides) -> ClassifierConfig:
    """Reconstruct the structural config fields from parameter shapes.

    Widths (hidden, fc) are unambiguous in the shapes; the grid defaults to
    the sensor's 30x30 (pass grid=... explicitly for other geometries).
    """
    if variant == "lstm":
        overrides.setdefault("hidden", params["lstm.w"].shape[1] // 4)
    elif variant == "convlstm":
        overrides.setdefault("hidden", params["cell.w"].shape[0] // 4)
    else:
        overrides.setdefault("hidden", params["lstm.w"].shape[1] // 4)
        overrides.setdefault(
            "conv_channels", (params["enc1.k"].shape[0], params["enc2.k"].shape[0])
        )
    overrides.setdefault("fc_width", params["fc1.w"].shape[1])
    return default_config(variant, **overrides)


def forward_lstm(seq, params: dict, mode: str = "infer") -> ClassifierOutput:
    """Primary network: flattened frames through an LSTM, FC head, softmax."""
    return _classify_one(params, config_from_params("lstm", params), seq, mode)


def forward_convlstm_classifier(seq, params: dict, mode: str = "infer") -> ClassifierOutput:
    return _classify_one(params, config_from_params("convlstm", params), seq, mode)


def forward_cnn_lstm(seq, params: dict, mode: str = "infer") -> ClassifierOutput:
    return _classify_one(params, config_from_params("cnn_lstm", params), seq, mode)


def classify(params: dict, config: ClassifierConfig, seq, mode: str = "infer") -> ClassifierOutput:
    """Variant-agnostic single-sequence entry point."""
    return _classify_one(params, config, seq, mode)


# ---------------------------------------------------------------------------
# Online classification
# ---------------------------------------------------------------------------


def classify_stream(
    stream: Iterable[np.ndarray],
    params: dict,
    config: ClassifierConfig,
    fs: float = fd.DEFAULT_FS,
    stride: int = fd.DEFAULT_STRIDE,
) -> Iterator[tuple[float, ClassifierOutput]]:
    """Classify a live frame stream, one output per incoming frame.

    The window is anchored at the newest frame and reaches back every
    `stride`-th frame, so fresh evidence enters the network with zero delay.
    Until the buffer can fill a window the yielded output carries stale=True
    and uniform probabilities.
    """
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    need = (config.input_len - 1) * stride + 1
    buf: list[np.ndarray] = []
    uniform = np.full(config.n_classes, 1.0 / config.n_classes, dtype=np.float32)
    last = ClassifierOutput(
        probabilities=uniform,
        label=EventClass(int(np.argmax(uniform))),
        logits=np.zeros(config.n_classes, dtype=np.float32),
        stale=True,
    )
    for i, frame in enumerate(stream):
        arr = np.asarray(frame, dtype=np.float32)
        if arr.shape != (fd.CHANNELS, *config.grid):
            raise DimensionError(
                f"stream frame has shape {arr.shape}, expected ({fd.CHANNELS}, *{config.grid})"
            )
        buf.append(arr)
        if len(buf) > need:
            del buf[: len(buf) - need]
        t_now = i / fs
        if len(buf) < need:
            last = ClassifierOutput(
                probabilities=last.probabilities,
                label=last.label,
                logits=last.logits,
                stale=True,
            )
            yield t_now, last
            continue
        window = np.stack(buf[::-1][::stride][::-1])  # newest-anchored, ascending
        out = _classify_one(params, config, window, "infer")
        last = out
        yield t_now, out


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_classifier(path: str, config: ClassifierConfig, params: dict) -> None:
    desc = {"kind": "classifier", "config": asdict(config)}
    save_params(path, desc, params)


def load_classifier(path: str) -> tuple[ClassifierConfig, dict[str, nx.Tensor]]:
    desc, arrays = load_params(path)
    if desc.get("kind") != "classifier":
        raise ConfigurationError(f"{path} does not hold a classifier checkpoint")
    raw = dict(desc["config"])
    raw["conv_channels"] = tuple(raw.get("conv_channels", (8, 16)))
    raw["grid"] = tuple(raw.get("grid", (fd.GRID_H, fd.GRID_W)))
    config = ClassifierConfig(**raw)
    reference = init_classifier(config)
    if set(arrays) != set(reference):
        raise ConfigurationError(
            f"checkpoint parameters {sorted(arrays)} do not match "
            f"{config.variant} layout {sorted(reference)}"
        )
    params = {}
    for name, ref in reference.items():
        if arrays[name].shape != ref.data.shape:
            raise DimensionError(
                f"parameter {name} has shape {arrays[name].shape}, "
                f"expected {ref.data.shape}"
            )
        params[name] = nx.parameter(arrays[name])
    return config, params
