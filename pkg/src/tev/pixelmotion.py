"""Future-frame prediction for displacement fields.

The predictor estimates each grid node's velocity from the observed history
and adds it to the current frame, so an untrained network with a zeroed
velocity head is exactly the copy-last-frame baseline.  Rollouts feed
predictions back autoregressively; MSE/SSIM report how quickly they diverge.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, asdict, replace
from typing import Optional, Sequence

import numpy as np

from . import field as fd
from . import numerics as nx
from .checkpoint import load_params, save_params, write_atomic
from .errors import ConfigurationError, DimensionError, MetricError, StateError

SSIM_WINDOW = 7


@dataclass
class PredictorConfig:
    n_in: int = 10  # observed frames before the first prediction
    n_p: int = 5  # autoregressive steps
    enc_channels: tuple = (16, 32)
    hidden: int = 32  # ConvLSTM channels at the reduced resolution
    dec_channels: int = 16
    grid: tuple = (fd.GRID_H, fd.GRID_W)
    seed: int = 0

    def __post_init__(self):
        if self.n_in < 1:
            raise ConfigurationError(f"n_in must be >= 1, got {self.n_in}")
        if self.n_p < 0:
            raise ConfigurationError(f"n_p must be >= 0, got {self.n_p}")
        gh, gw = self.grid
        if gh % 2 or gw % 2:
            raise ConfigurationError(
                f"grid {self.grid} must have even sides so the x2 decoder "
                f"restores the input size"
            )
        if len(self.enc_channels) != 2:
            raise ConfigurationError("enc_channels must name two conv widths")

    @property
    def state_hw(self) -> tuple[int, int]:
        return self.grid[0] // 2, self.grid[1] // 2


@dataclass
class PredictorState:
    """ConvLSTM carry between steps.  Single-owner: do not share across
    concurrent rollouts."""

    h: nx.Tensor
    c: nx.Tensor
    steps: int = 0


@dataclass
class RolloutResult:
    predicted: np.ndarray  # (N_p, 2, H, W)
    mse: np.ndarray  # (N_p,), NaN when no ground truth was available
    ssim: np.ndarray  # (N_p,), NaN likewise
    truth: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def init_predictor(config: PredictorConfig) -> dict[str, nx.Tensor]:
    """Glorot encoder/decoder, zeroed velocity head (identity start)."""
    rng = nx.rng_from(config.seed, "init", "predictor")
    c1, c2 = config.enc_channels
    params: dict[str, nx.Tensor] = {}
    params["enc1.k"] = nx.parameter(nx.xavier_uniform(rng, (c1, fd.CHANNELS, 3, 3)))
    params["enc1.b"] = nx.parameter(np.zeros(c1, dtype=np.float32))
    params["enc2.k"] = nx.parameter(nx.xavier_uniform(rng, (c2, c1, 3, 3)))
    params["enc2.b"] = nx.parameter(np.zeros(c2, dtype=np.float32))
    cell = nx.init_convlstm_params(rng, c2, config.hidden, 3)
    params["cell.w"], params["cell.b"] = cell["w"], cell["b"]
    params["dec1.k"] = nx.parameter(nx.xavier_uniform(rng, (config.dec_channels, config.hidden, 3, 3)))
    params["dec1.b"] = nx.parameter(np.zeros(config.dec_channels, dtype=np.float32))
    params["head.k"] = nx.parameter(
        np.zeros((fd.CHANNELS, config.dec_channels, 3, 3), dtype=np.float32)
    )
    params["head.b"] = nx.parameter(np.zeros(fd.CHANNELS, dtype=np.float32))
    return params


def initial_state(config: PredictorConfig, batch: int = 1) -> PredictorState:
    sh, sw = config.state_hw
    shape = (batch, config.hidden, sh, sw)
    return PredictorState(
        h=nx.tensor(np.zeros(shape, dtype=np.float32)),
        c=nx.tensor(np.zeros(shape, dtype=np.float32)),
    )


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def step(
    params: dict, config: PredictorConfig, x: nx.Tensor, h: nx.Tensor, c: nx.Tensor
) -> tuple[nx.Tensor, nx.Tensor, nx.Tensor]:
    """One batched predictor step on Tensors; records on the active tape.

    x is (B, 2, H, W); returns (prediction, h', c').
    """
    c1, c2 = config.enc_channels
    z = nx.conv2d(x, params["enc1.k"], stride=2, padding="same")
    z = nx.relu(nx.add(z, nx.reshape(params["enc1.b"], (c1, 1, 1))))
    z = nx.conv2d(z, params["enc2.k"], stride=1, padding="same")
    z = nx.relu(nx.add(z, nx.reshape(params["enc2.b"], (c2, 1, 1))))
    h2, c2_state = nx.convlstm_cell(z, h, c, {"w": params["cell.w"], "b": params["cell.b"]})
    u = nx.upsample2x(h2)
    d = nx.conv2d(u, params["dec1.k"], stride=1, padding="same")
    d = nx.relu(nx.add(d, nx.reshape(params["dec1.b"], (config.dec_channels, 1, 1))))
    delta = nx.conv2d(d, params["head.k"], stride=1, padding="same")
    delta = nx.add(delta, nx.reshape(params["head.b"], (fd.CHANNELS, 1, 1)))
    return nx.add(x, delta), h2, c2_state


def _coerce_frame(frame, config: PredictorConfig) -> np.ndarray:
    arr = np.asarray(frame, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != (fd.CHANNELS, *config.grid):
        raise DimensionError(
            f"frame has shape {np.asarray(frame).shape}, predictor expects "
            f"({fd.CHANNELS}, {config.grid[0]}, {config.grid[1]})"
        )
    return arr


def predict_next(
    frame, state: PredictorState, params: dict, config: PredictorConfig
) -> tuple[np.ndarray, PredictorState]:
    """Predict the next displacement frame from the current one.

    The state threads the ConvLSTM memory between calls; obtain a fresh one
    from initial_state() per sequence.
    """
    if state is None:
        raise StateError("predictor state is uninitialized; call initial_state() first")
    arr = _coerce_frame(frame, config)
    if arr.shape[0] != state.h.shape[0]:
        raise StateError(
            f"state batch {state.h.shape[0]} does not match input batch {arr.shape[0]}"
        )
    pred, h2, c2 = step(params, config, nx.tensor(arr), state.h, state.c)
    out = pred.data[0] if np.asarray(frame).ndim == 3 else pred.data
    return out.copy(), PredictorState(h=h2, c=c2, steps=state.steps + 1)


def rollout(
    frames,
    params: dict,
    config: PredictorConfig,
    n_p: Optional[int] = None,
    data_range: Optional[float] = None,
) -> RolloutResult:
    """Warm up on the first n_in-1 frames, then predict n_p frames forward.

    When `frames` extends past n_in, the overlap is kept as ground truth and
    per-frame MSE/SSIM are filled in (SSIM needs data_range); otherwise the
    metric arrays are NaN.
    """
    n_p = config.n_p if n_p is None else n_p
    if n_p < 1:
        raise ConfigurationError(f"rollout needs n_p >= 1, got {n_p}")
    if isinstance(frames, fd.TactileSequence):
        frames = frames.frames
    arr = np.asarray(frames, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[1:] != (fd.CHANNELS, *config.grid):
        raise DimensionError(
            f"rollout expects (T, {fd.CHANNELS}, {config.grid[0]}, {config.grid[1]}) "
            f"frames, got {arr.shape}"
        )
    if arr.shape[0] < config.n_in:
        raise DimensionError(
            f"rollout needs at least n_in={config.n_in} observed frames, got {arr.shape[0]}"
        )
    state = initial_state(config)
    for t in range(config.n_in - 1):
        _, state = predict_next(arr[t], state, params, config)
    current = arr[config.n_in - 1]
    preds = []
    for _ in range(n_p):
        current, state = predict_next(current, state, params, config)
        preds.append(current)
    predicted = np.stack(preds)

    truth = None
    mse_arr = np.full(n_p, np.nan)
    ssim_arr = np.full(n_p, np.nan)
    if arr.shape[0] >= config.n_in + n_p:
        truth = arr[config.n_in : config.n_in + n_p]
        for k in range(n_p):
            mse_arr[k] = mse(predicted[k], truth[k])
            if data_range is not None:
                ssim_arr[k] = ssim(predicted[k], truth[k], data_range)
    return RolloutResult(predicted=predicted, mse=mse_arr, ssim=ssim_arr, truth=truth)


# ---------------------------------------------------------------------------
# Loss and metrics
# ---------------------------------------------------------------------------


def prediction_loss(pred, truth) -> nx.Tensor:
    """Mean over frames of the mean squared entry difference (differentiable)."""
    pred = nx.as_tensor(pred)
    truth = nx.as_tensor(truth)
    if pred.shape != truth.shape:
        raise DimensionError(
            f"prediction/truth shapes differ: {tuple(pred.shape)} vs {tuple(truth.shape)}"
        )
    diff = nx.sub(pred, truth)
    return nx.mean_all(nx.mul(diff, diff))


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"mse shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def ssim(a, b, data_range: float) -> float:
    """Structural similarity with a 7x7 uniform window over valid positions,
    per channel, averaged across the 2 channels.  Population (co)variances,
    C1=(0.01 L)^2, C2=(0.03 L)^2 with L=data_range."""
    if data_range is None or data_range <= 0:
        raise MetricError(f"data_range must be positive, got {data_range}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise DimensionError(f"ssim expects (C,H,W) or (H,W) frames, got {a.shape}")
    if a.shape[-2] < SSIM_WINDOW or a.shape[-1] < SSIM_WINDOW:
        raise DimensionError(
            f"frame {a.shape[-2]}x{a.shape[-1]} is smaller than the "
            f"{SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    vals = []
    for ch in range(a.shape[0]):
        wx = np.lib.stride_tricks.sliding_window_view(a[ch], (SSIM_WINDOW, SSIM_WINDOW))
        wy = np.lib.stride_tricks.sliding_window_view(b[ch], (SSIM_WINDOW, SSIM_WINDOW))
        mx = wx.mean(axis=(-1, -2))
        my = wy.mean(axis=(-1, -2))
        vx = (wx * wx).mean(axis=(-1, -2)) - mx * mx
        vy = (wy * wy).mean(axis=(-1, -2)) - my * my
        vxy = (wx * wy).mean(axis=(-1, -2)) - mx * my
        num = (2.0 * mx * my + c1) * (2.0 * vxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Cascade
# ---------------------------------------------------------------------------


def predict_event(
    frames,
    predictor: tuple[dict, PredictorConfig],
    classifier: tuple[dict, "object"],
    n_p: Optional[int] = None,
):
    """Roll predicted frames past the observed window, then classify the
    combined sequence: event probabilities a few frames ahead of the data.

    With n_p=0 this is plain classification of the observed frames.
    """
    from . import eventnet as ev

    p_params, p_config = predictor
    c_params, c_config = classifier
    if tuple(p_config.grid) != tuple(c_config.grid):
        raise ConfigurationError(
            f"predictor grid {p_config.grid} does not match classifier grid {c_config.grid}"
        )
    n_p = p_config.n_p if n_p is None else n_p
    if isinstance(frames, fd.TactileSequence):
        frames = frames.frames
    arr = np.asarray(frames, dtype=np.float32)
    start = time.perf_counter()
    if n_p > 0:
        result = rollout(arr, p_params, p_config, n_p=n_p)
        combined = np.concatenate([arr, result.predicted], axis=0)
    else:
        combined = arr
    out = ev.classify(c_params, c_config, combined)
    latency = (time.perf_counter() - start) * 1e3
    return replace(out, latency_ms=latency)


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


def rollout_strip(result: RolloutResult, v_max: float, separator_px: int = 1) -> np.ndarray:
    """Two-row image: ground truth over prediction, frames left to right."""
    if result.truth is None:
        raise ConfigurationError("rollout has no ground truth; nothing to compare")
    top = fd.sequence_strip(result.truth, v_max, separator_px=separator_px)
    bottom = fd.sequence_strip(result.predicted, v_max, separator_px=separator_px)
    sep = np.full((separator_px, top.shape[1], 3), 255, dtype=np.uint8)
    return np.concatenate([top, sep, bottom], axis=0)


def save_rollout_strip(path: str, result: RolloutResult, v_max: float) -> None:
    fd.write_ppm(path, rollout_strip(result, v_max))


def write_metrics_csv(path: str, results: Sequence[RolloutResult]) -> None:
    """Per-future-frame aggregate metrics over a batch of rollouts."""
    if not results:
        raise ConfigurationError("no rollout results to aggregate")
    n_p = len(results[0].mse)
    if any(len(r.mse) != n_p for r in results):
        raise DimensionError("rollouts disagree on horizon length")
    mse_all = np.stack([r.mse for r in results])
    ssim_all = np.stack([r.ssim for r in results])
    rows = []
    for k in range(n_p):
        rows.append(
            {
                "frame_index": k + 1,
                "mse_mean": float(np.mean(mse_all[:, k])),
                "mse_std": float(np.std(mse_all[:, k])),
                "ssim_mean": float(np.mean(ssim_all[:, k])),
                "ssim_std": float(np.std(ssim_all[:, k])),
            }
        )
    _write_csv(path, ["frame_index", "mse_mean", "mse_std", "ssim_mean", "ssim_std"], rows)


def _write_csv(path: str, fieldnames: list[str], rows: list[dict]) -> None:
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames)
    writer.writeheader()
    writer.writerows(rows)
    write_atomic(path, buf.getvalue().encode("utf-8"))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_predictor(path: str, config: PredictorConfig, params: dict) -> None:
    save_params(path, {"kind": "predictor", "config": asdict(config)}, params)


def load_predictor(path: str) -> tuple[PredictorConfig, dict[str, nx.Tensor]]:
    desc, arrays = load_params(path)
    if desc.get("kind") != "predictor":
        raise ConfigurationError(f"{path} does not hold a predictor checkpoint")
    raw = dict(desc["config"])
    raw["enc_channels"] = tuple(raw.get("enc_channels", (16, 32)))
    raw["grid"] = tuple(raw.get("grid", (fd.GRID_H, fd.GRID_W)))
    config = PredictorConfig(**raw)
    reference = init_predictor(config)
    if set(arrays) != set(reference):
        raise ConfigurationError(
            f"checkpoint parameters {sorted(arrays)} do not match predictor "
            f"layout {sorted(reference)}"
        )
    params = {}
    for name, ref in reference.items():
        if arrays[name].shape != ref.data.shape:
            raise DimensionError(
                f"parameter {name} has shape {arrays[name].shape}, expected {ref.data.shape}"
            )
        params[name] = nx.parameter(arrays[name])
    return config, params
