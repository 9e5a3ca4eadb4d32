"""Dense float32 tensors with taped reverse-mode differentiation.

The engine is deliberately small: a Tensor is a numpy float32 array plus a
requires_grad flag, and gradients are computed by a ComputationTape that
records closures during the forward pass and replays them in reverse.  Ops
are module-level functions; layers (LSTM cell, ConvLSTM cell) are built by
composing the primitives, so one finite-difference harness covers everything.

No tape is active unless the caller opens one, which makes inference over
frozen parameters allocation-light and safe for concurrent callers (each
caller owns its own tape).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigurationError,
    DimensionError,
    LabelError,
    StateError,
    TrainingError,
)

_f32 = np.float32

# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A dense float32 array, optionally participating in differentiation."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_f32)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"

    # Arithmetic sugar; the real work happens in the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False) -> Tensor:
    t = Tensor(data, requires_grad)
    if not np.all(np.isfinite(t.data)):
        raise TrainingError("tensor initialized with non-finite values")
    return t


def parameter(data) -> Tensor:
    return tensor(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records forward operations so gradients can be replayed in reverse.

    Use as a context manager::

        with Tape() as tape:
            loss = model_loss(...)
        tape.backward(loss)
        g = tape.grad(param)

    Backward walks the recorded nodes in reverse order exactly once; a second
    call raises StateError.  Gradient accumulators live on the tape keyed by
    tensor identity, so parameters never carry stale gradients between steps.
    Fan-out (a tensor consumed by several ops) accumulates by summation.
    """

    __slots__ = ("_nodes", "_acc", "_done")

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple]] = []
        self._acc: dict[int, np.ndarray] = {}
        self._done = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise StateError("tape stack corrupted by unbalanced enter/exit")
        return False

    def _record(self, out: Tensor, pairs) -> None:
        # pairs: sequence of (input tensor, fn(grad_out) -> grad_input)
        self._nodes.append((out, tuple(pairs)))

    def backward(self, loss: Tensor) -> None:
        if self._done:
            raise StateError("backward may run only once per tape")
        self._done = True
        if loss.data.size != 1:
            raise DimensionError(
                f"backward needs a scalar loss, got shape {tuple(loss.shape)}"
            )
        acc = self._acc
        acc[id(loss)] = np.ones_like(loss.data)
        for out, pairs in reversed(self._nodes):
            # Every contribution to an accumulator lands before its producing
            # node is visited, so the entry can be popped here.  Leaves
            # (parameters, inputs) have no producing node and stay readable
            # through grad(); intermediate buffers are freed promptly, which
            # keeps deep rollout tapes within memory.
            g = acc.pop(id(out), None)
            if g is None:
                continue
            for t, fn in pairs:
                gi = fn(g)
                tid = id(t)
                prev = acc.get(tid)
                acc[tid] = gi if prev is None else prev + gi

    def grad(self, t: Tensor) -> np.ndarray | None:
        g = self._acc.get(id(t))
        if g is not None and g.shape != t.data.shape:  # pragma: no cover
            raise DimensionError(
                f"gradient shape {g.shape} does not match value shape {t.data.shape}"
            )
        return g


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _maybe_record(out: Tensor, pairs) -> Tensor:
    tape = _active_tape()
    if tape is not None:
        grad_pairs = [(t, fn) for (t, fn) in pairs if t.requires_grad]
        if grad_pairs:
            out.requires_grad = True
            tape._record(out, grad_pairs)
    return out


# ---------------------------------------------------------------------------
# Elementwise and shape ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    ash, bsh = a.data.shape, b.data.shape
    return _maybe_record(
        out,
        [
            (a, lambda g: _unbroadcast(g, ash)),
            (b, lambda g: _unbroadcast(g, bsh)),
        ],
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    ash, bsh = a.data.shape, b.data.shape
    return _maybe_record(
        out,
        [
            (a, lambda g: _unbroadcast(g, ash)),
            (b, lambda g: _unbroadcast(-g, bsh)),
        ],
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)
    return _maybe_record(
        out,
        [
            (a, lambda g: _unbroadcast(g * bd, ad.shape)),
            (b, lambda g: _unbroadcast(g * ad, bd.shape)),
        ],
    )


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = _f32(s)
    out = Tensor(a.data * s)
    return _maybe_record(out, [(a, lambda g: g * s)])


def relu(a: Tensor) -> Tensor:
    ad = a.data
    out = Tensor(np.maximum(ad, 0.0))
    return _maybe_record(out, [(a, lambda g: g * (ad > 0))])


def sigmoid(a: Tensor) -> Tensor:
    od = 1.0 / (1.0 + np.exp(np.clip(-a.data, -60.0, 60.0), dtype=_f32))
    out = Tensor(od)
    return _maybe_record(out, [(a, lambda g: g * od * (1.0 - od))])


def tanh(a: Tensor) -> Tensor:
    od = np.tanh(a.data)
    out = Tensor(od)
    return _maybe_record(out, [(a, lambda g: g * (1.0 - od * od))])


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    ash = a.data.shape
    out = Tensor(a.data.mean(dtype=_f32))
    return _maybe_record(out, [(a, lambda g: np.broadcast_to(g / n, ash).astype(_f32))])


def reshape(a: Tensor, shape) -> Tensor:
    ash = a.data.shape
    out = Tensor(a.data.reshape(shape))
    return _maybe_record(out, [(a, lambda g: g.reshape(ash))])


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def slicer(i):
        lo, hi = offsets[i], offsets[i + 1]

        def fn(g, lo=lo, hi=hi):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return fn

    return _maybe_record(out, [(p, slicer(i)) for i, p in enumerate(parts)])


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    ash = a.data.shape
    out = Tensor(a.data[idx].copy())

    def fn(g):
        full = np.zeros(ash, dtype=_f32)
        full[idx] = g
        return full

    return _maybe_record(out, [(a, fn)])


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise DimensionError(
            f"matmul expects (m,k)x(k,n); got {tuple(ad.shape)} x {tuple(bd.shape)}"
        )
    out = Tensor(ad @ bd)
    return _maybe_record(
        out,
        [
            (a, lambda g: g @ bd.T),
            (b, lambda g: ad.T @ g),
        ],
    )


def _conv_geometry(h: int, w: int, k: int, stride: int, padding: str):
    if stride < 1:
        raise ConfigurationError(f"conv2d stride must be >= 1, got {stride}")
    if padding == "same":
        if k % 2 == 0:
            raise ConfigurationError(f"same-padding requires odd kernel, got k={k}")
        p = k // 2
    elif padding == "valid":
        p = 0
    else:
        raise ConfigurationError(f"padding must be 'same' or 'valid', got {padding!r}")
    hp, wp = h + 2 * p, w + 2 * p
    if k > hp or k > wp:
        raise DimensionError(
            f"kernel {k}x{k} larger than padded input {hp}x{wp}"
        )
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    return p, ho, wo


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp: (B, C, Hp, Wp) -> (B*ho*wo, C*k*k)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, ho, wo, k, k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(xp.shape[0] * ho * wo, -1)
    return np.ascontiguousarray(cols)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Batched cross-correlation.

    `x` may be (C,H,W) or (B,C,H,W); `kernels` is (C_out, C_in, k, k) with a
    square kernel.  Same-padding keeps H and W when stride is 1.  The column
    matrix is rebuilt during backward rather than stored, trading a little
    compute for a much smaller tape.
    """
    x = as_tensor(x)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = kernels.data
    if xd.ndim != 4 or wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise DimensionError(
            f"conv2d expects (B,C,H,W) and (Co,Ci,k,k); got {tuple(x.shape)} "
            f"and {tuple(kernels.shape)}"
        )
    b, c, h, w = xd.shape
    co, ci, k, _ = wd.shape
    if ci != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, kernels expect {ci}")
    p, ho, wo = _conv_geometry(h, w, k, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = wd.reshape(co, -1)
    od = (cols @ wmat.T).reshape(b, ho, wo, co).transpose(0, 3, 1, 2)
    out = Tensor(np.ascontiguousarray(od[0] if squeeze else od))

    def grad_x(g):
        go = (g[None] if squeeze else g).transpose(0, 2, 3, 1).reshape(b * ho * wo, co)
        dcols = (go @ wmat).reshape(b, ho, wo, c, k, k)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=_f32)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        return dx[0] if squeeze else dx

    def grad_w(g):
        go = (g[None] if squeeze else g).transpose(0, 2, 3, 1).reshape(b * ho * wo, co)
        cols2 = _im2col(xp, k, stride, ho, wo)
        return (go.T @ cols2).reshape(wd.shape)

    return _maybe_record(out, [(x, grad_x), (kernels, grad_w)])


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling on the trailing two axes."""
    xd = x.data
    od = np.repeat(np.repeat(xd, 2, axis=-2), 2, axis=-1)
    out = Tensor(od)
    lead = xd.shape[:-2]
    h, w = xd.shape[-2:]

    def fn(g):
        return g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1), dtype=_f32)

    return _maybe_record(out, [(x, fn)])


# ---------------------------------------------------------------------------
# Probability heads
# ---------------------------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction."""
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted, dtype=_f32)
    od = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(od)

    def fn(g):
        dot = (g * od).sum(axis=-1, keepdims=True)
        return ((g - dot) * od).astype(_f32, copy=False)

    return _maybe_record(out, [(x, fn)])


_LOG_FLOOR = 1e-12


def cross_entropy(probs: Tensor, onehot) -> Tensor:
    """Mean over the batch of -log p_true; p is clamped at 1e-12 before log."""
    probs = as_tensor(probs)
    oh = np.asarray(onehot.data if isinstance(onehot, Tensor) else onehot, dtype=_f32)
    pd = probs.data
    if pd.ndim == 1:
        pd2, oh2 = pd[None], oh[None]
    else:
        pd2, oh2 = pd, oh
    if pd2.shape != oh2.shape or pd2.ndim != 2:
        raise DimensionError(
            f"cross_entropy expects matching (B,C) arrays; got {pd.shape} vs {oh.shape}"
        )
    if not np.all((oh2 == 0.0) | (oh2 == 1.0)) or not np.all(oh2.sum(axis=1) == 1.0):
        raise LabelError("one-hot rows must contain exactly one 1 and zeros elsewhere")
    batch = pd2.shape[0]
    p_true = (pd2 * oh2).sum(axis=1)
    clamped = np.maximum(p_true, _LOG_FLOOR)
    out = Tensor(np.mean(-np.log(clamped), dtype=_f32))

    def fn(g):
        live = (p_true > _LOG_FLOOR).astype(_f32)
        gp = -(oh2 / clamped[:, None]) * (live * float(g) / batch)[:, None]
        return gp.astype(_f32)[0] if pd.ndim == 1 else gp.astype(_f32)

    return _maybe_record(out, [(probs, fn)])


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train scales survivors by 1/(1-p); infer is identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0,1), got {p}")
    if mode == "infer" or p == 0.0:
        return x
    if mode != "train":
        raise ConfigurationError(f"dropout mode must be 'train' or 'infer', got {mode!r}")
    if rng is None:
        raise ConfigurationError("dropout in train mode needs an rng")
    keep = (rng.random(x.data.shape) >= p).astype(_f32) / _f32(1.0 - p)
    out = Tensor(x.data * keep)
    return _maybe_record(out, [(x, lambda g: g * keep)])


# ---------------------------------------------------------------------------
# Recurrent cells
# ---------------------------------------------------------------------------


def _promote_rows(t: Tensor) -> tuple[Tensor, bool]:
    if t.data.ndim == 1:
        return reshape(t, (1, t.data.shape[0])), True
    return t, False


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, params: dict) -> tuple[Tensor, Tensor]:
    """One LSTM step.

    `params["w"]` is ((d_in + d_h) x 4*d_h) with gate blocks ordered
    input, forget, candidate, output; `params["b"]` is (4*d_h,).  Inputs may
    be single rows (d,) or batches (B, d).
    """
    x, squeezed = _promote_rows(as_tensor(x))
    h, _ = _promote_rows(as_tensor(h))
    c, _ = _promote_rows(as_tensor(c))
    w, bias = params["w"], params["b"]
    d_in, d_h = x.shape[1], h.shape[1]
    if w.shape != (d_in + d_h, 4 * d_h) or bias.shape != (4 * d_h,):
        raise DimensionError(
            f"lstm_cell params w{tuple(w.shape)}/b{tuple(bias.shape)} inconsistent "
            f"with d_in={d_in}, d_h={d_h}"
        )
    z = add(matmul(concat([x, h], axis=1), w), bias)
    i = sigmoid(narrow(z, 1, 0, d_h))
    f = sigmoid(narrow(z, 1, d_h, d_h))
    g = tanh(narrow(z, 1, 2 * d_h, d_h))
    o = sigmoid(narrow(z, 1, 3 * d_h, d_h))
    c2 = add(mul(f, c), mul(i, g))
    h2 = mul(o, tanh(c2))
    if squeezed:
        h2, c2 = reshape(h2, (d_h,)), reshape(c2, (d_h,))
    return h2, c2


def convlstm_cell(x: Tensor, h: Tensor, c: Tensor, params: dict) -> tuple[Tensor, Tensor]:
    """One ConvLSTM step: LSTM gate equations with same-padding convolutions.

    `params["w"]` is (4*C_h, C_in + C_h, k, k); `params["b"]` is (4*C_h,).
    Spatial dims of x and state must agree and are preserved.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    squeeze = x.data.ndim == 3
    if squeeze:
        x, h, c = (reshape(t, (1, *t.shape)) for t in (x, h, c))
    if x.shape[2:] != h.shape[2:] or h.shape != c.shape:
        raise DimensionError(
            f"convlstm_cell spatial mismatch: x {tuple(x.shape)}, h {tuple(h.shape)}, "
            f"c {tuple(c.shape)}"
        )
    w, bias = params["w"], params["b"]
    c_h = h.shape[1]
    if w.shape[0] != 4 * c_h or w.shape[1] != x.shape[1] + c_h:
        raise DimensionError(
            f"convlstm_cell kernels {tuple(w.shape)} inconsistent with "
            f"C_in={x.shape[1]}, C_h={c_h}"
        )
    z = add(conv2d(concat([x, h], axis=1), w, 1, "same"), reshape(bias, (4 * c_h, 1, 1)))
    i = sigmoid(narrow(z, 1, 0, c_h))
    f = sigmoid(narrow(z, 1, c_h, c_h))
    g = tanh(narrow(z, 1, 2 * c_h, c_h))
    o = sigmoid(narrow(z, 1, 3 * c_h, c_h))
    c2 = add(mul(f, c), mul(i, g))
    h2 = mul(o, tanh(c2))
    if squeeze:
        h2 = reshape(h2, h2.shape[1:])
        c2 = reshape(c2, c2.shape[1:])
    return h2, c2


# ---------------------------------------------------------------------------
# Initialization and RNG
# ---------------------------------------------------------------------------


def rng_from(seed: int, *path) -> np.random.Generator:
    """Derive an independent counter-based stream from a root seed.

    Path elements (ints or short strings) name sub-streams, so e.g. every
    sequence in a corpus gets its own reproducible generator regardless of
    generation order.  Philox is counter-based, giving identical output on
    every platform.
    """
    key = tuple(
        p if isinstance(p, (int, np.integer)) else zlib.crc32(str(p).encode())
        for p in path
    )
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def xavier_uniform(rng: np.random.Generator, shape, fan: tuple[int, int] | None = None) -> np.ndarray:
    """Glorot-uniform draw.  Default fans: (rows, cols) for matrices,
    (Ci*k*k, Co*k*k) for conv kernels."""
    shape = tuple(shape)
    if fan is None:
        if len(shape) == 2:
            fan = (shape[0], shape[1])
        elif len(shape) == 4:
            rec = shape[2] * shape[3]
            fan = (shape[1] * rec, shape[0] * rec)
        else:
            raise ConfigurationError(f"no default fan for shape {shape}")
    limit = float(np.sqrt(6.0 / (fan[0] + fan[1])))
    return rng.uniform(-limit, limit, size=shape).astype(_f32)


def init_lstm_params(rng: np.random.Generator, d_in: int, d_h: int) -> dict:
    """Glorot weights over the combined gate matrix; zero biases except the
    forget gate, which starts at 1 so early training does not flush state."""
    w = xavier_uniform(rng, (d_in + d_h, 4 * d_h))
    b = np.zeros(4 * d_h, dtype=_f32)
    b[d_h : 2 * d_h] = 1.0
    return {"w": parameter(w), "b": parameter(b)}


def init_convlstm_params(rng: np.random.Generator, c_in: int, c_h: int, k: int) -> dict:
    rec = k * k
    w = xavier_uniform(rng, (4 * c_h, c_in + c_h, k, k), fan=((c_in + c_h) * rec, 4 * c_h * rec))
    b = np.zeros(4 * c_h, dtype=_f32)
    b[c_h : 2 * c_h] = 1.0
    return {"w": parameter(w), "b": parameter(b)}


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    """Base learning rate decayed geometrically once per epoch."""

    base: float
    epoch_decay: float = 1.0

    def at(self, epoch: int) -> float:
        return self.base * self.epoch_decay**epoch


class AdamState:
    """Optimizer state: first/second moments per parameter plus step count.

    Weight decay is classical L2: lambda * theta is added to the gradient
    before the moment update (not the decoupled variant).
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        schedule: LrSchedule | float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.schedule = schedule if isinstance(schedule, LrSchedule) else LrSchedule(float(schedule))
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.epoch = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState) -> dict[str, Tensor]:
    """Apply one bias-corrected Adam update in place; returns `params`.

    Aborts (raising TrainingError, with no parameter touched) if any provided
    gradient contains NaN/Inf.  Parameters with a missing/None gradient are
    left unchanged.
    """
    live = [(k, g) for k, g in grads.items() if g is not None and k in params]
    for k, g in live:
        if g.shape != params[k].data.shape:
            raise DimensionError(
                f"gradient for {k!r} has shape {g.shape}, parameter is {params[k].data.shape}"
            )
        # Sum-based probe: one pass, and NaN/Inf poison the reduction.
        if not np.isfinite(np.sum(g, dtype=np.float64)):
            raise TrainingError(f"non-finite gradient for parameter {k!r}; step aborted")
    state.t += 1
    lr = state.schedule.at(state.epoch)
    b1, b2, eps, lam = state.beta1, state.beta2, state.eps, state.weight_decay
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, g in live:
        p = params[k]
        if lam:
            g = g + _f32(lam) * p.data
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)
    return params
