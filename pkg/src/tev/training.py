"""Training loops, early stopping, and evaluation for both networks.

The same loop trains the classifier (cross-entropy on the window label) and
the predictor (mean squared frame error over an autoregressive rollout); the
two differ only in how a batch of sequences turns into a scalar loss.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import dataset as ds
from . import eventnet as ev
from . import numerics as nx
from . import pixelmotion as pm
from .errors import ConfigurationError, TrainingError

CLASSIFIER_LR = 4e-5
PREDICTOR_LR = 6e-5


@dataclass
class TrainConfig:
    """Optimizer and stopping policy for one training run.

    The learning rate decays by `lr_decay` once per epoch.  Early stopping
    triggers after `patience` consecutive epochs without the validation loss
    improving by at least `min_delta`; patience 0 stops at the first
    non-improving epoch.
    """

    lr: float = CLASSIFIER_LR
    batch_size: int = 16
    weight_decay: float = 0.05
    lr_decay: float = 0.95
    patience: int = 10
    min_delta: float = 1e-4
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigurationError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.patience < 0:
            raise ConfigurationError(f"patience must be >= 0, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigurationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.min_delta < 0:
            raise ConfigurationError(f"min_delta must be >= 0, got {self.min_delta}")


def default_train_config(kind: str, **overrides) -> TrainConfig:
    """Per-network starting points: 4e-5 for classifiers, 6e-5 for the predictor."""
    if kind not in ("classifier", "predictor"):
        raise ConfigurationError(f"unknown model kind {kind!r}")
    overrides.setdefault("lr", CLASSIFIER_LR if kind == "classifier" else PREDICTOR_LR)
    return TrainConfig(**overrides)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class History:
    """Per-epoch record of one run plus where it stopped and why."""

    rows: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    stopped: str = "max_epochs"  # or "early", "diverged"

    @property
    def end_epoch(self) -> int:
        return self.rows[-1].epoch if self.rows else -1


def write_history_csv(path, history: History) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in history.rows:
            w.writerow([r.epoch, f"{r.train_loss:.8f}", f"{r.val_loss:.8f}", f"{r.lr:.10g}"])


# ---------------------------------------------------------------------------
# Batch losses
# ---------------------------------------------------------------------------


class _ClassifierTask:
    def __init__(self, config: ev.ClassifierConfig):
        self.config = config

    def prepare(self, corpus: ds.Corpus):
        x = np.stack([s.frames for s in corpus.sequences]).astype(np.float32)
        y = np.stack([ds.one_hot(s.label) for s in corpus.sequences])
        return x, y

    def loss(self, params, items, idx, mode, rng) -> nx.Tensor:
        x, y = items
        probs = ev.forward(params, self.config, x[idx], mode=mode, rng=rng)
        return nx.cross_entropy(probs, y[idx])


class _PredictorTask:
    def __init__(self, config: pm.PredictorConfig):
        self.config = config

    def prepare(self, corpus: ds.Corpus):
        x = np.stack([s.frames for s in corpus.sequences]).astype(np.float32)
        need = self.config.n_in + self.config.n_p
        if x.shape[1] < need:
            raise ConfigurationError(
                f"sequences have {x.shape[1]} frames; rollout training needs "
                f"n_in + n_p = {need}"
            )
        return x

    def loss(self, params, items, idx, mode, rng) -> nx.Tensor:
        cfg = self.config
        batch = items[idx]
        state = pm.initial_state(cfg, batch=batch.shape[0])
        h, c = state.h, state.c
        # Teacher-forced warmup, then the model rides its own output.
        for t in range(cfg.n_in - 1):
            _, h, c = pm.step(params, cfg, nx.tensor(batch[:, t]), h, c)
        current = nx.tensor(batch[:, cfg.n_in - 1])
        total = None
        for k in range(cfg.n_p):
            current, h, c = pm.step(params, cfg, current, h, c)
            l_k = pm.prediction_loss(current, batch[:, cfg.n_in + k])
            total = l_k if total is None else nx.add(total, l_k)
        return nx.mul(total, nx.tensor(np.float32(1.0 / cfg.n_p)))


def _task_for(net_config):
    if isinstance(net_config, ev.ClassifierConfig):
        return _ClassifierTask(net_config)
    if isinstance(net_config, pm.PredictorConfig):
        return _PredictorTask(net_config)
    raise ConfigurationError(f"cannot train a {type(net_config).__name__}")


def _snapshot(params) -> dict:
    return {k: nx.Tensor(p.data.copy()) for k, p in params.items()}


def _eval_loss(task, params, items, n: int, batch_size: int) -> float:
    """Sequence-weighted mean loss in infer mode, no tape."""
    total, seen = 0.0, 0
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(lo + batch_size, n))
        l = task.loss(params, items, idx, "infer", None)
        total += float(l.data) * idx.size
        seen += idx.size
    return total / seen


def train(model, corpus, cfg: TrainConfig, val_corpus: Optional[ds.Corpus] = None):
    """Train `model = (net_config, params)` and return (best params, History).

    `corpus` is the training set when `val_corpus` is given, otherwise it is
    split 9:1 (stratified, seeded by cfg.seed).  Each epoch shuffles with a
    seed derived from (cfg.seed, epoch), so a rerun with the same inputs
    reproduces the history exactly.  The returned parameters are the
    best-validation snapshot, which is also what a non-finite loss or
    gradient falls back to.
    """
    net_config, params = model
    task = _task_for(net_config)
    if val_corpus is None:
        corpus, val_corpus = ds.split(corpus, (9, 1), seed=cfg.seed)
    if not corpus.sequences or not val_corpus.sequences:
        raise ConfigurationError("training and validation sets must be nonempty")

    train_items = task.prepare(corpus)
    val_items = task.prepare(val_corpus)
    n_train = len(corpus.sequences)
    n_val = len(val_corpus.sequences)

    state = nx.AdamState(params, nx.LrSchedule(cfg.lr, cfg.lr_decay), cfg.weight_decay)
    history = History()
    best = _snapshot(params)
    since_improve = 0

    for epoch in range(cfg.max_epochs):
        state.epoch = epoch
        order = nx.rng_from(cfg.seed, "shuffle", epoch).permutation(n_train)
        drop_rng = nx.rng_from(cfg.seed, "dropout", epoch)
        total, seen = 0.0, 0
        diverged = False
        for lo in range(0, n_train, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            try:
                with nx.Tape() as tape:
                    loss = task.loss(params, train_items, idx, "train", drop_rng)
                    if not np.isfinite(loss.data):
                        raise TrainingError("non-finite training loss")
                    tape.backward(loss)
                    grads = {k: tape.grad(p) for k, p in params.items()}
                nx.adam_step(params, grads, state)
            except TrainingError:
                diverged = True
                break
            total += float(loss.data) * idx.size
            seen += idx.size
        if diverged:
            history.stopped = "diverged"
            break
        train_loss = total / seen
        val_loss = _eval_loss(task, params, val_items, n_val, cfg.batch_size)
        if not np.isfinite(val_loss):
            history.stopped = "diverged"
            break
        history.rows.append(EpochStats(epoch, train_loss, val_loss, state.schedule.at(epoch)))
        if val_loss < history.best_val_loss - cfg.min_delta:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best = _snapshot(params)
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= max(cfg.patience, 1):
                history.stopped = "early"
                break
    return best, history


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Macro-averaged classification metrics plus forward-time benchmark."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: np.ndarray  # (K, K), rows are true labels
    t_f_ms: float
    n_in: int
    end_epoch: int = -1


def metrics_from_confusion(confusion) -> tuple[float, float, float, float]:
    """(accuracy, macro precision, macro recall, macro F1) from counts alone.

    Zero-support or never-predicted classes contribute 0 to the macro means.
    """
    conf = np.asarray(confusion, dtype=np.float64)
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
        raise ConfigurationError(f"confusion matrix must be square, got {conf.shape}")
    total = conf.sum()
    if total == 0:
        raise ConfigurationError("confusion matrix is empty")
    diag = np.diag(conf)
    col = conf.sum(axis=0)
    row = conf.sum(axis=1)
    prec = np.divide(diag, col, out=np.zeros_like(diag), where=col > 0)
    rec = np.divide(diag, row, out=np.zeros_like(diag), where=row > 0)
    pr = prec + rec
    f1 = np.divide(2 * prec * rec, pr, out=np.zeros_like(diag), where=pr > 0)
    return float(diag.sum() / total), float(prec.mean()), float(rec.mean()), float(f1.mean())


def confusion_matrix(true_labels, pred_labels, n_classes: int = len(ds.CLASS_NAMES)) -> np.ndarray:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(pred_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ConfigurationError(f"label arrays differ in length: {t.shape} vs {p.shape}")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (t, p), 1)
    return conf


def _timed_forward_ms(params, config, sequences, n_timing: int, warmup: int = 10) -> float:
    if n_timing <= 0:
        return float("nan")
    for i in range(warmup):
        ev.classify(params, config, sequences[i % len(sequences)])
    t0 = time.perf_counter()
    for i in range(n_timing):
        ev.classify(params, config, sequences[i % len(sequences)])
    return (time.perf_counter() - t0) / n_timing * 1000.0


def evaluate_classifier(
    params,
    config: ev.ClassifierConfig,
    corpus: ds.Corpus,
    n_timing: int = 100,
    end_epoch: int = -1,
    batch_size: int = 64,
) -> EvalReport:
    """Confusion matrix over `corpus`, macro metrics, and mean forward time.

    The timing loop runs `n_timing` single-sequence forwards after 10
    warmups (pass 0 to skip timing; t_f_ms is then NaN).
    """
    if not corpus.sequences:
        raise ConfigurationError("evaluation needs a nonempty corpus")
    x = np.stack([s.frames for s in corpus.sequences]).astype(np.float32)
    preds = np.empty(len(corpus.sequences), dtype=np.int64)
    for lo in range(0, x.shape[0], batch_size):
        probs = ev.forward(params, config, x[lo : lo + batch_size], mode="infer")
        preds[lo : lo + probs.data.shape[0]] = np.argmax(probs.data, axis=1)
    conf = confusion_matrix(corpus.labels(), preds)
    acc, prec, rec, f1 = metrics_from_confusion(conf)
    t_f = _timed_forward_ms(params, config, corpus.sequences, n_timing)
    return EvalReport(acc, prec, rec, f1, conf, t_f, config.input_len, end_epoch)


def write_eval_csv(path, reports) -> None:
    """One row per named report: `reports` is a dict or (name, report) pairs."""
    pairs = reports.items() if isinstance(reports, dict) else reports
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "accuracy", "precision", "recall", "f1", "t_f_ms", "n_in", "end_epoch"])
        for name, r in pairs:
            w.writerow(
                [name, f"{r.accuracy:.6f}", f"{r.precision:.6f}", f"{r.recall:.6f}",
                 f"{r.f1:.6f}", f"{r.t_f_ms:.4f}", r.n_in, r.end_epoch]
            )


def evaluate_predictor(
    params,
    config: pm.PredictorConfig,
    corpus: ds.Corpus,
    n_p: int = 5,
    csv_path=None,
) -> list[dict]:
    """Mean and std of MSE/SSIM per future frame index 1..n_p over `corpus`.

    Every sequence must be long enough to hold n_in observed plus n_p truth
    frames.  Writes the table to csv_path when given.
    """
    if not corpus.sequences:
        raise ConfigurationError("evaluation needs a nonempty corpus")
    results = [
        pm.rollout(s.frames, params, config, n_p=n_p, data_range=corpus.data_range)
        for s in corpus.sequences
    ]
    if any(r.truth is None for r in results):
        raise ConfigurationError(
            f"sequences too short for n_in={config.n_in} plus n_p={n_p} truth frames"
        )
    mse = np.stack([r.mse for r in results])
    ssim = np.stack([r.ssim for r in results])
    rows = [
        {
            "frame_index": k + 1,
            "mse_mean": float(mse[:, k].mean()),
            "mse_std": float(mse[:, k].std()),
            "ssim_mean": float(ssim[:, k].mean()),
            "ssim_std": float(ssim[:, k].std()),
        }
        for k in range(n_p)
    ]
    if csv_path is not None:
        pm.write_metrics_csv(csv_path, results)
    return rows


# ---------------------------------------------------------------------------
# Input-length sweep
# ---------------------------------------------------------------------------


def sweep_n_in(
    variant: str,
    corpus: ds.Corpus,
    cfg: TrainConfig,
    n_in_values: Sequence[int] = tuple(range(1, 16)),
    n_timing: int = 0,
    **net_overrides,
):
    """Train one classifier per window length and pick the most accurate.

    Returns (best_n_in, [(n_in, EvalReport), ...]) with reports in the order
    of `n_in_values`; ties go to the earliest candidate.  The same seeded
    split is reused for every candidate so accuracies are comparable.
    """
    n_in_values = list(n_in_values)
    if not n_in_values:
        raise ConfigurationError("sweep needs at least one n_in value")
    net_overrides.setdefault("seed", cfg.seed)
    train_set, val_set = ds.split(corpus, (9, 1), seed=cfg.seed)
    reports = []
    for n_in in n_in_values:
        net_cfg = ev.default_config(variant, input_len=n_in, **net_overrides)
        params = ev.init_classifier(net_cfg)
        best, history = train((net_cfg, params), train_set, cfg, val_corpus=val_set)
        report = evaluate_classifier(
            best, net_cfg, val_set, n_timing=n_timing, end_epoch=history.end_epoch
        )
        reports.append((n_in, report))
    top = max(r.accuracy for _, r in reports)
    best_n_in = next(n for n, r in reports if r.accuracy == top)
    return best_n_in, reports
