"""NMSE training with Adam and per-epoch learning-rate decay."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from channelkan.channel import WindowDataset
from channelkan.errors import DimensionError, DivergenceError, EmptyDatasetError, UndefinedNormalizationError
from channelkan.model import ModelConfig, ModelParams, forward_realified, realify, save_checkpoint, unrealify
from channelkan.numerics import autograd as ag

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr0: float = 1e-3
    decay: float = 0.98
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    patience: int = 20

    def __post_init__(self):
        if self.lr0 < 0:
            raise ValueError("lr0 must be >= 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_nmse: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_score: float = math.inf
    first_epoch: int = 0
    checkpoint_path: str | None = None

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def rows(self):
        for i in range(self.epochs_run):
            yield {
                "epoch": self.first_epoch + i,
                "train_loss": repr(self.train_loss[i]),
                "val_nmse": repr(self.val_nmse[i]),
                "lr": repr(self.lr[i]),
            }

    def write_csv(self, path, timings_path=None):
        """Loss trace CSV; wall-clock seconds go to a separate file if asked."""
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_nmse", "lr"])
            writer.writeheader()
            writer.writerows(self.rows())
        if timings_path is not None:
            with open(timings_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["epoch", "seconds"])
                for i, s in enumerate(self.seconds):
                    writer.writerow([self.first_epoch + i, f"{s:.6f}"])


# -- loss --------------------------------------------------------------------


def nmse_loss(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean over samples of ||pred - truth||^2 / ||truth||^2.

    Accepts a single (L, K, pairs) window or a leading batch axis.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"pred {pred.shape} and truth {truth.shape} differ")
    if truth.ndim == 3:
        pred, truth = pred[None], truth[None]
    axes = tuple(range(1, truth.ndim))
    den = np.sum(np.abs(truth) ** 2, axis=axes)
    if np.any(den == 0):
        raise UndefinedNormalizationError("NMSE undefined for an all-zero ground truth")
    num = np.sum(np.abs(pred - truth) ** 2, axis=axes)
    return float(np.mean(num / den))


def nmse_tensor(out: ag.Tensor, target: np.ndarray) -> ag.Tensor:
    """Differentiable batch NMSE on realified (B, n) predictions."""
    den = np.sum(target * target, axis=1)
    if np.any(den == 0):
        raise UndefinedNormalizationError("NMSE undefined for an all-zero ground truth")
    err = ag.tsum(ag.square(ag.add(out, -target)), axis=1)
    return ag.mean(ag.mul(err, 1.0 / den))


def batch_loss_and_grads(params: ModelParams, cfg: ModelConfig, histories, futures):
    tensors = params.as_tensors()
    out = forward_realified(histories, tensors, cfg)
    loss = nmse_tensor(out, realify(futures).reshape(len(futures), -1))
    return loss.item(), ag.backward(loss, tensors)


# -- optimiser ---------------------------------------------------------------


class Adam:
    def __init__(self, params: ModelParams, beta1=0.9, beta2=0.999, eps=1e-8, state=None):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        if state:
            self.load_state(state)

    def step(self, params: ModelParams, grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"opt.t": np.array([float(self.t)])}
        out.update({f"opt.m.{k}": v for k, v in self.m.items()})
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        self.t = int(state["opt.t"][0])
        for k in self.m:
            self.m[k] = state[f"opt.m.{k}"].copy()
            self.v[k] = state[f"opt.v.{k}"].copy()


# -- prediction --------------------------------------------------------------


def predict_batch(params: ModelParams, cfg: ModelConfig, histories: np.ndarray, chunk: int = 256) -> np.ndarray:
    histories = np.asarray(histories, dtype=np.complex128)
    if histories.ndim != 4:
        raise DimensionError(f"histories must be (B, T, K, pairs), got {histories.shape}")
    outs = []
    for s in range(0, len(histories), chunk):
        out = forward_realified(histories[s:s + chunk], params, cfg).data
        outs.append(unrealify(out.reshape(-1, cfg.P, cfg.C), cfg.K, cfg.n_pairs))
    if not outs:
        return np.zeros((0, cfg.P, cfg.K, cfg.n_pairs), dtype=np.complex128)
    return np.concatenate(outs)


def dataset_nmse(params: ModelParams, cfg: ModelConfig, data: WindowDataset) -> float:
    return nmse_loss(predict_batch(params, cfg, data.history), data.future)


# -- training loop -----------------------------------------------------------


def train(
    cfg: ModelConfig,
    params: ModelParams,
    train_set: WindowDataset,
    val_set: WindowDataset | None,
    tcfg: TrainConfig,
    checkpoint_path=None,
    start_epoch: int = 0,
    optimizer_state: dict | None = None,
    best_score: float = math.inf,
):
    """Run Adam over shuffled minibatches.

    Returns ``(best_params, report, optimiser, last_params)``; the last two
    are what a resumed run needs.

    Learning rate at global epoch e is ``lr0 * decay**e``. The best
    validation NMSE snapshot is kept (train loss when there is no
    validation split) and training stops after ``patience`` epochs
    without improvement.
    """
    if len(train_set) == 0:
        raise EmptyDatasetError("training set is empty")
    if train_set.T != cfg.T or train_set.L != cfg.P:
        raise DimensionError(f"dataset windows (T={train_set.T}, L={train_set.L}) != model (T={cfg.T}, P={cfg.P})")
    params = params.copy()
    opt = Adam(params, tcfg.beta1, tcfg.beta2, tcfg.eps, optimizer_state)
    report = TrainReport(first_epoch=start_epoch)
    best = params.copy()
    stale = 0
    n = len(train_set)
    targets = realify(train_set.future).reshape(n, -1)
    for e in range(start_epoch, start_epoch + tcfg.epochs):
        t0 = time.perf_counter()
        lr = tcfg.lr0 * tcfg.decay ** e
        order = np.random.default_rng([tcfg.seed, e]).permutation(n)
        losses = []
        for b, s in enumerate(range(0, n, tcfg.batch_size)):
            idx = order[s:s + tcfg.batch_size]
            tensors = params.as_tensors()
            out = forward_realified(train_set.history[idx], tensors, cfg)
            loss = nmse_tensor(out, targets[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(e, b, value)
            grads = ag.backward(loss, tensors)
            opt.step(params, grads, lr)
            losses.append(value)
        train_loss = float(np.mean(losses))
        val = dataset_nmse(params, cfg, val_set) if val_set is not None and len(val_set) else math.nan
        if not math.isfinite(train_loss):
            raise DivergenceError(e, len(losses) - 1, train_loss)
        report.train_loss.append(train_loss)
        report.val_nmse.append(val)
        report.lr.append(lr)
        report.seconds.append(time.perf_counter() - t0)
        score = val if math.isfinite(val) else train_loss
        log.info("epoch %d lr %.3g train %.5g val %.5g", e, lr, train_loss, val)
        if score < best_score:
            best_score = report.best_score = score
            best = params.copy()
            report.best_epoch = e
            stale = 0
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, best, cfg, meta={"epoch": e, "val_nmse": val})
        else:
            stale += 1
            if stale >= tcfg.patience:
                break
    if report.epochs_run == 0 and checkpoint_path is not None:
        save_checkpoint(checkpoint_path, best, cfg, meta={"epoch": start_epoch - 1})
    if checkpoint_path is not None:
        report.checkpoint_path = str(checkpoint_path)
    return best, report, opt, params
