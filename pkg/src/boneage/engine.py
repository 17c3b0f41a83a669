"""Loss and metric, early stopping, the training loop and test evaluation."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .errors import EmptyBatch, LengthMismatch, NonFiniteLoss
from .models import RegressionModel, to_tensor
from .transforms import TransformConfig, make_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 15
    patience: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    seed: int = 0
    min_delta: float = 0.0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, patience and batch_size must all be >= 1")
        if self.learning_rate < 0 or self.min_delta < 0:
            raise ValueError("learning_rate and min_delta must be non-negative")
        if self.optimizer != "adam":
            raise ValueError(f"only the adam optimizer is supported, got {self.optimizer!r}")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_mae: float
    val_mae: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def val_mae(self) -> list[float]:
        return [r.val_mae for r in self.records]

    @property
    def train_mae(self) -> list[float]:
        return [r.train_mae for r in self.records]

    def to_json(self, config: dict | None = None) -> dict:
        out = {
            "records": [asdict(r) for r in self.records],
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
        }
        if config is not None:
            out["config"] = config
        return out

    @classmethod
    def from_json(cls, payload: dict) -> "TrainHistory":
        return cls(
            records=[EpochRecord(**r) for r in payload["records"]],
            best_epoch=int(payload["best_epoch"]),
            stopped_early=bool(payload["stopped_early"]),
        )


@dataclass
class EvalResult:
    mae: float
    predictions: list[tuple[str, float, float]]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["id", "true_months", "pred_months"])
            for sample_id, true, pred in self.predictions:
                writer.writerow([sample_id, f"{true:g}", repr(float(pred))])
        return path

    @classmethod
    def read_csv(cls, path) -> "EvalResult":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = [(r["id"], float(r["true_months"]), float(r["pred_months"])) for r in csv.DictReader(fh)]
        truth = [t for _, t, _ in rows]
        pred = [p for _, _, p in rows]
        return cls(mae=mae_metric(pred, truth) if rows else 0.0, predictions=rows)


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise LengthMismatch(f"predictions have {p.size} entries, targets {t.size}")
    if p.size == 0:
        raise EmptyBatch("cannot score an empty batch")
    return p, t


def mse_loss(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean((p - t) ** 2))


def mse_gradient(pred, truth) -> np.ndarray:
    """d(mse_loss)/d(pred)."""
    p, t = _pair(pred, truth)
    return 2.0 * (p - t) / p.size


def mae_metric(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


class EarlyStopDecision(NamedTuple):
    stop: bool
    best_index: int


def early_stop_check(val_mae_history: Sequence[float], patience: int, min_delta: float = 0.0) -> EarlyStopDecision:
    """Stop once ``patience`` epochs have passed since the last improvement.

    An epoch improves when its value beats the best so far by more than
    ``min_delta``; the earliest such epoch wins ties.
    """
    if len(val_mae_history) == 0:
        raise ValueError("history must be non-empty")
    best_index, best = 0, val_mae_history[0]
    for i, value in enumerate(val_mae_history[1:], start=1):
        if value < best - min_delta:
            best_index, best = i, value
    current = len(val_mae_history) - 1
    return EarlyStopDecision(current - best_index >= patience, best_index)


def _batches(n: int, batch_size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start : start + batch_size]


def predict(model: RegressionModel, records: Sequence, transforms: TransformConfig, batch_size: int = 32) -> np.ndarray:
    """Eval-mode predictions in months, one per record."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for idx in _batches(len(records), batch_size):
                images, _ = make_batch([records[i] for i in idx], transforms.preprocess, transforms.augment, "eval")
                out.append(model(to_tensor(model, images)).reshape(-1).double().cpu().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out)


def evaluate(model: RegressionModel, test_set: Sequence, transforms: TransformConfig, batch_size: int = 32) -> EvalResult:
    if len(test_set) == 0:
        raise EmptyBatch("test set is empty")
    pred = predict(model, test_set, transforms, batch_size)
    truth = [float(r.bone_age) for r in test_set]
    rows = [(r.id, t, float(p)) for r, t, p in zip(test_set, truth, pred)]
    return EvalResult(mae=mae_metric(pred, truth), predictions=rows)


def loss_and_head_gradients(model: RegressionModel, images, targets) -> tuple[float, list[np.ndarray]]:
    """MSE of one batch and its autograd gradient for every head parameter."""
    x = to_tensor(model, images)
    t = torch.as_tensor(np.asarray(targets), dtype=x.dtype)
    model.zero_grad(set_to_none=True)
    loss = torch.mean((model(x).reshape(-1) - t) ** 2)
    grads = torch.autograd.grad(loss, model.head_parameters())
    return float(loss.detach()), [g.detach().cpu().numpy().copy() for g in grads]


def _calibrate_targets(model: RegressionModel, records: Sequence) -> None:
    if float(model.target_offset) != 0.0 or float(model.target_scale) != 1.0:
        return
    ages = np.array([r.bone_age for r in records], dtype=np.float64)
    model.set_target_scaling(ages.mean(), max(ages.std(), 1.0))


def train(model: RegressionModel, train_set: Sequence, val_set: Sequence, transforms: TransformConfig,
          cfg: TrainConfig) -> tuple[RegressionModel, TrainHistory]:
    """Fit with Adam on MSE, early-stopping on validation MAE.

    ``cfg.seed`` fixes shuffling, augmentation and dropout. On return the
    model holds the weights of the best validation epoch and is in eval mode.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyBatch("train and validation sets must be non-empty")
    spec = model.spec.input_spec
    pre = transforms.preprocess
    if (pre.target_height, pre.target_width) != (spec.target_height, spec.target_width):
        raise ValueError(f"transforms produce {pre.target_height}x{pre.target_width} images but "
                         f"{model.spec.id} expects {spec.target_height}x{spec.target_width}")

    _calibrate_targets(model, train_set)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.epsilon)
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    best_state, best_val = None, np.inf

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(cfg.max_epochs):
            model.train()
            order = rng.permutation(len(train_set))
            sq_sum = abs_sum = 0.0
            for idx in _batches(len(train_set), cfg.batch_size, order):
                batch = [train_set[i] for i in idx]
                images, targets = make_batch(batch, pre, transforms.augment, "train", int(rng.integers(2**63 - 1)))
                x = to_tensor(model, images)
                t = torch.as_tensor(targets, dtype=x.dtype)
                pred = model(x).reshape(-1)
                err = pred - t
                loss = torch.mean(err**2)
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(f"non-finite loss at epoch {epoch}", history)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                e = err.detach().double()
                sq_sum += float(torch.sum(e**2))
                abs_sum += float(torch.sum(e.abs()))

            n = len(train_set)
            val_mae = evaluate(model, val_set, transforms, cfg.batch_size).mae
            if not np.isfinite(val_mae):
                raise NonFiniteLoss(f"non-finite validation MAE at epoch {epoch}", history)
            history.records.append(EpochRecord(epoch, sq_sum / n, abs_sum / n, val_mae))
            log.info("epoch %d: loss %.3f train_mae %.3f val_mae %.3f", epoch, sq_sum / n, abs_sum / n, val_mae)

            if val_mae < best_val:
                best_val = val_mae
                history.best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())

            decision = early_stop_check(history.val_mae, cfg.patience, cfg.min_delta)
            if decision.stop:
                history.stopped_early = True
                log.info("no validation improvement for %d epochs; stopping", cfg.patience)
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def write_history(history: TrainHistory, path, config: dict | None = None) -> Path:
    path = Path(path)
    path.write_text(json.dumps(history.to_json(config), indent=2))
    return path
