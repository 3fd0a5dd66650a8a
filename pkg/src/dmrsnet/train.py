"""Norm-aware oversampling, Adam + L1 training loop and dataset splitting."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .grid import nmse_array, to_db
from .pipeline import DlrModel
from .synth import Dataset

log = logging.getLogger(__name__)

NAOS_EPS = 1e-6
METRICS_HEADER = ("epoch", "train_l1", "val_nmse_db", "wall_seconds")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 400
    epochs: int = 2400
    naos_bias: float = 5.0
    split_ratio: float = 0.9
    seed: int = 0
    naos_enabled: bool = True
    csif_enabled: bool = True
    order: str = "dlr"
    grad_clip: float = 1.0
    steps_per_epoch: int | None = None
    eval_batch: int = 256

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must lie strictly between 0 and 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


# --- NAOS -----------------------------------------------------------------


def naos_weights(norms, bias: float) -> np.ndarray:
    norms = np.asarray(norms, dtype=np.float64)
    if norms.size == 0:
        raise ValueError("naos needs at least one norm")
    if np.any(~(norms > 0)):
        raise ValueError("naos norms must be positive")
    return np.maximum(bias - np.log10(norms), NAOS_EPS)


def naos_probabilities(norms, bias: float) -> np.ndarray:
    """Sampling probabilities ``(bias - log10 n_i) / sum_j (bias - log10 n_j)``.

    Weights below ``1e-6`` (norms with ``log10 >= bias``) are clamped to ``1e-6``.
    """
    w = naos_weights(norms, bias)
    return w / w.sum()


def naos_sample(probabilities, count: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. record indices drawn with replacement."""
    p = np.asarray(probabilities, dtype=np.float64)
    if count == 0:
        return np.empty(0, dtype=np.int64)
    return rng.choice(len(p), size=count, replace=True, p=p)


# --- loss and optimizer ---------------------------------------------------


def l1_loss(pred, truth):
    if tuple(pred.shape) != tuple(truth.shape):
        raise ValueError(f"l1_loss shape mismatch: {tuple(pred.shape)} vs {tuple(truth.shape)}")
    if torch.is_tensor(pred):
        return (pred - truth).abs().mean()
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64))))


@dataclass
class OptimizerState:
    m: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    step: int = 0


def adam_state(params) -> OptimizerState:
    return OptimizerState(
        OrderedDict((k, torch.zeros_like(p)) for k, p in params.items()),
        OrderedDict((k, torch.zeros_like(p)) for k, p in params.items()),
        0,
    )


def adam_step(params, grads, state: OptimizerState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> OptimizerState:
    """Bias-corrected Adam update applied in place to ``params``."""
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"adam_step: gradient for {name!r} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            m, v = state.m[name], state.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return state


def clip_grad_norm(grads, max_norm: float) -> float:
    total = math.sqrt(sum(float(g.pow(2).sum()) for g in grads.values() if g is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g.mul_(scale)
    return total


# --- data -----------------------------------------------------------------


def split_indices(n: int, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(n * ratio))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def split_dataset(dataset: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    tr, va = split_indices(len(dataset), ratio, seed)
    return dataset.subset(tr), dataset.subset(va)


def batch_tensors(ds: Dataset, idx):
    return (
        torch.from_numpy(ds.dmrs[idx]),
        torch.from_numpy(ds.snr_db[idx]),
        torch.from_numpy(ds.truth[idx]),
    )


def predict(model: DlrModel, ds: Dataset, order="dlr", csif_enabled=True, batch=256) -> np.ndarray:
    outs = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(ds), batch):
            idx = np.arange(start, min(start + batch, len(ds)))
            x, snr, _ = batch_tensors(ds, idx)
            outs.append(model(x, snr, order=order, csif_enabled=csif_enabled).numpy())
    return np.concatenate(outs)


def validation_nmse_db(model, ds, config: TrainConfig) -> float:
    pred = predict(model, ds, config.order, config.csif_enabled, config.eval_batch)
    return float(to_db(nmse_array(ds.truth, pred).mean()))


# --- training -------------------------------------------------------------


@dataclass
class FitResult:
    model: DlrModel
    metrics: list[dict]
    best_epoch: int
    best_val_nmse_db: float
    train_indices: np.ndarray
    val_indices: np.ndarray


def fit(model: DlrModel, dataset: Dataset, config: TrainConfig, metrics_path=None, checkpoint_path=None) -> FitResult:
    """Train ``model`` in place and return it with best-validation weights restored."""
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    tr_idx, va_idx = split_indices(len(dataset), config.split_ratio, config.seed)
    train, val = dataset.subset(tr_idx), dataset.subset(va_idx)
    if config.naos_enabled:
        probs = naos_probabilities(train.norms(), config.naos_bias)
    else:
        probs = np.full(len(train), 1.0 / len(train))
    steps = config.steps_per_epoch or max(1, math.ceil(len(train) / config.batch_size))

    params = OrderedDict((k, p) for k, p in model.named_parameters())
    state = adam_state(params)
    metrics = []
    writer = _MetricsWriter(metrics_path)
    t0 = time.perf_counter()
    best = (-1, math.inf, copy.deepcopy(model.state_dict()))

    for epoch in range(1, config.epochs + 1):
        model.train()
        losses = []
        for _ in range(steps):
            idx = naos_sample(probs, config.batch_size, rng)
            x, snr, truth = batch_tensors(train, idx)
            pred = model(x, snr, order=config.order, csif_enabled=config.csif_enabled)
            loss = l1_loss(pred, truth)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}")
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = OrderedDict((k, p.grad) for k, p in params.items())
            clip_grad_norm(grads, config.grad_clip)
            adam_step(params, grads, state, config.learning_rate)
            losses.append(loss.item())
        val_db = validation_nmse_db(model, val, config)
        row = {
            "epoch": epoch,
            "train_l1": float(np.mean(losses)),
            "val_nmse_db": val_db,
            "wall_seconds": time.perf_counter() - t0,
        }
        metrics.append(row)
        writer.write(row)
        log.info("epoch %d train_l1 %.5f val_nmse %.2f dB", epoch, row["train_l1"], val_db)
        if val_db < best[1]:
            best = (epoch, val_db, copy.deepcopy(model.state_dict()))
            if checkpoint_path is not None:
                from .pipeline import save_model

                save_model(model, checkpoint_path)

    if best[0] > 0:
        model.load_state_dict(best[2])
    return FitResult(model, metrics, best[0], best[1], tr_idx, va_idx)


class _MetricsWriter:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_HEADER)

    def write(self, row):
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[k] for k in METRICS_HEADER])
