"""Optimizer, learning-rate schedule and the single-pass / WIN-WIN trainers."""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Literal, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from src.core import tensor as T
from src.core.data_synth import Split, TrainData
from src.core.exceptions import ConfigError, NonFiniteError, NumericalAbortError, ShapeError
from src.core.losses_metrics import (
    MetricReport,
    accuracy,
    auc,
    cross_entropy,
    jsd_consistency,
    loss_terms,
    softmax,
)
from src.core.model import ConvNet
from src.core.normalization import ForwardContext, RegionSource
from src.core.rng import Rng
from src.core.tensor import Tensor
from src.core.window_cache import cache_epoch
from src.core.window_sampling import OnlineRegionSource
from src.utils.logger import run_logger

PAD = 4


class TrainConfig(BaseModel):
    """Optimizer, schedule and trainer settings for one run."""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=64, ge=1)
    base_lr: float = Field(default=3e-3, ge=0.0)
    warmup_epochs: int = Field(default=5, ge=0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    nesterov: bool = True
    weight_decay: float = Field(default=1e-5, ge=0.0)
    delta: float = Field(default=0.3, ge=0.0)
    seed: int = Field(default=0, ge=0)
    trainer: Literal["single_pass", "win_win"] = "single_pass"
    stop_grad_second_pass: bool = False
    offline_windows: bool = False
    augment: bool = True
    consistency_target: Literal["logits", "features"] = "logits"
    eval_batch_size: int = Field(default=256, ge=1)


# Schedule and optimizer

class LrSchedule:
    """Linear warmup from 0, then cosine decay reaching 0 at the final step."""

    def __init__(self, base_lr: float, steps_per_epoch: int, epochs: int, warmup_epochs: int):
        if steps_per_epoch < 1:
            raise ConfigError("A schedule needs at least one step per epoch")
        self.base_lr = base_lr
        self.steps_per_epoch = steps_per_epoch
        self.total_steps = steps_per_epoch * epochs
        self.warmup_steps = min(steps_per_epoch * warmup_epochs, self.total_steps)

    def at(self, t: int) -> float:
        if t >= self.total_steps:
            return 0.0
        if t < self.warmup_steps:
            return self.base_lr * t / self.warmup_steps
        span = self.total_steps - self.warmup_steps
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * (t - self.warmup_steps) / span))

    def lr_at(self, epoch: int, step: int) -> float:
        return self.at(epoch * self.steps_per_epoch + step)


def sgd_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, Optional[np.ndarray]],
    lr: float,
    momentum: float,
    weight_decay: float,
    velocity: Optional[Dict[str, np.ndarray]] = None,
    nesterov: bool = True,
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """
    One SGD update with the L2 term folded into the gradient.

    g = grad + wd * p;  v = m * v + g;  p -= lr * (g + m * v) for Nesterov, lr * v otherwise.

    Args:
        params: Current parameter arrays
        grads: Gradients keyed like params (None counts as zero)
        lr: Learning rate for this step
        momentum: Momentum coefficient m
        weight_decay: L2 coefficient wd
        velocity: Momentum buffers from the previous step

    Returns:
        (new params, new velocity)
    """
    velocity = velocity or {}
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        grad = grads.get(name)
        grad = np.zeros_like(p) if grad is None else np.asarray(grad)
        if grad.shape != p.shape:
            raise ShapeError(f"Gradient for {name} has shape {grad.shape}, parameter {p.shape}")
        g = grad + weight_decay * p
        v = momentum * velocity.get(name, np.zeros_like(p)) + g
        update = g + momentum * v if nesterov else v
        new_params[name] = (p - lr * update).astype(p.dtype)
        new_velocity[name] = v
    return new_params, new_velocity


class SGD:
    """Holds momentum buffers and applies sgd_step to Tensor parameters in place."""

    def __init__(self, params: Dict[str, Tensor], momentum: float, weight_decay: float, nesterov: bool = True):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, lr: float):
        arrays = {name: p.data for name, p in self.params.items()}
        grads = {name: p.grad for name, p in self.params.items()}
        updated, self.velocity = sgd_step(
            arrays, grads, lr, self.momentum, self.weight_decay, self.velocity, self.nesterov
        )
        for name, p in self.params.items():
            p.data = updated[name]


# Data

def augment_batch(images: np.ndarray, rng: Rng) -> np.ndarray:
    """Horizontal flip with probability 0.5, then a random crop from a 4-pixel zero pad."""
    n, _, h, w = images.shape
    flips = rng.bernoulli(0.5, n)
    out = np.where(flips[:, None, None, None], images[..., ::-1], images)
    padded = np.pad(out, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    dy = rng.integers(0, 2 * PAD + 1, n)
    dx = rng.integers(0, 2 * PAD + 1, n)
    crops = np.empty_like(images)
    for i in range(n):
        crops[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return crops


class BatchIterator:
    """Deterministic shuffled batches; the next batch is prepared on a worker thread."""

    def __init__(self, split: Split, batch_size: int, rng: Rng, augment: bool = True):
        self.split = split
        self.batch_size = batch_size
        self.rng = rng
        self.augment = augment

    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.split) / self.batch_size)

    def _batch(self, epoch: int, order: np.ndarray, index: int) -> Tuple[np.ndarray, np.ndarray]:
        idx = order[index * self.batch_size:(index + 1) * self.batch_size]
        images = self.split.images[idx]
        if self.augment:
            images = augment_batch(images, self.rng.stream("augment", epoch).stream("batch", index))
        return images, self.split.labels[idx]

    def epoch(self, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        order = self.rng.stream("shuffle", epoch).permutation(len(self.split))
        steps = self.steps_per_epoch()
        with ThreadPoolExecutor(max_workers=1) as pool:
            pending = pool.submit(self._batch, epoch, order, 0)
            for index in range(steps):
                batch = pending.result()
                if index + 1 < steps:
                    pending = pool.submit(self._batch, epoch, order, index + 1)
                yield batch


# Evaluation

def evaluate(model: ConvNet, split: Split, batch_size: int = 256) -> Dict[str, float]:
    """Eval-mode accuracy on a split, plus AUC for two-class models."""
    logits = model.predict(split.images, batch_size)
    metrics = {"accuracy": accuracy(logits, split.labels)}
    if model.spec.num_classes == 2 and len(np.unique(split.labels)) == 2:
        metrics["auc"] = auc(softmax(logits)[:, 1], split.labels)
    return metrics


def evaluate_splits(model: ConvNet, splits: Dict[str, Split], batch_size: int = 256) -> Dict[str, Dict[str, float]]:
    return {name: evaluate(model, splits[name], batch_size) for name in splits}


@dataclass
class RunRecord:
    """Per-epoch history of one training run."""

    run_id: str
    seed: int
    rows: List[Dict] = field(default_factory=list)
    elapsed_seconds: float = field(default=0.0, compare=False)

    def add(self, epoch: int, metric: str, dataset: str, value: float):
        self.rows.append(
            {"run_id": self.run_id, "seed": self.seed, "epoch": epoch, "metric": metric,
             "dataset": dataset, "value": float(value)}
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["run_id", "seed", "epoch", "metric", "dataset", "value"])

    def final_reports(self) -> List[MetricReport]:
        """Last-epoch metrics as one report per metric, broken down by split."""
        frame = self.to_frame()
        if frame.empty:
            return []
        last = frame[frame["epoch"] == frame["epoch"].max()]
        reports = []
        for metric, group in last.groupby("metric", sort=True):
            breakdown = dict(zip(group["dataset"], group["value"]))
            reports.append(MetricReport(metric, float(np.mean(list(breakdown.values()))), breakdown, self.seed))
        return reports


# Trainer

class Trainer:
    """Runs the single-pass or WIN-WIN training loop for one model."""

    def __init__(self, model: ConvNet, config: TrainConfig, run_id: str = "run"):
        """
        Initialize the trainer and its seed streams.

        Args:
            model: Freshly built model (parameters are updated in place)
            config: Training configuration
            run_id: Identifier written into every RunRecord row

        Raises:
            ConfigError: For win_win on a model with any non-WIN norm layer
        """
        self.logger = run_logger(run_id)
        self.model = model
        self.config = config
        if config.trainer == "win_win" and any(layer.kind != "WIN" for layer in model.norm_layers):
            raise ConfigError("win_win training needs WIN in every norm layer; the two passes only differ through WIN statistics")

        rng = Rng(config.seed)
        self.window_rng = rng.stream("window")
        self.mix_rng = rng.stream("mix")
        self.noise_rng = rng.stream("speckle")
        self.data_rng = rng.stream("data")
        self.optimizer = SGD(model.params, config.momentum, config.weight_decay, config.nesterov)
        self.record = RunRecord(run_id, config.seed)
        self.global_step = 0

        region_config = model.region_config()
        self._online: Optional[OnlineRegionSource] = None
        if region_config is not None and region_config.strategy != "Speckle":
            self._online = OnlineRegionSource(
                self.window_rng,
                region_config.strategy,
                region_config.tau,
                region_config.share_window_across_layers,
            )

    def _regions(self, steps: int) -> Optional[RegionSource]:
        if self._online is None or not self.config.offline_windows:
            return self._online
        cfg = self.model.region_config()
        return cache_epoch(
            self.window_rng,
            steps,
            self.model.win_sites(),
            cfg.tau,
            cfg.strategy,
            cfg.share_window_across_layers,
            start_step=self.global_step,
        )

    def _diagnostics(self, epoch: int, step: int, lr: float, loss: Optional[float], reason: str) -> Dict:
        return {
            "reason": reason,
            "epoch": epoch,
            "step": step,
            "global_step": self.global_step,
            "lr": lr,
            "loss": loss,
            "layer_stats": self.model.layer_stats(),
        }

    def _loss(self, images: np.ndarray, labels: np.ndarray, ctx: ForwardContext) -> Tuple[Tensor, Tensor]:
        first = self.model.forward(images, ctx)
        if self.config.trainer == "single_pass":
            return cross_entropy(first.logits, labels), first.logits

        eval_ctx = ForwardContext(mode="eval", step=ctx.step)
        if self.config.stop_grad_second_pass:
            with T.no_grad():
                second = self.model.forward(images, eval_ctx)
        else:
            second = self.model.forward(images, eval_ctx)

        if self.config.consistency_target == "logits":
            loss, _, _ = loss_terms(first.logits, second.logits, labels, self.config.delta)
        else:
            loss, _, _ = loss_terms(first.logits, second.logits, labels, 0.0)
            if self.config.delta > 0:
                loss = T.add(loss, T.mul(jsd_consistency(first.features, second.features), self.config.delta))
        return loss, first.logits

    def train_step(self, images: np.ndarray, labels: np.ndarray, epoch: int, step: int,
                   lr: float, regions: Optional[RegionSource]) -> Tuple[float, float]:
        """
        Forward, loss, backward and one optimizer step.

        Returns:
            (loss value, training accuracy of the first pass)

        Raises:
            NumericalAbortError: On a non-finite loss, activation or gradient
        """
        ctx = ForwardContext(mode="train", step=self.global_step, regions=regions, mix_rng=self.mix_rng,
                               noise_rng=self.noise_rng)
        self.model.zero_grad()
        try:
            loss, logits = self._loss(images, labels, ctx)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"loss is {value}")
            T.backward(loss)
        except NonFiniteError as e:
            diagnostics = self._diagnostics(epoch, step, lr, None, str(e))
            self.logger.error(f"Numerical abort at epoch {epoch} step {step}: {e}")
            raise NumericalAbortError(f"Non-finite value during training: {e}", diagnostics)

        for name, p in self.model.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                diagnostics = self._diagnostics(epoch, step, lr, value, f"non-finite gradient in {name}")
                self.logger.error(f"Numerical abort at epoch {epoch} step {step}: gradient of {name}")
                raise NumericalAbortError(f"Non-finite gradient for {name}", diagnostics)

        self.optimizer.step(lr)
        self.global_step += 1
        return value, accuracy(logits.data, labels)

    def fit(self, data: TrainData) -> Tuple[ConvNet, RunRecord]:
        """Train for config.epochs, recording eval metrics after each epoch."""
        cfg = self.config
        started = time.perf_counter()
        batches = BatchIterator(data.train, cfg.batch_size, self.data_rng, cfg.augment)
        steps = batches.steps_per_epoch()
        schedule = LrSchedule(cfg.base_lr, steps, cfg.epochs, cfg.warmup_epochs)
        self.logger.info(
            f"Training {cfg.trainer} for {cfg.epochs} epochs x {steps} steps "
            f"(norms {self.model.spec.norm_kinds()}, seed {cfg.seed})"
        )

        for epoch in range(cfg.epochs):
            regions = self._regions(steps)
            losses, accs = [], []
            lr = 0.0
            for step, (images, labels) in enumerate(batches.epoch(epoch)):
                lr = schedule.lr_at(epoch, step)
                loss, acc = self.train_step(images, labels, epoch, step, lr, regions)
                losses.append(loss)
                accs.append(acc)

            self.record.add(epoch, "loss", "train", float(np.mean(losses)))
            self.record.add(epoch, "accuracy", "train", float(np.mean(accs)))
            self.record.add(epoch, "lr", "train", lr)
            results = evaluate_splits(self.model, data.eval_splits(), cfg.eval_batch_size)
            for split_name, metrics in results.items():
                for metric, value in metrics.items():
                    self.record.add(epoch, metric, split_name, value)
            summary = ", ".join(f"{k}={v['accuracy']:.3f}" for k, v in results.items())
            self.logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: loss={np.mean(losses):.4f} lr={lr:.2e} {summary}")

        self.record.elapsed_seconds = time.perf_counter() - started
        return self.model, self.record


def train_single_pass(model: ConvNet, data: TrainData, config: TrainConfig,
                      run_id: str = "run") -> Tuple[ConvNet, RunRecord]:
    if config.trainer != "single_pass":
        raise ConfigError(f"train_single_pass called with trainer={config.trainer}")
    return Trainer(model, config, run_id).fit(data)


def train_win_win(model: ConvNet, data: TrainData, config: TrainConfig,
                  run_id: str = "run") -> Tuple[ConvNet, RunRecord]:
    if config.trainer != "win_win":
        raise ConfigError(f"train_win_win called with trainer={config.trainer}")
    return Trainer(model, config, run_id).fit(data)


def train(model: ConvNet, data: TrainData, config: TrainConfig, run_id: str = "run") -> Tuple[ConvNet, RunRecord]:
    if config.trainer == "win_win":
        return train_win_win(model, data, config, run_id)
    return train_single_pass(model, data, config, run_id)
