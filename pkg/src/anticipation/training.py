"""Optimizer, label-smoothed loss, cyclic cosine schedule, and the train loop.

The fidelity profile follows the published recipe: AdamW at batch size 128
with label smoothing 0.4, weight decay 5e-4, peak learning rate 1e-4, and 300
epochs of cosine annealing with warm restarts (20 cycles of 15 epochs, one
linear warmup epoch per cycle). The desk profile shrinks batch size and cycle
count for CPU-scale experiments without touching the schedule shape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
from torch import nn


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters and schedule geometry."""

    batch_size: int = 128
    label_smoothing: float = 0.4
    weight_decay: float = 5e-4
    base_lr: float = 1e-4
    max_epochs: int = 300
    cycle_epochs: int = 15
    warmup_epochs: int = 1
    n_cycles: int = 20
    min_lr: float = 0.0
    seed: int = 0
    grad_clip: float | None = None
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.n_cycles * self.cycle_epochs != self.max_epochs:
            raise ValueError(
                f"n_cycles * cycle_epochs must equal max_epochs "
                f"({self.n_cycles} * {self.cycle_epochs} != {self.max_epochs})"
            )
        if not 0 <= self.warmup_epochs < self.cycle_epochs:
            raise ValueError("warmup_epochs must be < cycle_epochs")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")


def desk_profile(seed: int = 0, **overrides) -> TrainConfig:
    """CPU-scale test profile: batch 32, two schedule cycles (30 epochs)."""
    params = dict(batch_size=32, n_cycles=2, max_epochs=30, seed=seed)
    params.update(overrides)
    return TrainConfig(**params)


def lr_at(epoch_fraction: float, config: TrainConfig) -> float:
    """Learning rate at a (possibly fractional) epoch position.

    Within each cycle of `cycle_epochs`: linear warmup from 0 to base_lr over
    `warmup_epochs`, then cosine annealing down to min_lr over the remainder.
    The schedule restarts (including warmup) every cycle.
    """
    if epoch_fraction < 0:
        raise ValueError("epoch position must be nonnegative")
    if epoch_fraction > config.max_epochs:
        raise ValueError(
            f"epoch position {epoch_fraction} beyond max_epochs {config.max_epochs}"
        )
    u = math.fmod(epoch_fraction, config.cycle_epochs)
    if u < config.warmup_epochs:
        return config.base_lr * u / config.warmup_epochs
    t = (u - config.warmup_epochs) / (config.cycle_epochs - config.warmup_epochs)
    return config.min_lr + (config.base_lr - config.min_lr) * (1 + math.cos(math.pi * t)) / 2


def smoothed_cross_entropy(
    logits: torch.Tensor, targets: torch.Tensor, smoothing: float
) -> torch.Tensor:
    """Cross-entropy against a smoothed target distribution.

    The target distribution puts 1 - eps + eps/K on the true class and eps/K
    elsewhere. Accepts (..., K) logits with (...) integer targets and returns
    the mean over all leading dimensions.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    k = logits.shape[-1]
    targets = torch.as_tensor(targets, device=logits.device)
    if targets.numel() and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"target id outside [0, {k})")
    log_probs = torch.log_softmax(logits, dim=-1)
    true_logp = torch.gather(log_probs, -1, targets.unsqueeze(-1)).squeeze(-1)
    loss = -(1.0 - smoothing) * true_logp - (smoothing / k) * log_probs.sum(dim=-1)
    return loss.mean()


NO_DECAY_NAME_PARTS = ("pos_embed", "future_tokens", "verb_class_embed")


def split_decay_parameters(
    model: nn.Module,
) -> tuple[list[tuple[str, nn.Parameter]], list[tuple[str, nn.Parameter]]]:
    """Partition parameters into (decayed, undecayed) groups.

    Excluded from weight decay: every 1-D parameter (biases and normalization
    gains) plus the positional table, future-embedding tokens, and the verb
    class embedding table.
    """
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        if param.ndim <= 1 or any(part in name for part in NO_DECAY_NAME_PARTS):
            no_decay.append((name, param))
        else:
            decay.append((name, param))
    return decay, no_decay


def build_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.AdamW:
    """AdamW with decoupled weight decay applied only to weight matrices."""
    decay, no_decay = split_decay_parameters(model)
    groups = [
        {"params": [p for _, p in decay], "weight_decay": config.weight_decay},
        {"params": [p for _, p in no_decay], "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(
        groups, lr=config.base_lr, betas=config.adam_betas, eps=config.adam_eps
    )


class MetricLog:
    """Append-only delimited metric log: epoch,split,head,recall,loss,lr."""

    COLUMNS = ("epoch", "split", "head", "recall", "loss", "lr")

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.lines: list[str] = [",".join(self.COLUMNS)]
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(self.lines[0] + "\n")

    def append(
        self,
        epoch: int,
        split: str,
        head: str,
        recall: float | None,
        loss: float | None,
        lr: float,
    ) -> None:
        line = ",".join(
            [
                str(epoch),
                split,
                head,
                "" if recall is None else f"{recall:.6f}",
                "" if loss is None else f"{loss:.6f}",
                f"{lr:.10g}",
            ]
        )
        self.lines.append(line)
        if self.path is not None:
            with self.path.open("a") as handle:
                handle.write(line + "\n")

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"


@dataclass
class TrainResult:
    """Final and best-validation model states plus the metric log."""

    final_state: dict[str, torch.Tensor]
    best_state: dict[str, torch.Tensor]
    best_epoch: int
    best_recall: float
    steps: int
    log: MetricLog


def train(
    model: nn.Module,
    n_train: int,
    batch_fn: Callable[[np.ndarray], object],
    loss_fn: Callable[[nn.Module, object], torch.Tensor],
    validate_fn: Callable[[nn.Module], dict[str, float]] | None,
    config: TrainConfig,
    log_path: str | Path | None = None,
    select_head: str = "action",
) -> TrainResult:
    """Deterministic epoch loop over index batches.

    `batch_fn` turns an index array into a batch object; `loss_fn` maps
    (model, batch) to a scalar loss; `validate_fn` returns per-head recall
    percentages used for best-checkpoint selection (by `select_head`, falling
    back to noun when absent). Batch order is a pure function of the seed.
    """
    if n_train < 1:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(config.seed)
    optimizer = build_optimizer(model, config)
    log = MetricLog(log_path)
    steps_per_epoch = max(1, math.ceil(n_train / config.batch_size))
    best_recall = -math.inf
    best_epoch = -1
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    step = 0

    for epoch in range(config.max_epochs):
        model.train()
        order = rng.permutation(n_train)
        epoch_losses = []
        lr = lr_at(float(epoch), config)
        for b in range(steps_per_epoch):
            indices = order[b * config.batch_size : (b + 1) * config.batch_size]
            if indices.size == 0:
                continue
            lr = lr_at(epoch + b / steps_per_epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad()
            loss = loss_fn(model, batch_fn(indices))
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss.item()} at epoch {epoch} step {step}"
                )
            loss.backward()
            if config.grad_clip is not None:
                nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
            step += 1

        mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
        log.append(epoch, "train", "all", None, mean_loss, lr)

        if validate_fn is not None:
            model.eval()
            with torch.no_grad():
                recalls = validate_fn(model)
            for head, recall in recalls.items():
                log.append(epoch, "val", head, recall, None, lr)
            criterion = recalls.get(select_head, recalls.get("noun"))
            if criterion is not None and criterion > best_recall:
                best_recall = criterion
                best_epoch = epoch
                best_state = {
                    k: v.detach().clone() for k, v in model.state_dict().items()
                }

    final_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if best_epoch < 0:
        best_state = final_state
    return TrainResult(
        final_state=final_state,
        best_state=best_state,
        best_epoch=best_epoch,
        best_recall=best_recall,
        steps=step,
        log=log,
    )
