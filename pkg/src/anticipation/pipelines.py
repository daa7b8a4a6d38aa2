"""End-to-end training recipes for teachers, gap-blind students, and the
verb-noun relation model.

Every recipe seeds torch before constructing its model, draws batch order
from the train config seed, validates per epoch with class-mean top-5 recall,
and keeps the checkpoint with the best validation action recall.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .datasets import InstanceTensors
from .distill import (
    DistillConfig,
    SoftLabelSet,
    average_soft_labels,
    extract_soft_labels,
    tempered_kl,
)
from .evaluation import ActionMapping
from .model import AnticipationModel, LogitBundle, ModelConfig
from .scoring import make_validate_fn
from .training import TrainConfig, TrainResult, smoothed_cross_entropy, train
from .vnrm import VerbNounRelationModel, VnrmConfig


@dataclass
class TrainedModel:
    """A trained model plus the loop's bookkeeping."""

    model: nn.Module
    result: TrainResult
    input_mode: str
    model_kind: str

    def load_best(self) -> nn.Module:
        self.model.load_state_dict(self.result.best_state)
        return self.model


def _head_names(model: AnticipationModel) -> tuple[str, ...]:
    names = ["verb", "noun"]
    if model.head_action is not None:
        names.append("action")
    return tuple(names)


def _bundle_ce(
    bundle: LogitBundle,
    labels: dict[str, torch.Tensor],
    heads: tuple[str, ...],
    smoothing: float,
) -> torch.Tensor:
    terms = [
        smoothed_cross_entropy(bundle.head(h), labels[h], smoothing) for h in heads
    ]
    return torch.stack(terms).sum()


def extract_stacked_soft_labels(
    teachers: list[AnticipationModel],
    tensors: InstanceTensors,
    temperature: float,
    chunk_size: int = 512,
) -> dict[str, torch.Tensor]:
    """Averaged teacher gap distributions as head -> (n, gap, classes).

    With several teachers the per-instance sets are combined exactly as
    average_soft_labels does: an entrywise arithmetic mean of distributions.
    """
    per_teacher: list[dict[str, list[torch.Tensor]]] = []
    for teacher in teachers:
        teacher.eval()
        parts: dict[str, list[torch.Tensor]] = {}
        with torch.no_grad():
            for start in range(0, len(tensors), chunk_size):
                idx = range(start, min(start + chunk_size, len(tensors)))
                batch = tensors.select(list(idx))
                bundle = teacher.forward_features(batch.full)
                t = batch.full.shape[1]
                for head in _head_names(teacher):
                    logits = bundle.head(head)[:, t - batch.gap :, :]
                    probs = torch.softmax(logits / temperature, dim=-1)
                    parts.setdefault(head, []).append(probs)
        per_teacher.append({h: torch.cat(v) for h, v in parts.items()})
    common = set.intersection(*(set(p.keys()) for p in per_teacher))
    return {
        head: torch.stack([p[head] for p in per_teacher]).mean(dim=0)
        for head in sorted(common)
    }


def soft_label_sets(
    teachers: list[AnticipationModel], tensors: InstanceTensors, temperature: float
) -> list[SoftLabelSet]:
    """Per-instance soft-label sets, averaged across teachers."""
    per_teacher = [
        extract_soft_labels(t, tensors.full, tensors.gap, temperature)
        for t in teachers
    ]
    return [
        average_soft_labels([per_teacher[k][i] for k in range(len(teachers))])
        for i in range(len(tensors))
    ]


def train_teacher(
    train_tensors: InstanceTensors,
    val_tensors: InstanceTensors,
    model_config: ModelConfig,
    train_config: TrainConfig,
    actions: ActionMapping | None = None,
    log_path: str | Path | None = None,
) -> TrainedModel:
    """Full-video teacher: label-smoothed CE at every position of the
    observed + gap sequence against propagated labels."""
    torch.manual_seed(train_config.seed)
    model = AnticipationModel(model_config)
    heads = _head_names(model)
    smoothing = train_config.label_smoothing

    def loss_fn(m: AnticipationModel, batch: InstanceTensors) -> torch.Tensor:
        bundle = m.forward_features(batch.full)
        return _bundle_ce(bundle, batch.position_labels, heads, smoothing)

    result = train(
        model,
        n_train=len(train_tensors),
        batch_fn=train_tensors.select,
        loss_fn=loss_fn,
        validate_fn=make_validate_fn("full", val_tensors, actions),
        config=train_config,
        log_path=log_path,
    )
    return TrainedModel(model, result, input_mode="full", model_kind="anticipation")


def train_student(
    train_tensors: InstanceTensors,
    val_tensors: InstanceTensors,
    teachers: list[AnticipationModel],
    model_config: ModelConfig,
    distill_config: DistillConfig,
    train_config: TrainConfig,
    actions: ActionMapping | None = None,
    log_path: str | Path | None = None,
) -> TrainedModel:
    """Gap-blind student: hard CE at the final gap slot, positionwise CE on
    observed clips, and tempered KL against teacher gap distributions.

    With kd_weight zero (or no teachers) this is the plain future-embedding
    student; gap-clip features are never part of the graph either way.
    """
    torch.manual_seed(train_config.seed)
    model = AnticipationModel(model_config)
    heads = _head_names(model)
    smoothing = train_config.label_smoothing
    cfg = distill_config

    soft: dict[str, torch.Tensor] | None = None
    if teachers and cfg.kd_weight > 0:
        soft = extract_stacked_soft_labels(teachers, train_tensors, cfg.temperature)
        for teacher in teachers:
            if teacher.config.k_verb != model_config.k_verb or (
                teacher.config.k_noun != model_config.k_noun
            ):
                raise ValueError("teacher and student class vocabularies differ")
        if next(iter(soft.values())).shape[1] != train_tensors.gap:
            raise ValueError("teacher gap count does not match the dataset")
        indexed = soft

        def batch_fn(indices):
            batch = train_tensors.select(indices)
            targets = {h: indexed[h][torch.as_tensor(indices)] for h in indexed}
            return batch, targets

    else:

        def batch_fn(indices):
            return train_tensors.select(indices), None

    n_obs = train_tensors.observed_len

    def loss_fn(m: AnticipationModel, packed) -> torch.Tensor:
        batch, soft_targets = packed
        bundle = m.forward_student(batch.observed, batch.gap)
        final_targets = {h: batch.targets[h] for h in heads}
        loss = cfg.ce_weight * _bundle_ce(bundle.final(), final_targets, heads, smoothing)
        if cfg.positionwise_ce_weight > 0:
            observed_bundle = bundle.slice_positions(0, n_obs)
            observed_labels = {
                h: batch.position_labels[h][:, :n_obs] for h in heads
            }
            loss = loss + cfg.positionwise_ce_weight * _bundle_ce(
                observed_bundle, observed_labels, heads, smoothing
            )
        if soft_targets is not None:
            kd_heads = [h for h in heads if h in soft_targets]
            terms = [
                tempered_kl(
                    bundle.head(h)[:, n_obs:, :], soft_targets[h], cfg.temperature
                )
                for h in kd_heads
            ]
            loss = loss + cfg.kd_weight * torch.stack(terms).mean()
        return loss

    result = train(
        model,
        n_train=len(train_tensors),
        batch_fn=batch_fn,
        loss_fn=loss_fn,
        validate_fn=make_validate_fn("student", val_tensors, actions),
        config=train_config,
        log_path=log_path,
    )
    return TrainedModel(model, result, input_mode="student", model_kind="anticipation")


def train_base(
    train_tensors: InstanceTensors,
    val_tensors: InstanceTensors,
    model_config: ModelConfig,
    train_config: TrainConfig,
    positionwise_ce_weight: float = 0.0,
    actions: ActionMapping | None = None,
    log_path: str | Path | None = None,
) -> TrainedModel:
    """Observed-only baseline: target CE read at the last observed position.

    Per-position supervision with propagated labels belongs to the
    distillation and relation recipes, so it is off here by default; a
    positive weight adds it over the non-final observed positions.
    """
    torch.manual_seed(train_config.seed)
    model = AnticipationModel(model_config)
    heads = _head_names(model)
    smoothing = train_config.label_smoothing
    n_obs = train_tensors.observed_len

    def loss_fn(m: AnticipationModel, batch: InstanceTensors) -> torch.Tensor:
        bundle = m.forward_features(batch.observed)
        final_targets = {h: batch.targets[h] for h in heads}
        loss = _bundle_ce(bundle.final(), final_targets, heads, smoothing)
        if positionwise_ce_weight > 0 and n_obs > 1:
            earlier = bundle.slice_positions(0, n_obs - 1)
            labels = {h: batch.position_labels[h][:, : n_obs - 1] for h in heads}
            loss = loss + positionwise_ce_weight * _bundle_ce(
                earlier, labels, heads, smoothing
            )
        return loss

    result = train(
        model,
        n_train=len(train_tensors),
        batch_fn=train_tensors.select,
        loss_fn=loss_fn,
        validate_fn=make_validate_fn("observed", val_tensors, actions),
        config=train_config,
        log_path=log_path,
    )
    return TrainedModel(model, result, input_mode="observed", model_kind="anticipation")


def _vnrm_supervised(
    out, batch: InstanceTensors, smoothing: float, ce_weight: float,
    positionwise_weight: float, n_positions: int,
) -> torch.Tensor:
    """Shared CE structure for relation-model training."""
    loss = ce_weight * torch.stack(
        [
            smoothed_cross_entropy(out.final_verb, batch.targets["verb"], smoothing),
            smoothed_cross_entropy(out.final_noun, batch.targets["noun"], smoothing),
        ]
        + (
            [smoothed_cross_entropy(out.final_action, batch.targets["action"], smoothing)]
            if out.final_action is not None
            else []
        )
    ).sum()
    if positionwise_weight > 0 and n_positions > 0:
        position_terms = [
            smoothed_cross_entropy(
                out.verb_positions[:, :n_positions],
                batch.position_labels["verb"][:, :n_positions],
                smoothing,
            ),
            smoothed_cross_entropy(
                out.noun_positions[:, :n_positions],
                batch.position_labels["noun"][:, :n_positions],
                smoothing,
            ),
        ]
        loss = loss + positionwise_weight * torch.stack(position_terms).sum()
    return loss


def train_vnrm(
    train_tensors: InstanceTensors,
    val_tensors: InstanceTensors,
    model_config: ModelConfig,
    vnrm_config: VnrmConfig,
    train_config: TrainConfig,
    teacher: VerbNounRelationModel | None = None,
    variant: str = "student",
    actions: ActionMapping | None = None,
    log_path: str | Path | None = None,
) -> TrainedModel:
    """Train a relation model.

    variant="student" consumes observed clips only; variant="teacher" trains
    the asymmetric full-video teacher. When vnrm_config.use_kd is set and a
    teacher is given, the student also matches the teacher's final-position
    verb and noun distributions under the distillation temperature.
    """
    if variant not in ("student", "teacher"):
        raise ValueError(f"unknown vnrm variant {variant!r}")
    torch.manual_seed(train_config.seed)
    model = VerbNounRelationModel(model_config, vnrm_config)
    smoothing = train_config.label_smoothing
    cfg = vnrm_config.distill
    n_obs = train_tensors.observed_len
    is_teacher = variant == "teacher"
    if is_teacher:
        input_mode = "full"
    else:
        input_mode = "student" if vnrm_config.gap_tokens else "observed"

    soft: dict[str, torch.Tensor] | None = None
    if vnrm_config.use_kd and teacher is not None and not is_teacher:
        teacher.eval()
        parts: dict[str, list[torch.Tensor]] = {"verb": [], "noun": []}
        with torch.no_grad():
            for start in range(0, len(train_tensors), 512):
                idx = list(range(start, min(start + 512, len(train_tensors))))
                batch = train_tensors.select(idx)
                out = teacher.forward_teacher(batch.full, n_obs)
                parts["verb"].append(
                    torch.softmax(out.final_verb / cfg.temperature, dim=-1)
                )
                parts["noun"].append(
                    torch.softmax(out.final_noun / cfg.temperature, dim=-1)
                )
        soft = {h: torch.cat(v) for h, v in parts.items()}

    def batch_fn(indices):
        batch = train_tensors.select(indices)
        if soft is None:
            return batch, None
        idx = torch.as_tensor(indices)
        return batch, {h: soft[h][idx] for h in soft}

    def loss_fn(m: VerbNounRelationModel, packed) -> torch.Tensor:
        batch, soft_targets = packed
        if is_teacher:
            out = m.forward_teacher(batch.full, n_obs)
            n_positions = batch.full.shape[1]
        elif vnrm_config.gap_tokens:
            out = m.forward_student(batch.observed, batch.gap)
            # gap slots separate anticipation from recognition, so every
            # observed position can take propagated-label supervision
            n_positions = n_obs
        else:
            out = m.forward_observed(batch.observed)
            # final observed position carries the target CE; positionwise
            # supervision covers the earlier positions
            n_positions = n_obs - 1
        loss = _vnrm_supervised(
            out, batch, smoothing, cfg.ce_weight, cfg.positionwise_ce_weight,
            n_positions,
        )
        if soft_targets is not None and cfg.kd_weight > 0:
            terms = [
                tempered_kl(out.final_verb, soft_targets["verb"], cfg.temperature),
                tempered_kl(out.final_noun, soft_targets["noun"], cfg.temperature),
            ]
            loss = loss + cfg.kd_weight * torch.stack(terms).mean()
        return loss

    result = train(
        model,
        n_train=len(train_tensors),
        batch_fn=batch_fn,
        loss_fn=loss_fn,
        validate_fn=make_validate_fn(input_mode, val_tensors, actions),
        config=train_config,
        log_path=log_path,
    )
    return TrainedModel(model, result, input_mode=input_mode, model_kind="vnrm")
