"""Run a model over instance tensors and produce probabilities and score files.

Input modes select which view a model consumes:

* ``observed`` — real observed clips only (base model, VNRM student);
* ``student``  — observed clips plus learnable gap tokens (gap-blind student);
* ``full``     — observed plus real gap clips (teachers).
"""
from __future__ import annotations

from typing import Callable

import numpy as np
import torch
from torch import nn

from .datasets import InstanceTensors
from .evaluation import ActionMapping, ScoreFile, compose_action_scores, mean_top5_recall
from .model import AnticipationModel
from .vnrm import VerbNounRelationModel

INPUT_MODES = ("observed", "student", "full")


def final_logits(
    model: nn.Module, input_mode: str, batch: InstanceTensors
) -> dict[str, torch.Tensor]:
    """Final-position logits per head for one batch, given the input regime."""
    if input_mode not in INPUT_MODES:
        raise ValueError(f"unknown input mode {input_mode!r}")
    if isinstance(model, VerbNounRelationModel):
        if input_mode == "observed":
            out = model.forward_observed(batch.observed)
        elif input_mode == "full":
            out = model.forward_teacher(batch.full, batch.observed_len)
        else:
            out = model.forward_student(batch.observed, batch.gap)
        logits = {"verb": out.final_verb, "noun": out.final_noun}
        if out.final_action is not None:
            logits["action"] = out.final_action
        return logits
    if isinstance(model, AnticipationModel):
        if input_mode == "observed":
            bundle = model.forward_features(batch.observed).final()
        elif input_mode == "full":
            bundle = model.forward_features(batch.full).final()
        else:
            bundle = model.forward_student(batch.observed, batch.gap).final()
        logits = {"verb": bundle.verb, "noun": bundle.noun}
        if bundle.action is not None:
            logits["action"] = bundle.action
        return logits
    raise TypeError(f"cannot score model of type {type(model).__name__}")


def predict_probs(
    model: nn.Module,
    input_mode: str,
    tensors: InstanceTensors,
    chunk_size: int = 512,
) -> dict[str, np.ndarray]:
    """Final-position softmax probabilities over a whole split (eval mode)."""
    was_training = model.training
    model.eval()
    chunks: dict[str, list[np.ndarray]] = {}
    try:
        with torch.no_grad():
            for start in range(0, len(tensors), chunk_size):
                idx = np.arange(start, min(start + chunk_size, len(tensors)))
                logits = final_logits(model, input_mode, tensors.select(idx))
                for head, values in logits.items():
                    probs = torch.softmax(values, dim=-1).double().numpy()
                    chunks.setdefault(head, []).append(probs)
    finally:
        model.train(was_training)
    return {head: np.concatenate(parts) for head, parts in chunks.items()}


def make_scorefile(
    model: nn.Module,
    input_mode: str,
    tensors: InstanceTensors,
    tag: str,
    actions: ActionMapping | None = None,
) -> ScoreFile:
    """Score a split into a ScoreFile; composes action scores if the model
    lacks an action head and a pair mapping is supplied."""
    probs = predict_probs(model, input_mode, tensors)
    action = probs.get("action")
    if action is None and actions is not None:
        action = np.atleast_2d(compose_action_scores(probs["verb"], probs["noun"], actions))
    out = ScoreFile(
        segment_ids=list(tensors.segment_ids),
        verb=probs["verb"],
        noun=probs["noun"],
        action=action,
        model_tag=tag,
    )
    out.validate()
    return out


def make_validate_fn(
    input_mode: str,
    val_tensors: InstanceTensors,
    actions: ActionMapping | None = None,
) -> Callable[[nn.Module], dict[str, float]]:
    """Per-head mean top-5 recall on a validation split, for the train loop."""
    targets = {h: t.numpy() for h, t in val_tensors.targets.items()}

    def validate(model: nn.Module) -> dict[str, float]:
        probs = predict_probs(model, input_mode, val_tensors)
        if "action" not in probs and actions is not None:
            probs["action"] = np.atleast_2d(
                compose_action_scores(probs["verb"], probs["noun"], actions)
            )
        recalls = {}
        for head in ("verb", "noun", "action"):
            if head in probs:
                mean, _ = mean_top5_recall(probs[head], targets[head])
                recalls[head] = mean
        return recalls

    return validate
