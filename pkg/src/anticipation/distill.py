"""Anticipation-gap knowledge distillation: soft labels, KD loss, and caching.

A gap-blind student is supervised at its gap positions by the tempered class
distributions a full-video teacher produced there. Multiple teachers combine
by averaging distributions entrywise. The loss is temperature-scaled KL with
the usual T^2 gradient compensation.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import AnticipationModel, LogitBundle

SOFT_LABEL_MAGIC = b"SOFTLBL1"

KD_HEADS = ("verb", "noun", "action")


@dataclass(frozen=True)
class DistillConfig:
    """Distillation temperature and loss-term weights."""

    temperature: float = 2.0
    kd_weight: float = 1.0
    ce_weight: float = 1.0
    positionwise_ce_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.kd_weight < 0 or self.positionwise_ce_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.ce_weight <= 0:
            raise ValueError("ce_weight must be positive")


@dataclass
class SoftLabelSet:
    """Teacher distributions per gap position, per head.

    Heads map to (gap_positions, n_classes) probability tensors; the action
    entry is optional. Rows live on the probability simplex.
    """

    heads: dict[str, torch.Tensor]
    temperature_used: float

    def __post_init__(self) -> None:
        for name, probs in self.heads.items():
            if name not in KD_HEADS:
                raise ValueError(f"unknown head {name!r}")
            if probs.ndim != 2:
                raise ValueError(f"{name} distributions must be (positions, classes)")
        self.validate()

    def validate(self, atol: float = 1e-6) -> None:
        for name, probs in self.heads.items():
            if (probs < 0).any():
                raise ValueError(f"{name} distribution has negative entries")
            sums = probs.sum(dim=-1)
            if not torch.allclose(sums, torch.ones_like(sums), atol=atol):
                raise ValueError(f"{name} distributions do not sum to 1")

    @property
    def gap_positions(self) -> int:
        return next(iter(self.heads.values())).shape[0]

    def head_names(self) -> tuple[str, ...]:
        return tuple(h for h in KD_HEADS if h in self.heads)


def soft_labels_from_logits(
    bundle: LogitBundle, temperature: float, positions: slice
) -> SoftLabelSet:
    """Tempered softmax of the given positions' logits, one row per position."""
    heads: dict[str, torch.Tensor] = {}
    for name in KD_HEADS:
        logits = bundle.head(name)
        if logits is None:
            continue
        heads[name] = torch.softmax(logits[..., positions, :] / temperature, dim=-1)
    return SoftLabelSet(heads=heads, temperature_used=temperature)


def extract_soft_labels(
    teacher: AnticipationModel,
    full_features: torch.Tensor,
    gap: int,
    temperature: float,
) -> list[SoftLabelSet]:
    """Teacher soft labels at the gap positions for a batch of full sequences.

    `full_features` is (batch, observed + gap, feature_dim); the teacher runs
    in evaluation mode and the result is deterministic.
    """
    was_training = teacher.training
    teacher.eval()
    try:
        with torch.no_grad():
            bundle = teacher.forward_features(full_features)
    finally:
        teacher.train(was_training)
    t = full_features.shape[1]
    gap_slice = slice(t - gap, t)
    out = []
    for i in range(full_features.shape[0]):
        row = LogitBundle(
            verb=bundle.verb[i],
            noun=bundle.noun[i],
            action=None if bundle.action is None else bundle.action[i],
        )
        out.append(soft_labels_from_logits(row, temperature, gap_slice))
    return out


def average_soft_labels(sets: list[SoftLabelSet]) -> SoftLabelSet:
    """Entrywise arithmetic mean of matching soft-label sets."""
    if not sets:
        raise ValueError("nothing to average")
    first = sets[0]
    for other in sets[1:]:
        if other.head_names() != first.head_names():
            raise ValueError("soft-label sets disagree on heads")
        if other.temperature_used != first.temperature_used:
            raise ValueError("soft-label sets disagree on temperature")
        for name in first.heads:
            if other.heads[name].shape != first.heads[name].shape:
                raise ValueError(f"{name} shapes differ across soft-label sets")
    heads = {
        name: torch.stack([s.heads[name] for s in sets]).mean(dim=0)
        for name in first.heads
    }
    return SoftLabelSet(heads=heads, temperature_used=first.temperature_used)


def tempered_kl(
    student_logits: torch.Tensor, teacher_probs: torch.Tensor, temperature: float
) -> torch.Tensor:
    """T^2 * KL(teacher || softmax(student / T)), averaged over leading dims."""
    if student_logits.shape != teacher_probs.shape:
        raise ValueError(
            f"student logits {tuple(student_logits.shape)} do not match "
            f"teacher distributions {tuple(teacher_probs.shape)}"
        )
    probs = teacher_probs.to(student_logits.dtype)
    log_q = torch.log_softmax(student_logits / temperature, dim=-1)
    kl = torch.xlogy(probs, probs).sum(dim=-1) - (probs * log_q).sum(dim=-1)
    return temperature**2 * kl.mean()


def distillation_loss(
    student_logits: dict[str, torch.Tensor],
    teacher_probs: SoftLabelSet,
    temperature: float,
) -> torch.Tensor:
    """Mean over gap positions and heads of T^2 * KL(teacher || student).

    `student_logits` maps head names to (gap_positions, n_classes) logits.
    Zero exactly when the student's tempered softmax matches the teacher
    distribution at every position and head.
    """
    terms = []
    for name in teacher_probs.head_names():
        if name not in student_logits:
            raise ValueError(f"student logits missing head {name!r}")
        terms.append(
            tempered_kl(student_logits[name], teacher_probs.heads[name], temperature)
        )
    if not terms:
        raise ValueError("no heads to distill")
    return torch.stack(terms).mean()


def stack_soft_labels(sets: list[SoftLabelSet]) -> dict[str, torch.Tensor]:
    """Stack per-instance sets into head -> (n, gap, classes) tensors."""
    if not sets:
        raise ValueError("no soft labels to stack")
    names = sets[0].head_names()
    return {
        name: torch.stack([s.heads[name] for s in sets]) for name in names
    }


# --- cache file -------------------------------------------------------------


def save_soft_label_cache(
    path: str | Path,
    segment_ids: list[str],
    sets: list[SoftLabelSet],
    teacher_hash: str,
) -> None:
    """Write per-segment gap distributions with provenance in the header."""
    if len(segment_ids) != len(sets):
        raise ValueError("one soft-label set per segment id required")
    if not sets:
        raise ValueError("refusing to write an empty cache")
    names = sets[0].head_names()
    gap = sets[0].gap_positions
    widths = {name: sets[0].heads[name].shape[1] for name in names}
    header = {
        "schema": 1,
        "teacher_hash": teacher_hash,
        "temperature": sets[0].temperature_used,
        "gap_positions": gap,
        "heads": {name: widths[name] for name in names},
        "n_segments": len(sets),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with Path(path).open("wb") as handle:
        handle.write(SOFT_LABEL_MAGIC)
        handle.write(struct.pack("<I", len(blob)))
        handle.write(blob)
        for seg, labels in zip(segment_ids, sets):
            if labels.head_names() != names or labels.gap_positions != gap:
                raise ValueError("soft-label sets disagree on layout")
            encoded = seg.encode()
            handle.write(struct.pack("<I", len(encoded)))
            handle.write(encoded)
            # blob order matches the sorted-key JSON header the loader iterates
            for name in sorted(names):
                arr = labels.heads[name].numpy().astype("<f4")
                handle.write(arr.tobytes(order="C"))


def load_soft_label_cache(
    path: str | Path,
) -> tuple[dict[str, SoftLabelSet], dict]:
    """Read a cache file back as {segment_id: SoftLabelSet} plus its header."""
    raw = Path(path).read_bytes()
    if raw[: len(SOFT_LABEL_MAGIC)] != SOFT_LABEL_MAGIC:
        raise ValueError(f"{path}: not a soft-label cache")
    (header_len,) = struct.unpack_from("<I", raw, len(SOFT_LABEL_MAGIC))
    offset = len(SOFT_LABEL_MAGIC) + 4
    header = json.loads(raw[offset : offset + header_len].decode())
    offset += header_len
    gap = header["gap_positions"]
    by_segment: dict[str, SoftLabelSet] = {}
    for _ in range(header["n_segments"]):
        (seg_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        seg = raw[offset : offset + seg_len].decode()
        offset += seg_len
        heads: dict[str, torch.Tensor] = {}
        for name, width in header["heads"].items():
            count = gap * width
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            heads[name] = torch.from_numpy(arr.reshape(gap, width).copy())
            offset += count * 4
        by_segment[seg] = SoftLabelSet(
            heads=heads, temperature_used=header["temperature"]
        )
    return by_segment, header
