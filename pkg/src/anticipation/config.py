"""YAML run configuration: sectioned key-value files plus CLI overrides.

A run config is a YAML document with optional sections (model, train,
distill, vnrm, synthetic). Dataset-derived fields (feature_dim, class counts,
sequence lengths) are filled in by the caller, never by the file.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .data import TaskConfig
from .distill import DistillConfig
from .model import ModelConfig
from .synthetic import SyntheticGrammarConfig
from .training import TrainConfig
from .vnrm import VnrmConfig


class ConfigError(ValueError):
    """Unknown keys or malformed values in a run configuration."""


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    doc = yaml.safe_load(Path(path).read_text())
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def apply_overrides(doc: dict, assignments: list[str]) -> dict:
    """Apply `section.key=value` overrides; values parse as YAML scalars."""
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in doc.items()}
    for assignment in assignments:
        if "=" not in assignment:
            raise ConfigError(f"override {assignment!r} is not of the form key=value")
        key, _, raw = assignment.partition("=")
        value = yaml.safe_load(raw)
        parts = key.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must be section.field")
        section, name = parts
        out.setdefault(section, {})[name] = value
    return out


def _build(cls, section: dict, where: str, **fixed):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    overlap = set(section) & set(fixed)
    if overlap:
        raise ConfigError(
            f"{where}: keys {sorted(overlap)} are derived from the dataset and "
            f"cannot be set in the config"
        )
    try:
        return cls(**{**section, **fixed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def make_train_config(doc: dict) -> TrainConfig:
    return _build(TrainConfig, dict(doc.get("train", {})), "train")


def make_distill_config(doc: dict) -> DistillConfig:
    return _build(DistillConfig, dict(doc.get("distill", {})), "distill")


def make_vnrm_config(doc: dict) -> VnrmConfig:
    section = dict(doc.get("vnrm", {}))
    distill = section.pop("distill", None)
    if distill is not None:
        section["distill"] = _build(DistillConfig, dict(distill), "vnrm.distill")
    elif "distill" in doc:
        section["distill"] = make_distill_config(doc)
    return _build(VnrmConfig, section, "vnrm")


def make_model_config(doc: dict, task: TaskConfig, feature_dim: int) -> ModelConfig:
    section = dict(doc.get("model", {}))
    seq_len = task.observed_clips + task.gap_clips
    section.setdefault("max_seq_len", max(seq_len, 8))
    section.setdefault("max_gap", max(task.gap_clips, 1))
    return _build(
        ModelConfig,
        section,
        "model",
        feature_dim=feature_dim,
        k_verb=task.k_verb,
        k_noun=task.k_noun,
        k_action=task.k_action,
    )


@dataclass
class SyntheticRun:
    """Generator invocation: grammar plus dataset geometry."""

    grammar: SyntheticGrammarConfig
    n_videos: int
    clips_per_video: int
    anticipation_time: float
    observed_duration: float


def make_synthetic_config(doc: dict) -> SyntheticRun:
    from .synthetic import default_verb_to_noun

    section = dict(doc.get("synthetic", {}))
    n_videos = int(section.pop("n_videos", 320))
    clips_per_video = int(section.pop("clips_per_video", 40))
    anticipation_time = float(section.pop("anticipation_time", 1.0))
    observed_duration = float(section.pop("observed_duration", 6.0))
    auto_nouns = section.get("verb_to_noun") == "auto"
    if auto_nouns:
        section.pop("verb_to_noun")
    grammar = _build(SyntheticGrammarConfig, section, "synthetic")
    if auto_nouns:
        section["verb_to_noun"] = default_verb_to_noun(grammar)
        grammar = _build(SyntheticGrammarConfig, section, "synthetic")
    return SyntheticRun(
        grammar=grammar,
        n_videos=n_videos,
        clips_per_video=clips_per_video,
        anticipation_time=anticipation_time,
        observed_duration=observed_duration,
    )


def dump_config(doc: dict, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True))
