"""Clip-level data model: timelines, labels, anticipation instances.

A video is represented as a uniform sequence of fixed-duration clips, each
carrying a feature vector and, where an annotated segment covers the clip's
midpoint, a (verb, noun, action) label. Anticipation instances are windows of
observed clips ending one anticipation time before a target segment, plus the
gap clips spanning that anticipation time.
"""
from __future__ import annotations

import csv
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"EGOFEAT1"

ANNOTATION_COLUMNS = (
    "segment_id",
    "participant_id",
    "video_id",
    "start_sec",
    "stop_sec",
    "verb_id",
    "noun_id",
    "action_id",
)

# Tolerance for "is this time an exact multiple of the clip duration" checks.
_TIME_EPS = 1e-6


class AnnotationError(ValueError):
    """Malformed or out-of-range annotation data."""


class PropagationError(ValueError):
    """Label propagation requested on a timeline with no labeled clip."""


class InsufficientHistoryWarning(UserWarning):
    """A segment was skipped because it lacks enough preceding video."""


@dataclass(frozen=True)
class ActionLabel:
    """Class indices for one annotated action."""

    verb_id: int
    noun_id: int
    action_id: int

    def validate(self, task: "TaskConfig") -> None:
        if not 0 <= self.verb_id < task.k_verb:
            raise AnnotationError(f"verb_id {self.verb_id} outside [0, {task.k_verb})")
        if not 0 <= self.noun_id < task.k_noun:
            raise AnnotationError(f"noun_id {self.noun_id} outside [0, {task.k_noun})")
        if not 0 <= self.action_id < task.k_action:
            raise AnnotationError(
                f"action_id {self.action_id} outside [0, {task.k_action})"
            )


@dataclass
class Clip:
    """One fixed-duration slice of a video."""

    index: int
    start_time: float
    duration: float
    features: np.ndarray
    label: ActionLabel | None = None

    @property
    def end_time(self) -> float:
        return self.start_time + self.duration

    @property
    def midpoint(self) -> float:
        return self.start_time + 0.5 * self.duration


@dataclass
class ClipTimeline:
    """An entire video as an ordered, contiguous list of clips."""

    video_id: str
    clips: list[Clip]
    feature_dim: int

    def __post_init__(self) -> None:
        for i, clip in enumerate(self.clips):
            if clip.index != i:
                raise ValueError(
                    f"clip indices must be contiguous from 0; got {clip.index} at {i}"
                )
            if clip.features.shape != (self.feature_dim,):
                raise ValueError(
                    f"clip {i} features have shape {clip.features.shape}, "
                    f"expected ({self.feature_dim},)"
                )

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def labeled_indices(self) -> list[int]:
        return [c.index for c in self.clips if c.label is not None]


@dataclass(frozen=True)
class TaskConfig:
    """Anticipation task geometry and class vocabulary sizes."""

    k_verb: int
    k_noun: int
    k_action: int
    clip_duration: float = 1.0
    anticipation_time: float = 1.0
    observed_duration: float = 6.0

    def __post_init__(self) -> None:
        if self.clip_duration <= 0:
            raise ValueError("clip_duration must be positive")
        for name in ("anticipation_time", "observed_duration"):
            value = getattr(self, name)
            ratio = value / self.clip_duration
            if abs(ratio - round(ratio)) > _TIME_EPS or round(ratio) < 1:
                raise ValueError(
                    f"{name} ({value}) must be a positive integer multiple of "
                    f"clip_duration ({self.clip_duration})"
                )

    @property
    def gap_clips(self) -> int:
        """Number of clips spanning the anticipation time."""
        return round(self.anticipation_time / self.clip_duration)

    @property
    def observed_clips(self) -> int:
        return round(self.observed_duration / self.clip_duration)


@dataclass(frozen=True)
class AnnotationRow:
    """One parsed annotation record."""

    segment_id: str
    participant_id: str
    video_id: str
    start_sec: float
    stop_sec: float
    label: ActionLabel


@dataclass
class AnticipationInstance:
    """Observed window, gap slot count, and target for one segment."""

    observed: list[Clip]
    gap_positions: int
    target: ActionLabel
    participant_id: str
    segment_id: str
    video_id: str = ""

    @property
    def observed_indices(self) -> list[int]:
        return [c.index for c in self.observed]

    @property
    def gap_indices(self) -> list[int]:
        last = self.observed[-1].index
        return [last + 1 + g for g in range(self.gap_positions)]


def load_annotations(path: str | Path, task: TaskConfig) -> list[AnnotationRow]:
    """Parse an annotation CSV, validating class indices against the task.

    The file is comma-delimited with a header row naming the columns
    segment_id, participant_id, video_id, start_sec, stop_sec, verb_id,
    noun_id, action_id. Rows are returned in file order.
    """
    path = Path(path)
    rows: list[AnnotationRow] = []
    with path.open(newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            return rows
        missing = set(ANNOTATION_COLUMNS) - set(reader.fieldnames)
        if missing:
            raise AnnotationError(f"{path}: missing columns {sorted(missing)}")
        for line_no, raw in enumerate(reader, start=2):
            try:
                label = ActionLabel(
                    verb_id=int(raw["verb_id"]),
                    noun_id=int(raw["noun_id"]),
                    action_id=int(raw["action_id"]),
                )
                row = AnnotationRow(
                    segment_id=raw["segment_id"],
                    participant_id=raw["participant_id"],
                    video_id=raw["video_id"],
                    start_sec=float(raw["start_sec"]),
                    stop_sec=float(raw["stop_sec"]),
                    label=label,
                )
            except (TypeError, ValueError, KeyError) as exc:
                raise AnnotationError(f"{path}: malformed row at line {line_no}: {exc}") from exc
            if row.stop_sec <= row.start_sec:
                raise AnnotationError(
                    f"{path}: line {line_no}: stop_sec must exceed start_sec"
                )
            label.validate(task)
            rows.append(row)
    return rows


def save_annotations(path: str | Path, rows: list[AnnotationRow]) -> None:
    """Write annotation rows in the same CSV layout load_annotations reads."""
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(ANNOTATION_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.segment_id,
                    row.participant_id,
                    row.video_id,
                    f"{row.start_sec:.6f}",
                    f"{row.stop_sec:.6f}",
                    row.label.verb_id,
                    row.label.noun_id,
                    row.label.action_id,
                ]
            )


def write_features(path: str | Path, features: np.ndarray) -> None:
    """Write a (clip_count, dim) float matrix as magic + u64 header + f32 data."""
    features = np.asarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {features.shape}")
    n, dim = features.shape
    with Path(path).open("wb") as handle:
        handle.write(FEATURE_MAGIC)
        handle.write(struct.pack("<QQ", n, dim))
        handle.write(features.tobytes(order="C"))


def read_features(path: str | Path) -> np.ndarray:
    """Read a feature file written by write_features."""
    raw = Path(path).read_bytes()
    if raw[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad magic, not a feature file")
    n, dim = struct.unpack_from("<QQ", raw, len(FEATURE_MAGIC))
    offset = len(FEATURE_MAGIC) + 16
    expected = n * dim * 4
    payload = raw[offset:]
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(n, dim).copy()


def build_timeline(
    video_id: str,
    features: np.ndarray,
    annotations: list[AnnotationRow],
    task: TaskConfig,
) -> ClipTimeline:
    """Assemble a labeled timeline from per-clip features and segment rows.

    A clip takes the label of the segment containing its midpoint; when
    several segments contain it, the latest-starting segment wins (ties on
    start time go to the later row). Clips covered by no segment stay
    unlabeled.
    """
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2:
        raise ValueError(f"features must be (clips, dim), got {features.shape}")
    if not np.isfinite(features).all():
        raise ValueError(f"{video_id}: non-finite feature values")
    n_clips, dim = features.shape
    rows = [r for r in annotations if r.video_id == video_id]
    clips: list[Clip] = []
    for i in range(n_clips):
        start = i * task.clip_duration
        mid = start + 0.5 * task.clip_duration
        best: AnnotationRow | None = None
        for row in rows:
            if row.start_sec <= mid < row.stop_sec:
                if best is None or row.start_sec >= best.start_sec:
                    best = row
        clips.append(
            Clip(
                index=i,
                start_time=start,
                duration=task.clip_duration,
                features=features[i],
                label=best.label if best is not None else None,
            )
        )
    return ClipTimeline(video_id=video_id, clips=clips, feature_dim=dim)


def propagate_labels(timeline: ClipTimeline) -> ClipTimeline:
    """Fill every unlabeled clip with its nearest labeled clip's label.

    Distance is measured in clip indices; exact ties resolve to the later
    (higher-index) clip, the one leading into the upcoming action. Labeled
    clips are left untouched. The input timeline is not modified.
    """
    labeled = timeline.labeled_indices
    if not labeled:
        raise PropagationError(f"{timeline.video_id}: no labeled clip to propagate from")
    labels = [c.label for c in timeline.clips]
    n = len(timeline.clips)

    prev_labeled = [-1] * n
    last = -1
    for i in range(n):
        if labels[i] is not None:
            last = i
        prev_labeled[i] = last
    next_labeled = [-1] * n
    nxt = -1
    for i in range(n - 1, -1, -1):
        if labels[i] is not None:
            nxt = i
        next_labeled[i] = nxt

    new_clips: list[Clip] = []
    for i, clip in enumerate(timeline.clips):
        if clip.label is not None:
            new_clips.append(clip)
            continue
        p, q = prev_labeled[i], next_labeled[i]
        if p < 0:
            source = q
        elif q < 0:
            source = p
        else:
            # tie (equal distance) goes to the later clip
            source = p if i - p < q - i else q
        new_clips.append(replace(clip, label=labels[source]))
    return ClipTimeline(
        video_id=timeline.video_id, clips=new_clips, feature_dim=timeline.feature_dim
    )


def make_instance(
    timeline: ClipTimeline, segment: AnnotationRow, task: TaskConfig
) -> AnticipationInstance | None:
    """Cut the observed window and gap slots for one annotated segment.

    The observed window is the last `observed_clips` clips ending at or before
    segment start minus the anticipation time; the gap covers the following
    `gap_clips` clips. Segments without enough preceding video are skipped
    with an InsufficientHistoryWarning and None is returned.
    """
    gap = task.gap_clips
    n_obs = task.observed_clips
    cutoff = segment.start_sec - task.anticipation_time
    # last observed clip is the latest clip ending at or before the cutoff
    last_obs = math.floor(cutoff / task.clip_duration + _TIME_EPS) - 1
    first_obs = last_obs - n_obs + 1
    if first_obs < 0:
        warnings.warn(
            f"segment {segment.segment_id}: needs {n_obs} observed clips before "
            f"t={cutoff:.3f}s, video starts too late; skipped",
            InsufficientHistoryWarning,
            stacklevel=2,
        )
        return None
    if last_obs + gap >= len(timeline):
        warnings.warn(
            f"segment {segment.segment_id}: gap clips extend past the end of "
            f"video {timeline.video_id}; skipped",
            InsufficientHistoryWarning,
            stacklevel=2,
        )
        return None
    observed = timeline.clips[first_obs : last_obs + 1]
    return AnticipationInstance(
        observed=list(observed),
        gap_positions=gap,
        target=segment.label,
        participant_id=segment.participant_id,
        segment_id=segment.segment_id,
        video_id=timeline.video_id,
    )


def build_instances(
    timeline: ClipTimeline, annotations: list[AnnotationRow], task: TaskConfig
) -> list[AnticipationInstance]:
    """make_instance over all of a video's segments, dropping skipped ones."""
    out = []
    for row in annotations:
        if row.video_id != timeline.video_id:
            continue
        inst = make_instance(timeline, row, task)
        if inst is not None:
            out.append(inst)
    return out


def full_sequence(
    instance: AnticipationInstance, timeline: ClipTimeline, extra_clips: int = 0
) -> tuple[np.ndarray, list[ActionLabel]]:
    """Features and per-position labels for observed + gap clips.

    This is the input view a full-video teacher consumes: real features for
    every position, including the anticipation gap. `extra_clips` optionally
    extends the sequence past the gap into the action segment itself. Requires
    propagate_labels to have run on the timeline.
    """
    indices = instance.observed_indices + instance.gap_indices
    if extra_clips:
        last = indices[-1]
        extension = [last + 1 + j for j in range(extra_clips)]
        if extension[-1] >= len(timeline):
            raise ValueError(
                f"{instance.segment_id}: extension past the end of the timeline"
            )
        indices = indices + extension
    features = np.stack([timeline.clips[i].features for i in indices])
    labels: list[ActionLabel] = []
    for i in indices:
        label = timeline.clips[i].label
        if label is None:
            raise PropagationError(
                f"{timeline.video_id}: clip {i} unlabeled; run propagate_labels first"
            )
        labels.append(label)
    return features, labels
