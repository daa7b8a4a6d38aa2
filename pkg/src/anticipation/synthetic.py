"""Seeded synthetic clip datasets with controllable verb-noun structure.

Each generated video alternates action segments with single-clip gaps. Verbs
follow a seeded Markov chain; the noun of a segment is determined by (or
sampled given) the previous segment's verb, so anticipating the next noun from
observed history is possible by construction. Clip features are class
prototypes plus Gaussian noise, and gap clips blend the upcoming action's
prototype with the previous one at a configurable signal strength, so a model
that sees gap clips holds an advantage a gap-blind model must be taught.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import (
    ActionLabel,
    AnnotationRow,
    Clip,
    ClipTimeline,
    TaskConfig,
    save_annotations,
    write_features,
)
from .evaluation import ActionMapping, SplitSpec

MIN_SEGMENT_CLIPS = 2
MAX_SEGMENT_CLIPS = 4
PARTICIPANT_POOL = 12
UNSEEN_PARTICIPANTS = 2
VAL_VIDEO_PERIOD = 5  # every 5th seen-participant video goes to validation
TAIL_FRACTION = 0.2


@dataclass
class SyntheticGrammarConfig:
    """Knobs for the synthetic action grammar."""

    k_verb: int = 10
    k_noun: int = 15
    feature_dim: int = 32
    noise_scale: float = 0.5
    gap_signal_strength: float = 0.8
    seed: int = 7
    # noun id per verb id; None draws nouns uniformly instead
    verb_to_noun: list[int] | None = None
    # successors per verb for the Markov verb chain; 0 gives i.i.d. uniform verbs
    verb_successors: int = 3
    # standard deviation of class prototype entries; smaller means classes
    # overlap more relative to the feature noise
    prototype_scale: float = 1.0
    k_action: int | None = None

    def __post_init__(self) -> None:
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")
        if self.prototype_scale <= 0:
            raise ValueError("prototype_scale must be positive")
        if not 0.0 <= self.gap_signal_strength <= 1.0:
            raise ValueError("gap_signal_strength must lie in [0, 1]")
        if self.k_verb < 1 or self.k_noun < 1 or self.feature_dim < 1:
            raise ValueError("class counts and feature_dim must be positive")
        if self.verb_to_noun is not None:
            if len(self.verb_to_noun) != self.k_verb:
                raise ValueError(
                    f"verb_to_noun must list one noun per verb ({self.k_verb})"
                )
            if any(not 0 <= n < self.k_noun for n in self.verb_to_noun):
                raise ValueError("verb_to_noun entries must be valid noun ids")
        if self.k_action is not None and self.k_action != self.k_verb * self.k_noun:
            raise ValueError(
                "k_action is derived as k_verb * k_noun for the synthetic grammar"
            )
        if not 0 <= self.verb_successors <= self.k_verb:
            raise ValueError("verb_successors must lie in [0, k_verb]")

    @property
    def derived_k_action(self) -> int:
        return self.k_verb * self.k_noun

    def action_id(self, verb: int, noun: int) -> int:
        return verb * self.k_noun + noun


@dataclass
class SyntheticDataset:
    """Generated timelines plus the metadata needed to train and evaluate."""

    timelines: list[ClipTimeline]
    task: TaskConfig
    annotations: list[AnnotationRow]
    split: SplitSpec
    actions: ActionMapping
    train_video_ids: list[str]
    val_video_ids: list[str]

    def __iter__(self):
        # allows `timelines, task = generate_synthetic(...)` unpacking
        return iter((self.timelines, self.task))

    def annotations_for(self, video_ids: list[str]) -> list[AnnotationRow]:
        wanted = set(video_ids)
        return [r for r in self.annotations if r.video_id in wanted]


def default_verb_to_noun(config: SyntheticGrammarConfig) -> list[int]:
    """A deterministic verb-to-noun table derived from the config seed.

    Injective when k_noun >= k_verb, so distinct verbs act on distinct nouns
    and the verb-noun coupling is fully informative in both directions.
    """
    rng = np.random.default_rng(config.seed + 1)
    if config.k_noun >= config.k_verb:
        return [int(n) for n in rng.choice(config.k_noun, size=config.k_verb, replace=False)]
    return [int(n) for n in rng.integers(0, config.k_noun, size=config.k_verb)]


def _verb_transitions(config: SyntheticGrammarConfig, rng: np.random.Generator) -> np.ndarray:
    """Row-stochastic verb transition matrix with a few preferred successors."""
    k = config.k_verb
    if config.verb_successors == 0:
        return np.full((k, k), 1.0 / k)
    weights = np.linspace(1.0, 0.4, config.verb_successors)
    weights /= weights.sum()
    matrix = np.zeros((k, k))
    for v in range(k):
        successors = rng.permutation(k)[: config.verb_successors]
        matrix[v, successors] = weights
    return matrix


def generate_synthetic(
    config: SyntheticGrammarConfig,
    n_videos: int,
    clips_per_video: int,
    anticipation_time: float = 1.0,
    observed_duration: float = 6.0,
) -> SyntheticDataset:
    """Generate a deterministic synthetic dataset.

    Videos are sequences of (verb, noun) segments separated by one-clip gaps.
    Segment-clip features are the action prototype plus Gaussian noise; gap
    clips mix the next and previous action prototypes at gap_signal_strength.
    The same config produces byte-identical datasets on every call. The task
    geometry (anticipation time, observed window) only affects the emitted
    TaskConfig, not the timelines.
    """
    if n_videos < 1:
        raise ValueError("n_videos must be >= 1")
    if clips_per_video < MIN_SEGMENT_CLIPS:
        raise ValueError(f"clips_per_video must be >= {MIN_SEGMENT_CLIPS}")

    rng = np.random.default_rng(config.seed)
    k_action = config.derived_k_action
    task = TaskConfig(
        k_verb=config.k_verb,
        k_noun=config.k_noun,
        k_action=k_action,
        clip_duration=1.0,
        anticipation_time=anticipation_time,
        observed_duration=observed_duration,
    )

    scale = config.prototype_scale
    verb_protos = rng.normal(0.0, scale, size=(config.k_verb, config.feature_dim))
    noun_protos = rng.normal(0.0, scale, size=(config.k_noun, config.feature_dim))
    transitions = _verb_transitions(config, rng)

    def prototype(verb: int, noun: int) -> np.ndarray:
        return verb_protos[verb] + noun_protos[noun]

    timelines: list[ClipTimeline] = []
    annotations: list[AnnotationRow] = []
    segment_counter = 0

    for vid_idx in range(n_videos):
        participant = f"P{1 + vid_idx % PARTICIPANT_POOL:02d}"
        video_id = f"{participant}_V{vid_idx:04d}"

        # segment plan: (verb, noun, length); gaps of one clip in between.
        # verbs follow the Markov chain; the noun of a segment is the map
        # image of the verb that precedes it, the segment's own verb
        segments: list[tuple[int, int, int]] = []
        used = 0
        prev_verb: int | None = None
        while True:
            length = int(rng.integers(MIN_SEGMENT_CLIPS, MAX_SEGMENT_CLIPS + 1))
            needed = length if not segments else length + 1
            if used + needed > clips_per_video:
                break
            if prev_verb is None:
                verb = int(rng.integers(0, config.k_verb))
            else:
                verb = int(rng.choice(config.k_verb, p=transitions[prev_verb]))
            if config.verb_to_noun is not None:
                noun = config.verb_to_noun[verb]
            else:
                noun = int(rng.integers(0, config.k_noun))
            segments.append((verb, noun, length))
            used += needed
            prev_verb = verb

        n_clips = used
        features = np.zeros((n_clips, config.feature_dim), dtype=np.float64)
        labels: list[ActionLabel | None] = [None] * n_clips

        pos = 0
        for seg_idx, (verb, noun, length) in enumerate(segments):
            if seg_idx > 0:
                # gap clip between the previous segment and this one
                pv, pn, _ = segments[seg_idx - 1]
                mix = config.gap_signal_strength * prototype(verb, noun) + (
                    1.0 - config.gap_signal_strength
                ) * prototype(pv, pn)
                features[pos] = mix + config.noise_scale * rng.normal(
                    size=config.feature_dim
                )
                pos += 1
            start = pos
            label = ActionLabel(verb, noun, config.action_id(verb, noun))
            for _ in range(length):
                features[pos] = prototype(verb, noun) + config.noise_scale * rng.normal(
                    size=config.feature_dim
                )
                labels[pos] = label
                pos += 1
            annotations.append(
                AnnotationRow(
                    segment_id=f"S{segment_counter:06d}",
                    participant_id=participant,
                    video_id=video_id,
                    start_sec=start * task.clip_duration,
                    stop_sec=pos * task.clip_duration,
                    label=label,
                )
            )
            segment_counter += 1

        clips = [
            Clip(
                index=i,
                start_time=i * task.clip_duration,
                duration=task.clip_duration,
                features=features[i].astype(np.float32),
                label=labels[i],
            )
            for i in range(n_clips)
        ]
        timelines.append(
            ClipTimeline(video_id=video_id, clips=clips, feature_dim=config.feature_dim)
        )

    unseen = {
        f"P{PARTICIPANT_POOL - i:02d}" for i in range(UNSEEN_PARTICIPANTS)
    }
    train_videos: list[str] = []
    val_videos: list[str] = []
    seen_count = 0
    for tl in timelines:
        participant = tl.video_id.split("_")[0]
        if participant in unseen:
            val_videos.append(tl.video_id)
        else:
            seen_count += 1
            if seen_count % VAL_VIDEO_PERIOD == 0:
                val_videos.append(tl.video_id)
            else:
                train_videos.append(tl.video_id)

    actions = ActionMapping.full_product(config.k_verb, config.k_noun)

    train_rows = [r for r in annotations if r.video_id in set(train_videos)]
    split = SplitSpec(
        unseen_participants=frozenset(unseen),
        tail_verb_classes=_tail_classes([r.label.verb_id for r in train_rows]),
        tail_noun_classes=_tail_classes([r.label.noun_id for r in train_rows]),
        tail_action_classes=_tail_classes([r.label.action_id for r in train_rows]),
    )

    return SyntheticDataset(
        timelines=timelines,
        task=task,
        annotations=annotations,
        split=split,
        actions=actions,
        train_video_ids=train_videos,
        val_video_ids=val_videos,
    )


def _tail_classes(labels: list[int]) -> frozenset[int]:
    """Smallest classes whose instances cumulatively cover TAIL_FRACTION."""
    if not labels:
        return frozenset()
    counts: dict[int, int] = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    budget = TAIL_FRACTION * len(labels)
    tail: set[int] = set()
    covered = 0
    for cls in sorted(counts, key=lambda c: (counts[c], c)):
        if covered >= budget:
            break
        tail.add(cls)
        covered += counts[cls]
    return frozenset(tail)


def export_dataset(dataset: SyntheticDataset, out_dir: str | Path) -> Path:
    """Write a dataset directory: features, annotations, task, splits, actions."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "splits").mkdir(exist_ok=True)

    for tl in dataset.timelines:
        matrix = np.stack([c.features for c in tl.clips])
        write_features(out / "features" / f"{tl.video_id}.feat", matrix)

    save_annotations(
        out / "annotations_train.csv", dataset.annotations_for(dataset.train_video_ids)
    )
    save_annotations(
        out / "annotations_val.csv", dataset.annotations_for(dataset.val_video_ids)
    )

    task = dataset.task
    task_doc = {
        "k_verb": task.k_verb,
        "k_noun": task.k_noun,
        "k_action": task.k_action,
        "clip_duration": task.clip_duration,
        "anticipation_time": task.anticipation_time,
        "observed_duration": task.observed_duration,
    }
    (out / "task.yaml").write_text(yaml.safe_dump(task_doc, sort_keys=True))

    dataset.actions.save(out / "actions.csv")
    dataset.split.save(out / "splits")
    return out
