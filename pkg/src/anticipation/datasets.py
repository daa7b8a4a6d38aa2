"""Dataset directory loading and instance tensorization for training.

A dataset directory holds per-video feature files, train/val annotation CSVs,
a task.yaml, an actions.csv pair table, and split files. All instances of a
task share one observed length and gap count, so a split tensorizes into
dense arrays indexed by instance.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import yaml

from .data import (
    AnnotationRow,
    AnticipationInstance,
    ClipTimeline,
    TaskConfig,
    build_instances,
    build_timeline,
    full_sequence,
    load_annotations,
    propagate_labels,
    read_features,
)
from .evaluation import ActionMapping, SplitSpec

HEADS = ("verb", "noun", "action")


@dataclass
class DatasetBundle:
    """Everything a training or scoring run needs from a dataset directory."""

    root: Path
    task: TaskConfig
    train_rows: list[AnnotationRow]
    val_rows: list[AnnotationRow]
    timelines: dict[str, ClipTimeline]  # propagated labels
    split: SplitSpec
    actions: ActionMapping

    def rows_for(self, split: str) -> list[AnnotationRow]:
        if split == "train":
            return self.train_rows
        if split == "val":
            return self.val_rows
        raise ValueError(f"unknown split {split!r} (expected train or val)")

    def instances_for(self, split: str) -> list[AnticipationInstance]:
        out: list[AnticipationInstance] = []
        for row in self.rows_for(split):
            timeline = self.timelines.get(row.video_id)
            if timeline is None:
                raise ValueError(f"no feature file for video {row.video_id}")
            out.extend(build_instances(timeline, [row], self.task))
        return out


def load_dataset(root: str | Path) -> DatasetBundle:
    """Read a dataset directory written by export_dataset (or hand-assembled)."""
    root = Path(root)
    doc = yaml.safe_load((root / "task.yaml").read_text())
    task = TaskConfig(
        k_verb=int(doc["k_verb"]),
        k_noun=int(doc["k_noun"]),
        k_action=int(doc["k_action"]),
        clip_duration=float(doc["clip_duration"]),
        anticipation_time=float(doc["anticipation_time"]),
        observed_duration=float(doc["observed_duration"]),
    )
    train_rows = load_annotations(root / "annotations_train.csv", task)
    val_rows = load_annotations(root / "annotations_val.csv", task)
    all_rows = train_rows + val_rows

    timelines: dict[str, ClipTimeline] = {}
    for feat_path in sorted((root / "features").glob("*.feat")):
        video_id = feat_path.stem
        features = read_features(feat_path)
        timeline = build_timeline(video_id, features, all_rows, task)
        if timeline.labeled_indices:
            timeline = propagate_labels(timeline)
        timelines[video_id] = timeline

    split = SplitSpec.load(root / "splits")
    actions = ActionMapping.load(root / "actions.csv")
    return DatasetBundle(
        root=root,
        task=task,
        train_rows=train_rows,
        val_rows=val_rows,
        timelines=timelines,
        split=split,
        actions=actions,
    )


@dataclass
class InstanceTensors:
    """A split's instances as dense tensors (shared observed length and gap)."""

    observed: torch.Tensor  # (n, L_obs, D) float32
    full: torch.Tensor  # (n, L_obs + gap, D) float32
    position_labels: dict[str, torch.Tensor]  # head -> (n, L_obs + gap) int64
    targets: dict[str, torch.Tensor]  # head -> (n,) int64
    segment_ids: list[str]
    participant_ids: list[str]
    gap: int

    def __len__(self) -> int:
        return self.observed.shape[0]

    @property
    def observed_len(self) -> int:
        return self.observed.shape[1]

    def select(self, indices: np.ndarray) -> "InstanceTensors":
        idx = torch.as_tensor(np.asarray(indices), dtype=torch.long)
        return InstanceTensors(
            observed=self.observed[idx],
            full=self.full[idx],
            position_labels={h: t[idx] for h, t in self.position_labels.items()},
            targets={h: t[idx] for h, t in self.targets.items()},
            segment_ids=[self.segment_ids[i] for i in indices],
            participant_ids=[self.participant_ids[i] for i in indices],
            gap=self.gap,
        )


def tensorize_instances(
    instances: list[AnticipationInstance],
    timelines: dict[str, ClipTimeline],
) -> InstanceTensors:
    """Stack a split's instances into dense tensors with per-position labels."""
    if not instances:
        raise ValueError("no instances to tensorize")
    gap = instances[0].gap_positions
    observed_list, full_list = [], []
    pos_labels = {h: [] for h in HEADS}
    targets = {h: [] for h in HEADS}
    segment_ids, participant_ids = [], []
    for inst in instances:
        if inst.gap_positions != gap:
            raise ValueError("instances disagree on gap count")
        timeline = timelines[inst.video_id]
        features, labels = full_sequence(inst, timeline)
        full_list.append(features)
        observed_list.append(features[: len(inst.observed)])
        pos_labels["verb"].append([lab.verb_id for lab in labels])
        pos_labels["noun"].append([lab.noun_id for lab in labels])
        pos_labels["action"].append([lab.action_id for lab in labels])
        targets["verb"].append(inst.target.verb_id)
        targets["noun"].append(inst.target.noun_id)
        targets["action"].append(inst.target.action_id)
        segment_ids.append(inst.segment_id)
        participant_ids.append(inst.participant_id)
    return InstanceTensors(
        observed=torch.from_numpy(np.stack(observed_list)).float(),
        full=torch.from_numpy(np.stack(full_list)).float(),
        position_labels={
            h: torch.tensor(v, dtype=torch.long) for h, v in pos_labels.items()
        },
        targets={h: torch.tensor(v, dtype=torch.long) for h, v in targets.items()},
        segment_ids=segment_ids,
        participant_ids=participant_ids,
        gap=gap,
    )


def split_tensors(bundle: DatasetBundle, split: str) -> InstanceTensors:
    return tensorize_instances(bundle.instances_for(split), bundle.timelines)
