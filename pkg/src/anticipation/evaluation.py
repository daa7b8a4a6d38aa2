"""Class-mean top-5 recall, action-score composition, and soft-label ensembling.

Scores travel in ScoreFile objects with a canonical text serialization: one
record per segment (sorted by segment id) holding each head's probability
vector at 9 significant digits. Ensembling averages probabilities entrywise,
with addends sorted before summation so the result is bit-identical under any
input-file permutation.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TOP_K = 5
HEADS = ("verb", "noun", "action")


class ScoreFileError(ValueError):
    """Malformed score file or incompatible files for ensembling."""


class EvaluationError(ValueError):
    """Inconsistent labels, splits, or score data during evaluation."""


def top_k_hits(predictions: np.ndarray, labels: np.ndarray, k: int = TOP_K) -> np.ndarray:
    """Boolean per-instance membership of the true class in the top-k scores.

    Ties are broken toward the lower class index: a stable sort on negated
    scores keeps equal-scoring classes in ascending index order.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.ndim != 2:
        raise ValueError("predictions must be (instances, classes)")
    if labels.shape != (predictions.shape[0],):
        raise ValueError("labels must be one class id per instance")
    if labels.size and (labels.min() < 0 or labels.max() >= predictions.shape[1]):
        raise ValueError("label id outside prediction width")
    top = np.argsort(-predictions, axis=1, kind="stable")[:, :k]
    return (top == labels[:, None]).any(axis=1)


def mean_top5_recall(
    predictions: np.ndarray,
    labels: np.ndarray,
    class_filter: set[int] | frozenset[int] | None = None,
    k: int = TOP_K,
) -> tuple[float, dict[int, tuple[float, int]]]:
    """Unweighted class-mean top-k recall in percent.

    Per class (restricted to `class_filter` when given, and always to classes
    with at least one ground-truth instance), recall is the fraction of that
    class's instances whose top-k scores include it. Returns the mean over
    included classes and a per-class table {class_id: (recall_percent, n)}.
    Filter classes absent from the ground truth are excluded with a warning.
    """
    labels = np.asarray(labels)
    hits = top_k_hits(predictions, labels, k=k)
    present = set(int(c) for c in np.unique(labels))
    if class_filter is not None:
        missing = set(class_filter) - present
        if missing:
            warnings.warn(
                f"class filter names {len(missing)} class(es) with no ground-truth "
                f"instances; excluded from the mean",
                stacklevel=2,
            )
        included = sorted(present & set(class_filter))
    else:
        included = sorted(present)
    per_class: dict[int, tuple[float, int]] = {}
    for cls in included:
        mask = labels == cls
        recall = 100.0 * float(hits[mask].mean())
        per_class[cls] = (recall, int(mask.sum()))
    if not per_class:
        return float("nan"), per_class
    mean = float(np.mean([r for r, _ in per_class.values()]))
    return mean, per_class


@dataclass(frozen=True)
class ActionMapping:
    """Bijection between action ids and (verb, noun) pairs."""

    verb_ids: np.ndarray  # (k_action,) verb id of each action
    noun_ids: np.ndarray  # (k_action,) noun id of each action

    def __post_init__(self) -> None:
        if self.verb_ids.shape != self.noun_ids.shape or self.verb_ids.ndim != 1:
            raise ValueError("verb_ids and noun_ids must be parallel 1-D arrays")

    @property
    def k_action(self) -> int:
        return len(self.verb_ids)

    @classmethod
    def from_pairs(cls, pairs: dict[tuple[int, int], int]) -> "ActionMapping":
        """Build from a {(verb, noun): action_id} map covering 0..K_a-1 once."""
        k = len(pairs)
        seen: set[int] = set()
        verb_ids = np.zeros(k, dtype=np.int64)
        noun_ids = np.zeros(k, dtype=np.int64)
        for (v, n), a in pairs.items():
            if a in seen:
                raise ValueError(f"duplicate action id {a} in pair map")
            if not 0 <= a < k:
                raise ValueError(f"action id {a} outside [0, {k})")
            seen.add(a)
            verb_ids[a] = v
            noun_ids[a] = n
        return cls(verb_ids=verb_ids, noun_ids=noun_ids)

    @classmethod
    def full_product(cls, k_verb: int, k_noun: int) -> "ActionMapping":
        """action_id = verb_id * k_noun + noun_id over the full cross product."""
        verbs = np.repeat(np.arange(k_verb), k_noun)
        nouns = np.tile(np.arange(k_noun), k_verb)
        return cls(verb_ids=verbs, noun_ids=nouns)

    def pair_of(self, action_id: int) -> tuple[int, int]:
        return int(self.verb_ids[action_id]), int(self.noun_ids[action_id])

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["action_id", "verb_id", "noun_id"])
            for a in range(self.k_action):
                writer.writerow([a, int(self.verb_ids[a]), int(self.noun_ids[a])])

    @classmethod
    def load(cls, path: str | Path) -> "ActionMapping":
        pairs: dict[tuple[int, int], int] = {}
        with Path(path).open(newline="") as handle:
            for row in csv.DictReader(handle):
                pairs[(int(row["verb_id"]), int(row["noun_id"]))] = int(row["action_id"])
        return cls.from_pairs(pairs)


def compose_action_scores(
    verb_probs: np.ndarray, noun_probs: np.ndarray, actions: ActionMapping
) -> np.ndarray:
    """Action scores as normalized products of verb and noun probabilities.

    score(a) = verb[v(a)] * noun[n(a)], renormalized over the valid actions.
    Accepts single vectors or (instances, classes) batches. If every product
    is zero for an instance, the result falls back to uniform.
    """
    verb_arr = np.asarray(verb_probs, dtype=np.float64)
    single = verb_arr.ndim == 1
    verb_arr = np.atleast_2d(verb_arr)
    noun_arr = np.atleast_2d(np.asarray(noun_probs, dtype=np.float64))
    scores = verb_arr[:, actions.verb_ids] * noun_arr[:, actions.noun_ids]
    totals = scores.sum(axis=1, keepdims=True)
    safe = np.where(totals > 0, totals, 1.0)
    out = np.where(totals > 0, scores / safe, 1.0 / actions.k_action)
    return out[0] if single else out


@dataclass
class ScoreFile:
    """Per-segment probability vectors for each task head."""

    segment_ids: list[str]
    verb: np.ndarray  # (n_segments, k_verb)
    noun: np.ndarray  # (n_segments, k_noun)
    action: np.ndarray | None = None
    model_tag: str = "model"

    def __post_init__(self) -> None:
        n = len(self.segment_ids)
        if self.verb.shape[0] != n or self.noun.shape[0] != n:
            raise ScoreFileError("head row count does not match segment count")
        if self.action is not None and self.action.shape[0] != n:
            raise ScoreFileError("action row count does not match segment count")
        if len(set(self.segment_ids)) != n:
            raise ScoreFileError("duplicate segment ids")

    def head(self, name: str) -> np.ndarray | None:
        return {"verb": self.verb, "noun": self.noun, "action": self.action}[name]

    def validate(self, atol: float = 1e-5) -> None:
        for name in HEADS:
            probs = self.head(name)
            if probs is None:
                continue
            if (probs < 0).any():
                raise ScoreFileError(f"{name} probabilities contain negatives")
            sums = probs.sum(axis=1)
            if not np.allclose(sums, 1.0, atol=atol):
                worst = float(np.abs(sums - 1.0).max())
                raise ScoreFileError(
                    f"{name} probabilities deviate from the simplex by {worst:.2e}"
                )

    def sorted_by_segment(self) -> "ScoreFile":
        order = np.argsort(np.asarray(self.segment_ids, dtype=object), kind="stable")
        return ScoreFile(
            segment_ids=[self.segment_ids[i] for i in order],
            verb=self.verb[order],
            noun=self.noun[order],
            action=None if self.action is None else self.action[order],
            model_tag=self.model_tag,
        )

    def save(self, path: str | Path) -> None:
        """Canonical text form: records sorted by segment id, 9 significant digits."""
        ordered = self.sorted_by_segment()
        lines = ["scorefile 1", f"tag {self.model_tag}"]
        widths = [f"verb={ordered.verb.shape[1]}", f"noun={ordered.noun.shape[1]}"]
        if ordered.action is not None:
            widths.append(f"action={ordered.action.shape[1]}")
        lines.append("heads " + " ".join(widths))
        for i, seg in enumerate(ordered.segment_ids):
            fields = [seg, _fmt_row(ordered.verb[i]), _fmt_row(ordered.noun[i])]
            if ordered.action is not None:
                fields.append(_fmt_row(ordered.action[i]))
            lines.append("\t".join(fields))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ScoreFile":
        text = Path(path).read_text().splitlines()
        if len(text) < 3 or text[0] != "scorefile 1":
            raise ScoreFileError(f"{path}: not a scorefile (bad or missing header)")
        tag = text[1].removeprefix("tag ").strip()
        head_spec = dict(
            part.split("=") for part in text[2].removeprefix("heads ").split()
        )
        has_action = "action" in head_spec
        segment_ids: list[str] = []
        verb_rows, noun_rows, action_rows = [], [], []
        for line_no, line in enumerate(text[3:], start=4):
            if not line.strip():
                continue
            fields = line.split("\t")
            expected = 4 if has_action else 3
            if len(fields) != expected:
                raise ScoreFileError(f"{path}: line {line_no}: expected {expected} fields")
            segment_ids.append(fields[0])
            verb_rows.append(_parse_row(fields[1], int(head_spec["verb"]), path, line_no))
            noun_rows.append(_parse_row(fields[2], int(head_spec["noun"]), path, line_no))
            if has_action:
                action_rows.append(
                    _parse_row(fields[3], int(head_spec["action"]), path, line_no)
                )
        out = cls(
            segment_ids=segment_ids,
            verb=np.array(verb_rows, dtype=np.float64),
            noun=np.array(noun_rows, dtype=np.float64),
            action=np.array(action_rows, dtype=np.float64) if has_action else None,
            model_tag=tag,
        )
        out.validate()
        return out


def _fmt_row(row: np.ndarray) -> str:
    return " ".join(f"{x:.9g}" for x in row)


def _parse_row(text: str, width: int, path, line_no: int) -> list[float]:
    values = [float(tok) for tok in text.split()]
    if len(values) != width:
        raise ScoreFileError(
            f"{path}: line {line_no}: expected {width} probabilities, got {len(values)}"
        )
    return values


def ensemble(files: list[ScoreFile]) -> ScoreFile:
    """Entrywise mean of per-class probabilities across models.

    Segment sets must match exactly. Addends are sorted per entry before
    summation, so the output is independent of input-file order; the output
    tag is the sorted unique set of input tags.
    """
    if not files:
        raise ScoreFileError("ensemble requires at least one score file")
    base = files[0].sorted_by_segment()
    base_ids = base.segment_ids
    base_set = set(base_ids)
    aligned = [base]
    for f in files[1:]:
        other = f.sorted_by_segment()
        if set(other.segment_ids) != base_set:
            offending = sorted(set(other.segment_ids) ^ base_set)
            raise ScoreFileError(
                f"segment sets differ between score files: {offending[:10]}"
            )
        aligned.append(other)
    for f in aligned[1:]:
        if f.verb.shape != base.verb.shape or f.noun.shape != base.noun.shape:
            raise ScoreFileError("head widths differ between score files")
        if (f.action is None) != (base.action is None):
            raise ScoreFileError("some score files have an action head, others do not")
        if f.action is not None and f.action.shape != base.action.shape:
            raise ScoreFileError("action widths differ between score files")

    def average(name: str) -> np.ndarray | None:
        stacks = [f.head(name) for f in aligned]
        if stacks[0] is None:
            return None
        stacked = np.stack(stacks)  # (n_files, n_segments, k)
        stacked = np.sort(stacked, axis=0)  # order-independent summation
        return stacked.sum(axis=0) / len(aligned)

    tags = sorted(set(f.model_tag for f in files))
    return ScoreFile(
        segment_ids=list(base_ids),
        verb=average("verb"),
        noun=average("noun"),
        action=average("action"),
        model_tag="+".join(tags),
    )


@dataclass(frozen=True)
class SplitSpec:
    """Evaluation split membership: unseen participants and tail classes."""

    unseen_participants: frozenset[str] = frozenset()
    tail_verb_classes: frozenset[int] = frozenset()
    tail_noun_classes: frozenset[int] = frozenset()
    tail_action_classes: frozenset[int] = frozenset()

    def tail_for(self, head: str) -> frozenset[int]:
        return {
            "verb": self.tail_verb_classes,
            "noun": self.tail_noun_classes,
            "action": self.tail_action_classes,
        }[head]

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        participants = "\n".join(sorted(self.unseen_participants))
        (directory / "unseen_participants.txt").write_text(
            participants + "\n" if participants else ""
        )
        lines = []
        for head in HEADS:
            for cls in sorted(self.tail_for(head)):
                lines.append(f"{head} {cls}")
        (directory / "tail_classes.txt").write_text(
            "\n".join(lines) + "\n" if lines else ""
        )

    @classmethod
    def load(cls, directory: str | Path) -> "SplitSpec":
        directory = Path(directory)
        participants: frozenset[str] = frozenset()
        p_file = directory / "unseen_participants.txt"
        if p_file.exists():
            participants = frozenset(
                line.strip() for line in p_file.read_text().splitlines() if line.strip()
            )
        tails: dict[str, set[int]] = {h: set() for h in HEADS}
        t_file = directory / "tail_classes.txt"
        if t_file.exists():
            for line in t_file.read_text().splitlines():
                if not line.strip():
                    continue
                head, class_id = line.split()
                if head not in tails:
                    raise EvaluationError(f"unknown head {head!r} in tail class file")
                tails[head].add(int(class_id))
        return cls(
            unseen_participants=participants,
            tail_verb_classes=frozenset(tails["verb"]),
            tail_noun_classes=frozenset(tails["noun"]),
            tail_action_classes=frozenset(tails["action"]),
        )


@dataclass(frozen=True)
class SegmentTruth:
    """Ground truth for one evaluation segment."""

    verb_id: int
    noun_id: int
    action_id: int
    participant_id: str

    def for_head(self, head: str) -> int:
        return {
            "verb": self.verb_id,
            "noun": self.noun_id,
            "action": self.action_id,
        }[head]


def ground_truth_from_annotations(rows) -> dict[str, SegmentTruth]:
    return {
        r.segment_id: SegmentTruth(
            verb_id=r.label.verb_id,
            noun_id=r.label.noun_id,
            action_id=r.label.action_id,
            participant_id=r.participant_id,
        )
        for r in rows
    }


@dataclass
class HeadResult:
    """Recall summary for one (split, head) cell."""

    mean_recall: float
    per_class: dict[int, tuple[float, int]]
    n_instances: int
    n_classes: int


@dataclass
class RecallReport:
    """Class-mean top-5 recall across overall / unseen / tail splits."""

    results: dict[str, dict[str, HeadResult]]  # split -> head -> result

    def mean(self, split: str, head: str) -> float | None:
        head_result = self.results.get(split, {}).get(head)
        return None if head_result is None else head_result.mean_recall

    def to_table(self) -> str:
        heads = [h for h in HEADS if any(h in r for r in self.results.values())]
        header = ["split".ljust(10)] + [h.capitalize().rjust(8) for h in heads]
        lines = ["  ".join(header)]
        for split in ("overall", "unseen", "tail"):
            if split not in self.results:
                continue
            cells = [split.ljust(10)]
            for head in heads:
                result = self.results[split].get(head)
                cells.append(
                    "-".rjust(8) if result is None else f"{result.mean_recall:8.2f}"
                )
            lines.append("  ".join(cells))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        doc: dict = {}
        for split, by_head in self.results.items():
            doc[split] = {}
            for head, result in by_head.items():
                doc[split][head] = {
                    "mean_top5_recall": result.mean_recall,
                    "n_instances": result.n_instances,
                    "n_classes": result.n_classes,
                    "per_class": {
                        str(cls): {"recall": rec, "n": n}
                        for cls, (rec, n) in sorted(result.per_class.items())
                    },
                }
        return doc


def evaluate(
    scores: ScoreFile,
    labels: dict[str, SegmentTruth],
    split: SplitSpec,
    actions: ActionMapping | None = None,
) -> RecallReport:
    """Mean top-5 recall per head over overall, unseen, and tail splits.

    Action scores come from the file's action head when present, otherwise
    they are composed from verb and noun probabilities via `actions`.
    """
    missing = [s for s in scores.segment_ids if s not in labels]
    if missing:
        raise EvaluationError(f"segments without ground truth: {missing[:10]}")
    truth = [labels[s] for s in scores.segment_ids]

    head_probs: dict[str, np.ndarray] = {"verb": scores.verb, "noun": scores.noun}
    if scores.action is not None:
        head_probs["action"] = scores.action
    elif actions is not None:
        head_probs["action"] = np.atleast_2d(
            compose_action_scores(scores.verb, scores.noun, actions)
        )

    head_labels = {
        head: np.array([t.for_head(head) for t in truth], dtype=np.int64)
        for head in head_probs
    }
    unseen_mask = np.array(
        [t.participant_id in split.unseen_participants for t in truth], dtype=bool
    )

    results: dict[str, dict[str, HeadResult]] = {"overall": {}}
    for head, probs in head_probs.items():
        mean, per_class = mean_top5_recall(probs, head_labels[head])
        results["overall"][head] = HeadResult(
            mean, per_class, len(truth), len(per_class)
        )

    if split.unseen_participants and unseen_mask.any():
        results["unseen"] = {}
        for head, probs in head_probs.items():
            mean, per_class = mean_top5_recall(
                probs[unseen_mask], head_labels[head][unseen_mask]
            )
            results["unseen"][head] = HeadResult(
                mean, per_class, int(unseen_mask.sum()), len(per_class)
            )

    tail_results: dict[str, HeadResult] = {}
    for head, probs in head_probs.items():
        tail_classes = split.tail_for(head)
        if not tail_classes:
            continue
        mean, per_class = mean_top5_recall(
            probs, head_labels[head], class_filter=set(tail_classes)
        )
        if per_class:
            n_tail = int(np.isin(head_labels[head], list(tail_classes)).sum())
            tail_results[head] = HeadResult(mean, per_class, n_tail, len(per_class))
    if tail_results:
        results["tail"] = tail_results

    return RecallReport(results=results)
