"""Turn a finalized graph into supervised datasets for the four tasks.

Each chain contributes one potential sample per task; identical
(input, target) pairs from different chains collapse to one. Splitting
is by situation so validation always probes unseen situations.
"""

from __future__ import annotations

import enum
import json
import math
import os
import random
from dataclasses import dataclass
from typing import Mapping, Sequence

from .chain_model import FINAL_STATUSES, Polarity
from .errors import DomainError, EmptyList, TooFewSituations, UnfinalizedGraph
from .graph_store import Graph


class TaskKind(str, enum.Enum):
    CLUE_GEN = "ClueGen"
    THOUGHT_GEN = "ThoughtGen"
    ACTION_GEN = "ActionGen"
    EMOTION_CLS = "EmotionCls"


_TARGET_OF = {
    TaskKind.CLUE_GEN: "clue",
    TaskKind.THOUGHT_GEN: "thought",
    TaskKind.ACTION_GEN: "action",
    TaskKind.EMOTION_CLS: "emotion",
}


@dataclass(frozen=True)
class TaskSample:
    task: TaskKind
    polarity: Polarity
    situation_id: str
    fields: Mapping[str, str]
    target: str
    token_index: int

    def __post_init__(self):
        if self.token_index not in (1, 2, 3):
            raise DomainError(f"token_index must be 1..3, got {self.token_index}")


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[TaskSample, ...]
    validation: tuple[TaskSample, ...]
    seed: int
    ratio: float
    train_situations: tuple[str, ...]
    validation_situations: tuple[str, ...]


def _require_finalized(graph: Graph) -> None:
    for node in graph.nodes.values():
        if node.status not in FINAL_STATUSES:
            raise UnfinalizedGraph(
                f"node {node.id} is {node.status.value}; curation must finish first")


def _chain_fields(graph: Graph, chain, task: TaskKind) -> tuple[dict, str]:
    text = {role: graph.nodes[getattr(chain, role)].text
            for role in ("situation", "clue", "thought", "action")}
    if task is TaskKind.CLUE_GEN:
        return {"situation": text["situation"]}, text["clue"]
    if task is TaskKind.THOUGHT_GEN:
        return {"situation": text["situation"], "clue": text["clue"]}, text["thought"]
    if task is TaskKind.ACTION_GEN:
        return {"situation": text["situation"], "thought": text["thought"]}, text["action"]
    return {"situation": text["situation"], "thought": text["thought"]}, chain.emotion.value


def derive_samples(graph: Graph, task: TaskKind) -> list[TaskSample]:
    """One deduplicated sample per task-specific tuple, in chain-id order.

    Token indices cycle 1, 2, 3 over the deduplicated ordinals.
    """
    task = TaskKind(task)
    _require_finalized(graph)
    seen: set[tuple] = set()
    raw: list[tuple[Polarity, str, dict, str]] = []
    for chain_id in sorted(graph.chains):
        chain = graph.chains[chain_id]
        fields, target = _chain_fields(graph, chain, task)
        key = (chain.polarity, tuple(sorted(fields.items())), target)
        if key in seen:
            continue
        seen.add(key)
        raw.append((chain.polarity, chain.situation, fields, target))
    return [TaskSample(task=task, polarity=polarity, situation_id=situation_id,
                       fields=fields, target=target, token_index=ordinal % 3 + 1)
            for ordinal, (polarity, situation_id, fields, target) in enumerate(raw)]


def derive_all(graph: Graph) -> dict[TaskKind, list[TaskSample]]:
    return {task: derive_samples(graph, task) for task in TaskKind}


def split_by_situation(samples: Sequence[TaskSample], ratio: float = 0.9,
                       seed: int = 0) -> DatasetSplit:
    """Partition samples by a seeded shuffle of their situation ids.

    floor(ratio * N) situations go to train, clamped so both sides keep
    at least one situation.
    """
    if not 0 < ratio < 1:
        raise DomainError(f"ratio must be strictly between 0 and 1, got {ratio}")
    situation_ids = sorted({sample.situation_id for sample in samples})
    if len(situation_ids) < 2:
        raise TooFewSituations(
            f"need at least 2 situations to split, have {len(situation_ids)}")
    rng = random.Random(seed)
    rng.shuffle(situation_ids)
    n_train = math.floor(ratio * len(situation_ids))
    n_train = max(1, min(len(situation_ids) - 1, n_train))
    train_ids = set(situation_ids[:n_train])
    train = tuple(s for s in samples if s.situation_id in train_ids)
    validation = tuple(s for s in samples if s.situation_id not in train_ids)
    return DatasetSplit(
        train=train, validation=validation, seed=seed, ratio=ratio,
        train_situations=tuple(sorted(train_ids)),
        validation_situations=tuple(sorted(set(situation_ids) - train_ids)))


def _round_robin(samples: Sequence[TaskSample]) -> list[TaskSample]:
    lanes = {task: [s for s in samples if s.task is task] for task in TaskKind}
    ordered: list[TaskSample] = []
    depth = max((len(lane) for lane in lanes.values()), default=0)
    for i in range(depth):
        for task in TaskKind:
            if i < len(lanes[task]):
                ordered.append(lanes[task][i])
    return ordered


def export_training_file(split: DatasetSplit, path: str,
                         part: str = "train") -> int:
    """Write one split part as control-token JSONL, tasks interleaved
    round-robin. Returns the number of lines written."""
    from .prompt_builder import encode_training_sample  # import cycle with TaskKind

    if part not in ("train", "validation"):
        raise DomainError(f"part must be train or validation, got {part!r}")
    samples = split.train if part == "train" else split.validation
    if not samples:
        raise EmptyList(f"split has no {part} samples")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sample in _round_robin(samples):
            fields = dict(sample.fields)
            fields[_TARGET_OF[sample.task]] = sample.target
            encoded = encode_training_sample(sample.task, sample.polarity,
                                             fields, sample.token_index)
            fh.write(json.dumps({"task": sample.task.value,
                                 "polarity": sample.polarity.value,
                                 "input": encoded.input_text,
                                 "target": encoded.target_text},
                                ensure_ascii=False) + "\n")
    return len(samples)


def export_manifest(split: DatasetSplit, path: str) -> None:
    """Record everything needed to reproduce the split exactly."""
    payload = {
        "seed": split.seed,
        "ratio": split.ratio,
        "train_situations": list(split.train_situations),
        "validation_situations": list(split.validation_situations),
        "counts": {
            "train": len(split.train),
            "validation": len(split.validation),
        },
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_split(split: DatasetSplit, out_dir: str) -> dict[str, int]:
    """Write train.jsonl, validation.jsonl, and manifest.json under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    counts = {}
    counts["train"] = export_training_file(
        split, os.path.join(out_dir, "train.jsonl"), part="train")
    counts["validation"] = export_training_file(
        split, os.path.join(out_dir, "validation.jsonl"), part="validation")
    export_manifest(split, os.path.join(out_dir, "manifest.json"))
    return counts
