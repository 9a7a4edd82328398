"""Core vocabulary for cognitive chains.

A chain is the unit Situation => Clue => Thought => (Action + Emotion).
Polarity is anchored to the thought node and propagated to the clue, the
action, and the emotion; emotions come from a closed set of six categories,
three per polarity.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .errors import UnknownEmotion


class Polarity(Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"

    def __str__(self) -> str:
        return self.value


class EmotionCategory(Enum):
    LOVE = "Love"
    SURPRISE = "Surprise"
    JOYFUL = "Joyful"
    SAD = "Sad"
    ANGRY = "Angry"
    FEARFUL = "Fearful"

    def __str__(self) -> str:
        return self.value


#: the three emotion labels legal under each polarity, in canonical order
POSITIVE_EMOTIONS = (EmotionCategory.LOVE, EmotionCategory.SURPRISE, EmotionCategory.JOYFUL)
NEGATIVE_EMOTIONS = (EmotionCategory.SAD, EmotionCategory.ANGRY, EmotionCategory.FEARFUL)


class Topic(Enum):
    SCHOOL = "School"
    WORK = "Work"
    TOURISM = "Tourism"
    RELATIONSHIP = "Relationship"
    ORDINARY_LIFE = "Ordinary Life"

    def __str__(self) -> str:
        return self.value


class NodeKind(Enum):
    SITUATION = "Situation"
    CLUE = "Clue"
    THOUGHT = "Thought"
    ACTION = "Action"
    EMOTION = "Emotion"

    def __str__(self) -> str:
        return self.value


class NodeStatus(Enum):
    RAW = "Raw"
    ACCEPTED = "Accepted"
    REVISED = "Revised"
    REJECTED = "Rejected"
    FLAGGED = "Flagged"


class NodeSource(Enum):
    LLM_GENERATED = "LlmGenerated"
    HUMAN_REVISED = "HumanRevised"


#: statuses that survive curation into the final graph
FINAL_STATUSES = frozenset({NodeStatus.ACCEPTED, NodeStatus.REVISED})


def polarity_of_emotion(emotion: EmotionCategory) -> Polarity:
    """Map an emotion category to the polarity of chains it may appear in."""
    if emotion in POSITIVE_EMOTIONS:
        return Polarity.POSITIVE
    return Polarity.NEGATIVE


def emotions_for_polarity(polarity: Polarity) -> tuple[EmotionCategory, ...]:
    return POSITIVE_EMOTIONS if polarity is Polarity.POSITIVE else NEGATIVE_EMOTIONS


# prompt templates answer "Surprised" while the category is "Surprise"
_EMOTION_ALIASES = {"surprised": EmotionCategory.SURPRISE}


def normalize_emotion(text: str) -> EmotionCategory:
    """Resolve free text to a canonical emotion category.

    Matching is case-insensitive and whitespace/punctuation-trimmed;
    "surprised" resolves to Surprise. Raises UnknownEmotion otherwise.
    """
    key = text.strip().strip(".!,:;\"'").strip().casefold()
    if key in _EMOTION_ALIASES:
        return _EMOTION_ALIASES[key]
    for category in EmotionCategory:
        if key == category.value.casefold():
            return category
    raise UnknownEmotion(f"not an emotion category: {text!r}")


def dedup_key(text: str) -> str:
    """Normalization used for node identity: trim, collapse whitespace, casefold.

    Applied only to build dedup keys; stored text is never mutated.
    """
    return re.sub(r"\s+", " ", text.strip()).casefold()


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    text: str
    polarity: Optional[Polarity] = None
    topic: Optional[Topic] = None
    status: NodeStatus = NodeStatus.RAW
    source: NodeSource = NodeSource.LLM_GENERATED

    def check(self) -> list[tuple[str, str]]:
        """Return (rule, message) pairs for every violated node invariant."""
        violations = []
        if not self.text or not self.text.strip():
            violations.append(("empty-text", f"node {self.id} has empty text"))
        if self.kind is NodeKind.SITUATION:
            if self.polarity is not None:
                violations.append(("situation-polarity", f"situation {self.id} must not carry a polarity"))
            if self.topic is None:
                violations.append(("situation-topic", f"situation {self.id} must carry a topic"))
        else:
            if self.polarity is None:
                violations.append(("missing-polarity", f"{self.kind.value.lower()} {self.id} must carry a polarity"))
            if self.topic is not None:
                violations.append(("unexpected-topic", f"{self.kind.value.lower()} {self.id} must not carry a topic"))
        if self.kind is NodeKind.EMOTION:
            try:
                category = normalize_emotion(self.text)
            except UnknownEmotion:
                violations.append(("emotion-text", f"emotion {self.id} text {self.text!r} is not a category"))
            else:
                if self.polarity is not None and polarity_of_emotion(category) is not self.polarity:
                    violations.append((
                        "emotion-polarity-mismatch",
                        f"emotion {self.id} label {category.value} conflicts with polarity {self.polarity.value}",
                    ))
        return violations


@dataclass(frozen=True)
class CognitiveChain:
    chain_id: str
    situation: str
    clue: str
    thought: str
    action: str
    emotion: EmotionCategory
    polarity: Polarity

    def node_refs(self) -> tuple[tuple[str, NodeKind], ...]:
        return (
            (self.situation, NodeKind.SITUATION),
            (self.clue, NodeKind.CLUE),
            (self.thought, NodeKind.THOUGHT),
            (self.action, NodeKind.ACTION),
        )


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[tuple[str, str], ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_chain(chain: CognitiveChain, resolve: Callable[[str], Optional[Node]]) -> ValidationReport:
    """Check every chain invariant against a node lookup function.

    Malformed chains produce a failing report rather than an exception;
    `resolve` returning None for an id is recorded as a violation.
    """
    violations: list[tuple[str, str]] = []
    nodes: dict[str, Optional[Node]] = {}
    for node_id, expected_kind in chain.node_refs():
        node = resolve(node_id)
        nodes[node_id] = node
        if node is None:
            violations.append(("unresolved-reference", f"chain {chain.chain_id}: no node {node_id}"))
        elif node.kind is not expected_kind:
            violations.append((
                "kind-mismatch",
                f"chain {chain.chain_id}: {node_id} is a {node.kind.value}, expected {expected_kind.value}",
            ))

    thought = nodes.get(chain.thought)
    if thought is not None and thought.kind is NodeKind.THOUGHT and thought.polarity is not None:
        if thought.polarity is not chain.polarity:
            violations.append((
                "thought-polarity-mismatch",
                f"chain {chain.chain_id}: chain is {chain.polarity.value} but thought is {thought.polarity.value}",
            ))
    for ref, rule in ((chain.clue, "clue-polarity-mismatch"), (chain.action, "action-polarity-mismatch")):
        node = nodes.get(ref)
        if node is not None and node.kind in (NodeKind.CLUE, NodeKind.ACTION) and node.polarity is not None:
            if node.polarity is not chain.polarity:
                violations.append((rule, f"chain {chain.chain_id}: {ref} polarity {node.polarity.value} != chain {chain.polarity.value}"))

    if polarity_of_emotion(chain.emotion) is not chain.polarity:
        violations.append((
            "emotion-polarity-mismatch",
            f"chain {chain.chain_id}: emotion {chain.emotion.value} cannot appear in a {chain.polarity.value.lower()} chain",
        ))
    return ValidationReport(tuple(violations))
