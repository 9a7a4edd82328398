"""Produce cognitive chains for new situations.

Two paths: if the graph already holds a sufficiently similar situation,
its stored chains are returned as-is (Linked); otherwise the four
generation stages run against a backend, each stage feeding the next
(Generated). Raw language models get the two-line zero-shot prompts,
finetuned multi-task models get control-token inputs, chosen by the
backend's capability flag.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from typing import Mapping, Optional

from . import llm_backend, prompt_builder
from .chain_model import (
    CognitiveChain,
    EmotionCategory,
    Node,
    NodeKind,
    NodeSource,
    NodeStatus,
    Polarity,
    emotions_for_polarity,
    normalize_emotion,
    polarity_of_emotion,
    validate_chain,
)
from .errors import (
    DomainError,
    EmotionUnresolvable,
    EmptyGraph,
    EmptyInput,
    StageFailure,
    TomforgeError,
    UnknownEmotion,
)
from .graph_store import Graph
from .task_builder import TaskKind


class EmotionMode(str, enum.Enum):
    CONSTRAINED_CHOICE = "ConstrainedChoice"
    NEAREST_LABEL = "NearestLabel"


class ChainMode(str, enum.Enum):
    LINKED = "Linked"
    GENERATED = "Generated"


@dataclass(frozen=True)
class InferenceConfig:
    similarity_threshold: float = 0.35
    emotion_mode: EmotionMode = EmotionMode.CONSTRAINED_CHOICE
    token_index: int = 1
    chains_per_polarity: int = 1

    def __post_init__(self):
        if not 0.0 <= self.similarity_threshold <= 1.0:
            raise DomainError("similarity_threshold must be within [0, 1]")
        if self.token_index not in (1, 2, 3):
            raise DomainError("token_index must be 1, 2, or 3")
        if self.chains_per_polarity < 1:
            raise DomainError("chains_per_polarity must be >= 1")
        object.__setattr__(self, "emotion_mode", EmotionMode(self.emotion_mode))


@dataclass(frozen=True)
class StageRecord:
    stage: str
    prompt_sha256: str
    backend: str


@dataclass(frozen=True)
class InferredChain:
    chain: CognitiveChain
    nodes: Mapping[str, Node]
    mode: ChainMode
    provenance: tuple[StageRecord, ...] = ()
    matched_situation: Optional[str] = None
    similarity: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "polarity": self.chain.polarity.value,
            "emotion": self.chain.emotion.value,
            "situation": self.nodes[self.chain.situation].text,
            "clue": self.nodes[self.chain.clue].text,
            "thought": self.nodes[self.chain.thought].text,
            "action": self.nodes[self.chain.action].text,
            "matched_situation": self.matched_situation,
            "similarity": self.similarity,
            "provenance": [{"stage": p.stage, "prompt_sha256": p.prompt_sha256,
                            "backend": p.backend} for p in self.provenance],
        }


def _stage_prompt(task: TaskKind, polarity: Polarity, fields: Mapping[str, str],
                  backend, config: InferenceConfig) -> str:
    if getattr(backend, "supports_control_tokens", False):
        return prompt_builder.build_encoded_input(task, polarity, fields,
                                                  config.token_index)
    return prompt_builder.build_test_prompt(task, polarity, fields)


def _run_stage(stage: str, task: TaskKind, polarity: Polarity,
               fields: Mapping[str, str], backend,
               config: InferenceConfig) -> tuple[str, StageRecord]:
    prompt = _stage_prompt(task, polarity, fields, backend, config)
    request = llm_backend.GenerationRequest(prompt=prompt,
                                            params=llm_backend.GenerationParams())
    try:
        result = backend.generate(request)
    except TomforgeError as exc:
        raise StageFailure(stage, exc) from exc
    record = StageRecord(stage=stage,
                         prompt_sha256=hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
                         backend=result.backend)
    return result.completions[0], record


def _resolve_emotion(answer: str, polarity: Polarity,
                     mode: EmotionMode) -> EmotionCategory:
    """Coerce a raw completion onto the polarity's three-label set."""
    legal = emotions_for_polarity(polarity)
    if mode is EmotionMode.CONSTRAINED_CHOICE:
        try:
            category = normalize_emotion(answer)
        except UnknownEmotion:
            raise EmotionUnresolvable(
                f"{answer!r} is not an emotion label") from None
        if polarity_of_emotion(category) is not polarity:
            raise EmotionUnresolvable(
                f"{category.value} is outside the {polarity.value} choice set")
        return category
    lowered = answer.casefold()
    best: Optional[tuple[int, int, EmotionCategory]] = None
    for rank, category in enumerate(legal):
        position = lowered.find(category.value.casefold())
        if position < 0:
            continue
        key = (position, rank, category)
        if best is None or key[:2] < best[:2]:
            best = key
    if best is None:
        raise EmotionUnresolvable(
            f"none of {[c.value for c in legal]} occurs in {answer!r}")
    return best[2]


def infer_chain(situation_text: str, polarity: Polarity, backend,
                config: InferenceConfig = InferenceConfig()) -> InferredChain:
    """Run the four stages in order, each output feeding the next stage."""
    if not situation_text or not situation_text.strip():
        raise EmptyInput("situation text is empty")
    polarity = Polarity(polarity)
    situation_text = situation_text.strip()

    clue_text, clue_rec = _run_stage(
        "clue", TaskKind.CLUE_GEN, polarity,
        {"situation": situation_text}, backend, config)
    thought_text, thought_rec = _run_stage(
        "thought", TaskKind.THOUGHT_GEN, polarity,
        {"situation": situation_text, "clue": clue_text}, backend, config)
    action_text, action_rec = _run_stage(
        "action", TaskKind.ACTION_GEN, polarity,
        {"situation": situation_text, "thought": thought_text}, backend, config)
    emotion_answer, emotion_rec = _run_stage(
        "emotion", TaskKind.EMOTION_CLS, polarity,
        {"situation": situation_text, "thought": thought_text}, backend, config)
    emotion = _resolve_emotion(emotion_answer, polarity, config.emotion_mode)

    nodes = {
        "q-situation": Node(id="q-situation", kind=NodeKind.SITUATION,
                            text=situation_text, polarity=None, topic=None,
                            status=NodeStatus.RAW, source=NodeSource.LLM_GENERATED),
        "q-clue": Node(id="q-clue", kind=NodeKind.CLUE, text=clue_text,
                       polarity=polarity, topic=None, status=NodeStatus.RAW,
                       source=NodeSource.LLM_GENERATED),
        "q-thought": Node(id="q-thought", kind=NodeKind.THOUGHT, text=thought_text,
                          polarity=polarity, topic=None, status=NodeStatus.RAW,
                          source=NodeSource.LLM_GENERATED),
        "q-action": Node(id="q-action", kind=NodeKind.ACTION, text=action_text,
                         polarity=polarity, topic=None, status=NodeStatus.RAW,
                         source=NodeSource.LLM_GENERATED),
    }
    chain = CognitiveChain(chain_id="q-chain", situation="q-situation",
                           clue="q-clue", thought="q-thought", action="q-action",
                           emotion=emotion, polarity=polarity)
    report = validate_chain(chain, nodes.get)
    if not report.ok:
        raise StageFailure("assembly", DomainError("; ".join(
            message for _, message in report.violations)))
    return InferredChain(chain=chain, nodes=nodes, mode=ChainMode.GENERATED,
                         provenance=(clue_rec, thought_rec, action_rec, emotion_rec))


def lookup_or_infer(graph: Optional[Graph], situation_text: str, polarity: Polarity,
                    backend, config: InferenceConfig = InferenceConfig()
                    ) -> list[InferredChain]:
    """Return stored chains when a similar situation exists, else generate."""
    polarity = Polarity(polarity)
    hit = None
    if graph is not None:
        try:
            hits = graph.link_similar_situations(situation_text, k=1)
        except EmptyGraph:
            hits = []
        if hits and hits[0].score >= config.similarity_threshold:
            hit = hits[0]
    if hit is not None:
        linked = []
        for chain in graph.query_chains(hit.situation_id, polarity=polarity):
            nodes = {node_id: graph.nodes[node_id]
                     for node_id, _ in chain.node_refs()}
            linked.append(InferredChain(chain=chain, nodes=nodes,
                                        mode=ChainMode.LINKED,
                                        matched_situation=hit.situation_id,
                                        similarity=hit.score))
        return linked
    return [infer_chain(situation_text, polarity, backend, config)
            for _ in range(config.chains_per_polarity)]
