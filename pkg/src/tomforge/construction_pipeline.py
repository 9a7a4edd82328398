"""Two-step data collection: candidate generation per node kind, then
automatic dedup filtering, feeding the human review queue.

Candidates live in a CandidatePool (not the graph) until curation accepts
them. Every candidate carries provenance: the parent candidate ids, the
sha256 of the prompt that produced it, and its completion index, which
makes re-runs idempotent and the pool auditable.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

from . import llm_backend, prompt_builder
from .chain_model import (
    FINAL_STATUSES,
    NodeKind,
    NodeStatus,
    Polarity,
    Topic,
    dedup_key,
    normalize_emotion,
    polarity_of_emotion,
)
from .errors import (
    DomainError,
    EmptyCompletion,
    EmptyInput,
    FormatError,
    StageFailure,
    TomforgeError,
    UnknownEmotion,
)

log = logging.getLogger(__name__)

_CAND_PREFIX = "cand"


@dataclass(frozen=True)
class PipelineConfig:
    situations_per_event: int = 5
    thought_rounds_per_polarity: int = 6
    candidates_per_expansion: int = 3
    jaccard_dup_threshold: float = 0.90

    def __post_init__(self):
        for name in ("situations_per_event", "thought_rounds_per_polarity",
                     "candidates_per_expansion"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1")
        if not 0.0 < self.jaccard_dup_threshold <= 1.0:
            raise DomainError("jaccard_dup_threshold must be in (0, 1]")


@dataclass(frozen=True)
class Candidate:
    id: str
    kind: NodeKind
    text: str
    polarity: Optional[Polarity]
    topic: Optional[Topic]
    status: NodeStatus
    source: str
    parent_ids: tuple[str, ...]
    prompt_sha256: str
    completion_index: int

    def dedup_scope(self) -> tuple[str, ...]:
        """Scope within which text identity collapses candidates: clues and
        thoughts per situation, actions and emotions per (situation, thought)."""
        if self.kind is NodeKind.SITUATION:
            return ()
        if self.kind in (NodeKind.CLUE, NodeKind.THOUGHT):
            return self.parent_ids[:1]
        return self.parent_ids[:2]


class CandidatePool:
    """Ordered, id-addressed candidate store with per-kind raw counters."""

    def __init__(self):
        self._items: dict[str, Candidate] = {}
        self._order: list[str] = []
        self._counter = 0
        self.raw_counts: dict[NodeKind, int] = {kind: 0 for kind in NodeKind}

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, candidate_id: str) -> bool:
        return candidate_id in self._items

    def get(self, candidate_id: str) -> Candidate:
        return self._items[candidate_id]

    def ordered(self) -> list[Candidate]:
        return [self._items[cid] for cid in self._order]

    def by_kind(self, kind: NodeKind) -> list[Candidate]:
        return [c for c in self.ordered() if c.kind is kind]

    def add(self, kind: NodeKind, text: str, *, polarity=None, topic=None,
            status=NodeStatus.RAW, parent_ids: Sequence[str] = (),
            prompt_sha256: str = "", completion_index: int = 0,
            source: str = "LlmGenerated") -> Candidate:
        self._counter += 1
        candidate = Candidate(
            id=f"{_CAND_PREFIX}-{self._counter:06d}", kind=NodeKind(kind), text=text,
            polarity=Polarity(polarity) if polarity is not None else None,
            topic=Topic(topic) if topic is not None else None,
            status=NodeStatus(status), source=source, parent_ids=tuple(parent_ids),
            prompt_sha256=prompt_sha256, completion_index=completion_index)
        self._items[candidate.id] = candidate
        self._order.append(candidate.id)
        return candidate

    def update(self, candidate_id: str, **changes) -> Candidate:
        updated = replace(self._items[candidate_id], **changes)
        self._items[candidate_id] = updated
        return updated

    def remove(self, candidate_ids: Iterable[str]) -> None:
        doomed = set(candidate_ids)
        for cid in doomed:
            self._items.pop(cid, None)
        self._order = [cid for cid in self._order if cid not in doomed]

    def has_expansion(self, kind: NodeKind, parent_ids: Sequence[str]) -> bool:
        parents = tuple(parent_ids)
        return any(c.kind is kind and c.parent_ids == parents for c in self._items.values())

    def root_situation(self, candidate: Candidate) -> Optional[Candidate]:
        if candidate.kind is NodeKind.SITUATION:
            return candidate
        root_id = candidate.parent_ids[0] if candidate.parent_ids else None
        if root_id and root_id in self._items:
            return self._items[root_id]
        return None

    # -- checkpointing ---------------------------------------------------

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            header = {"raw_counts": {k.value: v for k, v in self.raw_counts.items()},
                      "counter": self._counter}
            fh.write(json.dumps({"meta": header}, ensure_ascii=False) + "\n")
            for candidate in self.ordered():
                fh.write(json.dumps({
                    "id": candidate.id,
                    "kind": candidate.kind.value,
                    "text": candidate.text,
                    "polarity": candidate.polarity.value if candidate.polarity else None,
                    "topic": candidate.topic.value if candidate.topic else None,
                    "status": candidate.status.value,
                    "source": candidate.source,
                    "parent_ids": list(candidate.parent_ids),
                    "prompt_sha256": candidate.prompt_sha256,
                    "completion_index": candidate.completion_index,
                }, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str) -> "CandidatePool":
        pool = cls()
        with open(path, encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                if not raw.strip():
                    continue
                try:
                    data = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"invalid JSON: {exc.msg}", path=path, line=line_no) from None
                if "meta" in data:
                    meta = data["meta"]
                    pool._counter = int(meta.get("counter", 0))
                    for key, value in meta.get("raw_counts", {}).items():
                        try:
                            pool.raw_counts[NodeKind(key)] = int(value)
                        except ValueError:
                            raise FormatError(f"bad raw count kind {key!r}",
                                              path=path, line=line_no) from None
                    continue
                try:
                    candidate = Candidate(
                        id=data["id"], kind=NodeKind(data["kind"]), text=data["text"],
                        polarity=Polarity(data["polarity"]) if data.get("polarity") else None,
                        topic=Topic(data["topic"]) if data.get("topic") else None,
                        status=NodeStatus(data["status"]), source=data.get("source", "LlmGenerated"),
                        parent_ids=tuple(data.get("parent_ids", [])),
                        prompt_sha256=data.get("prompt_sha256", ""),
                        completion_index=int(data.get("completion_index", 0)))
                except (KeyError, ValueError, TypeError) as exc:
                    raise FormatError(f"invalid candidate: {exc}", path=path, line=line_no) from None
                if candidate.id in pool._items:
                    raise FormatError(f"duplicate candidate id {candidate.id}",
                                      path=path, line=line_no)
                pool._items[candidate.id] = candidate
                pool._order.append(candidate.id)
        numeric = [int(cid.rpartition("-")[2]) for cid in pool._order]
        if numeric:
            pool._counter = max(pool._counter, max(numeric))
        return pool


def _prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def _call(backend, prompt: str, params, stage: str):
    request = llm_backend.GenerationRequest(prompt=prompt, params=params)
    try:
        return backend.generate(request)
    except EmptyCompletion:
        log.warning("empty completion skipped at %s", stage)
        return None
    except TomforgeError as exc:
        raise StageFailure(stage, exc) from exc


def _event_key(event: str) -> str:
    return "event:" + hashlib.sha256(event.encode("utf-8")).hexdigest()[:12]


def rewrite_events(events: Sequence[str], backend, pool: CandidatePool,
                   config: PipelineConfig = PipelineConfig()) -> list[Candidate]:
    """Rewrite each event into one first-person situation per topic.

    Already-processed events (matched by provenance) are skipped, so the
    operation can resume from a checkpoint.
    """
    cleaned = [e.strip() for e in events if e and e.strip()]
    if not cleaned:
        raise EmptyInput("no events to rewrite")
    topics = list(Topic)[:config.situations_per_event]
    created: list[Candidate] = []
    for event in cleaned:
        parent = _event_key(event)
        if pool.has_expansion(NodeKind.SITUATION, (parent,)):
            continue
        for topic in topics:
            prompt = prompt_builder.build_situation_prompt(topic, event)
            result = _call(backend, prompt, llm_backend.default_params(NodeKind.SITUATION),
                           stage=f"situation rewriting for event {event!r}")
            if result is None:
                continue
            pool.raw_counts[NodeKind.SITUATION] += len(result.completions)
            for index, text in enumerate(result.completions):
                created.append(pool.add(
                    NodeKind.SITUATION, text, topic=topic, parent_ids=(parent,),
                    prompt_sha256=_prompt_hash(prompt), completion_index=index))
    new_ids = {c.id for c in created}
    prior = [c for c in pool.by_kind(NodeKind.SITUATION) if c.id not in new_ids]
    survivors = dedup_filter(created, config, existing=prior)
    dropped = {c.id for c in created} - {c.id for c in survivors}
    if dropped:
        log.info("situation dedup removed %d of %d candidates", len(dropped), len(created))
        pool.remove(dropped)
    return survivors


def expand_situation(situation: Candidate, backend, pool: CandidatePool,
                     config: PipelineConfig = PipelineConfig()) -> list[Candidate]:
    """Generate thought candidates for one curated situation: a fixed number
    of single-completion rounds per polarity."""
    if situation.status not in FINAL_STATUSES:
        raise DomainError(f"situation {situation.id} is {situation.status.value}, "
                          "expected Accepted or Revised")
    if pool.has_expansion(NodeKind.THOUGHT, (situation.id,)):
        return []
    created: list[Candidate] = []
    round_params = llm_backend.GenerationParams()
    for polarity in Polarity:
        prompt = prompt_builder.build_thought_prompt(situation.text, polarity)
        for round_no in range(config.thought_rounds_per_polarity):
            result = _call(backend, prompt, round_params,
                           stage=f"thought generation for {situation.id}")
            if result is None:
                continue
            pool.raw_counts[NodeKind.THOUGHT] += len(result.completions)
            created.append(pool.add(
                NodeKind.THOUGHT, result.completions[0], polarity=polarity,
                parent_ids=(situation.id,), prompt_sha256=_prompt_hash(prompt),
                completion_index=round_no))
    survivors = dedup_filter(created, config)
    dropped = {c.id for c in created} - {c.id for c in survivors}
    if dropped:
        log.info("thought dedup removed %d of %d for %s",
                 len(dropped), len(created), situation.id)
        pool.remove(dropped)
    return survivors


def expand_thought(situation: Candidate, thought: Candidate, backend, pool: CandidatePool,
                   config: PipelineConfig = PipelineConfig(),
                   ) -> tuple[list[Candidate], list[Candidate], Optional[Candidate]]:
    """Generate downstream candidates for one thought.

    Curated (Accepted/Revised) thoughts get clue and action candidates;
    any Raw or curated thought gets its emotion label, since labels are
    collected for every raw thought. Out-of-set or unparseable emotion
    answers are stored Flagged for expert review.
    """
    if thought.parent_ids[:1] != (situation.id,):
        raise DomainError(f"thought {thought.id} does not belong to situation {situation.id}")
    polarity = thought.polarity
    clues: list[Candidate] = []
    actions: list[Candidate] = []

    if thought.status in FINAL_STATUSES:
        if not pool.has_expansion(NodeKind.CLUE, (situation.id, thought.id)):
            prompt = prompt_builder.build_clue_prompt(situation.text, thought.text, polarity)
            result = _call(backend, prompt, llm_backend.default_params(NodeKind.CLUE),
                           stage=f"clue generation for {thought.id}")
            if result is not None:
                pool.raw_counts[NodeKind.CLUE] += len(result.completions)
                for index, text in enumerate(result.completions):
                    clues.append(pool.add(
                        NodeKind.CLUE, text, polarity=polarity,
                        parent_ids=(situation.id, thought.id),
                        prompt_sha256=_prompt_hash(prompt), completion_index=index))
        if not pool.has_expansion(NodeKind.ACTION, (situation.id, thought.id)):
            prompt = prompt_builder.build_action_prompt(situation.text, thought.text, polarity)
            result = _call(backend, prompt, llm_backend.default_params(NodeKind.ACTION),
                           stage=f"action generation for {thought.id}")
            if result is not None:
                pool.raw_counts[NodeKind.ACTION] += len(result.completions)
                for index, text in enumerate(result.completions):
                    actions.append(pool.add(
                        NodeKind.ACTION, text, polarity=polarity,
                        parent_ids=(situation.id, thought.id),
                        prompt_sha256=_prompt_hash(prompt), completion_index=index))

    emotion: Optional[Candidate] = None
    if thought.status not in (NodeStatus.REJECTED, NodeStatus.FLAGGED) \
            and not pool.has_expansion(NodeKind.EMOTION, (situation.id, thought.id)):
        prompt = prompt_builder.build_emotion_prompt(situation.text, thought.text, polarity)
        result = _call(backend, prompt, llm_backend.default_params(NodeKind.EMOTION),
                       stage=f"emotion labeling for {thought.id}")
        if result is not None:
            pool.raw_counts[NodeKind.EMOTION] += 1
            answer = result.completions[0]
            status = NodeStatus.RAW
            text = answer
            try:
                category = normalize_emotion(answer)
            except UnknownEmotion:
                status = NodeStatus.FLAGGED
                log.warning("unparseable emotion %r for %s flagged", answer, thought.id)
            else:
                text = category.value
                if polarity_of_emotion(category) is not polarity:
                    status = NodeStatus.FLAGGED
                    log.warning("emotion %s out of the %s choice set for %s, flagged",
                                category.value, polarity.value, thought.id)
            emotion = pool.add(
                NodeKind.EMOTION, text, polarity=polarity, status=status,
                parent_ids=(situation.id, thought.id),
                prompt_sha256=_prompt_hash(prompt), completion_index=0)

    new_clue_ids = {c.id for c in clues}
    prior_clues = [c for c in pool.by_kind(NodeKind.CLUE)
                   if c.id not in new_clue_ids and c.dedup_scope() == (situation.id,)]
    surviving_clues = dedup_filter(clues, config, existing=prior_clues)
    surviving_actions = dedup_filter(actions, config)
    dropped = ({c.id for c in clues} - {c.id for c in surviving_clues}) | \
              ({a.id for a in actions} - {a.id for a in surviving_actions})
    if dropped:
        pool.remove(dropped)
    return surviving_clues, surviving_actions, emotion


def token_jaccard(a: str, b: str) -> float:
    """Unigram Jaccard over normalized token sets."""
    set_a = set(dedup_key(a).split())
    set_b = set(dedup_key(b).split())
    if not set_a and not set_b:
        return 1.0
    union = set_a | set_b
    return len(set_a & set_b) / len(union)


def dedup_filter(candidates: Sequence[Candidate],
                 config: PipelineConfig = PipelineConfig(),
                 existing: Sequence[Candidate] = ()) -> list[Candidate]:
    """Drop near-duplicates within each (kind, dedup scope) group.

    Exact matches after whitespace/case normalization always collapse;
    otherwise a candidate is dropped when its token Jaccard against any
    earlier kept candidate reaches the threshold. First by generation
    order wins. ``existing`` seeds the kept set (earlier batches of the
    same scope) without appearing in the result.
    """
    kept: list[Candidate] = []
    seen_exact: dict[tuple, set[str]] = {}
    kept_by_group: dict[tuple, list[Candidate]] = {}
    for prior in existing:
        group = (prior.kind, prior.dedup_scope())
        seen_exact.setdefault(group, set()).add(dedup_key(prior.text))
        kept_by_group.setdefault(group, []).append(prior)
    for candidate in candidates:
        group = (candidate.kind, candidate.dedup_scope())
        normalized = dedup_key(candidate.text)
        if normalized in seen_exact.setdefault(group, set()):
            continue
        earlier = kept_by_group.setdefault(group, [])
        if any(token_jaccard(candidate.text, other.text) >= config.jaccard_dup_threshold
               for other in earlier):
            continue
        seen_exact[group].add(normalized)
        earlier.append(candidate)
        kept.append(candidate)
    return kept


def run_expansions(pool: CandidatePool, backend,
                   config: PipelineConfig = PipelineConfig()) -> dict[str, int]:
    """Expand every eligible parent in the pool: curated situations into
    thoughts, thoughts into clues/actions/emotions. Returns per-kind counts
    of new candidates."""
    created = {kind: 0 for kind in (NodeKind.THOUGHT, NodeKind.CLUE,
                                    NodeKind.ACTION, NodeKind.EMOTION)}
    for situation in pool.by_kind(NodeKind.SITUATION):
        if situation.status in FINAL_STATUSES:
            created[NodeKind.THOUGHT] += len(expand_situation(situation, backend, pool, config))
    for thought in pool.by_kind(NodeKind.THOUGHT):
        situation = pool.root_situation(thought)
        if situation is None or situation.status not in FINAL_STATUSES:
            continue
        clues, actions, emotion = expand_thought(situation, thought, backend, pool, config)
        created[NodeKind.CLUE] += len(clues)
        created[NodeKind.ACTION] += len(actions)
        created[NodeKind.EMOTION] += 1 if emotion is not None else 0
    return {kind.value: count for kind, count in created.items()}


def load_events(path: str) -> list[str]:
    """Read an events file: plain text, one event per line, blanks ignored."""
    if not os.path.exists(path):
        raise FormatError("events file not found", path=path)
    with open(path, encoding="utf-8") as fh:
        events = [line.strip() for line in fh if line.strip()]
    if not events:
        raise EmptyInput(f"events file {path} is empty")
    return events
