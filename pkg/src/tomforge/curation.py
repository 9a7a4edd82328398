"""Human review workflow over a candidate pool.

Annotators claim batches of pending candidates under a time lease, then
accept, revise, reject, or flag each one. Flagged items go to experts for
resolution. Every decision is appended to a JSONL log; replaying that log
against the original pool reproduces the exact same final state, so the
finalized graph is a pure function of (pool checkpoint, decision log).
"""

from __future__ import annotations

import enum
import json
import os
import threading
import time
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

from .chain_model import (
    FINAL_STATUSES,
    EmotionCategory,
    Node,
    NodeKind,
    NodeSource,
    NodeStatus,
    CognitiveChain,
    Polarity,
    Topic,
    dedup_key,
    normalize_emotion,
    polarity_of_emotion,
)
from .construction_pipeline import Candidate, CandidatePool
from .errors import (
    DecisionInvalid,
    LabelPolarityMismatch,
    NotFlagged,
    PendingItemsRemain,
    RoleDenied,
    StaleClaim,
    UnknownAnnotator,
    UnknownEmotion,
    UnknownItem,
)
from .graph_store import Graph, GraphStats, retention_rate

DEFAULT_LEASE_SECONDS = 1800

_KIND_ORDER = {kind: index for index, kind in enumerate(NodeKind)}


class ReviewVerdict(str, enum.Enum):
    ACCEPT = "Accept"
    REVISE = "Revise"
    REJECT = "Reject"
    FLAG = "Flag"


@dataclass(frozen=True)
class ReviewItem:
    """One claimed candidate plus the context an annotator needs to judge it."""
    candidate: Candidate
    situation_text: Optional[str]
    thought_text: Optional[str]
    claimed_by: str
    claim_expires: float

    def to_dict(self) -> dict:
        cand = self.candidate
        return {
            "id": cand.id,
            "kind": cand.kind.value,
            "text": cand.text,
            "polarity": cand.polarity.value if cand.polarity else None,
            "topic": cand.topic.value if cand.topic else None,
            "status": cand.status.value,
            "situation": self.situation_text,
            "thought": self.thought_text,
            "claimed_by": self.claimed_by,
            "claim_expires": self.claim_expires,
        }


@dataclass(frozen=True)
class ReviewStats:
    by_kind: dict
    by_annotator: dict
    pending: int
    flagged: int
    retention: Optional[float]

    def to_dict(self) -> dict:
        return {"by_kind": self.by_kind, "by_annotator": self.by_annotator,
                "pending": self.pending, "flagged": self.flagged,
                "retention": self.retention}


@dataclass
class _Claim:
    annotator: str
    expires_at: float


class CurationService:
    """Owns the candidate pool during review.

    ``roster`` maps annotator id to an is-expert flag; ``None`` leaves the
    roster open (any id, treated as expert), which replay relies on.
    ``open_mode`` additionally lets decisions land on unclaimed items.
    """

    def __init__(self, pool: CandidatePool, roster: Optional[Mapping[str, bool]] = None,
                 clock=time.time, lease_seconds: int = DEFAULT_LEASE_SECONDS,
                 open_mode: bool = False, log_path: Optional[str] = None):
        self.pool = pool
        self.roster = dict(roster) if roster is not None else None
        self.clock = clock
        self.lease_seconds = lease_seconds
        self.open_mode = open_mode
        self.log_path = log_path
        self._claims: dict[str, _Claim] = {}
        self._log: list[dict] = []
        self._seq = 0
        if log_path and os.path.exists(log_path):
            # resume numbering after earlier sessions so read_log keeps
            # the true decision order across server restarts
            for record in self.read_log(log_path):
                self._seq = max(self._seq, int(record.get("seq", 0)))
        self._lock = threading.RLock()

    # -- roster ------------------------------------------------------------

    def _require_annotator(self, annotator_id: str) -> None:
        if not annotator_id:
            raise UnknownAnnotator("empty annotator id")
        if self.roster is not None and annotator_id not in self.roster:
            raise UnknownAnnotator(f"annotator {annotator_id!r} is not on the roster")

    def _is_expert(self, annotator_id: str) -> bool:
        if self.roster is None:
            return True
        return bool(self.roster.get(annotator_id))

    # -- queue -------------------------------------------------------------

    def _queue_key(self, candidate: Candidate):
        if candidate.kind is NodeKind.SITUATION:
            root = candidate.id
        else:
            root = candidate.parent_ids[0] if candidate.parent_ids else ""
        return (root, _KIND_ORDER[candidate.kind], candidate.id)

    def _context(self, candidate: Candidate) -> tuple[Optional[str], Optional[str]]:
        situation_text = None
        thought_text = None
        if candidate.kind is not NodeKind.SITUATION and candidate.parent_ids:
            root_id = candidate.parent_ids[0]
            if root_id in self.pool:
                situation_text = self.pool.get(root_id).text
            if len(candidate.parent_ids) > 1 and candidate.parent_ids[1] in self.pool:
                thought_text = self.pool.get(candidate.parent_ids[1]).text
        return situation_text, thought_text

    def _topic_of(self, candidate: Candidate) -> Optional[Topic]:
        root = self.pool.root_situation(candidate)
        return root.topic if root else None

    def pending_items(self, kind: Optional[NodeKind] = None,
                      topic: Optional[Topic] = None,
                      polarity: Optional[Polarity] = None) -> list[Candidate]:
        """Undecided candidates in review order, ignoring claims."""
        found = [c for c in self.pool.ordered() if c.status is NodeStatus.RAW]
        if kind is not None:
            found = [c for c in found if c.kind is NodeKind(kind)]
        if polarity is not None:
            found = [c for c in found if c.polarity is Polarity(polarity)]
        if topic is not None:
            wanted = Topic(topic)
            found = [c for c in found if self._topic_of(c) is wanted]
        found.sort(key=self._queue_key)
        return found

    def flagged_items(self) -> list[ReviewItem]:
        flagged = sorted((c for c in self.pool.ordered()
                          if c.status is NodeStatus.FLAGGED), key=self._queue_key)
        out = []
        for cand in flagged:
            situation_text, thought_text = self._context(cand)
            out.append(ReviewItem(cand, situation_text, thought_text, "", 0.0))
        return out

    def claim_batch(self, annotator_id: str, size: int = 20,
                    kind: Optional[NodeKind] = None, topic: Optional[Topic] = None,
                    polarity: Optional[Polarity] = None) -> list[ReviewItem]:
        """Lease up to ``size`` pending candidates to one annotator."""
        if size < 1:
            raise ValueError("size must be >= 1")
        self._require_annotator(annotator_id)
        now = self.clock()
        claimed: list[ReviewItem] = []
        with self._lock:
            self._drop_expired(now)
            for candidate in self.pending_items(kind=kind, topic=topic, polarity=polarity):
                if candidate.id in self._claims:
                    continue
                expires = now + self.lease_seconds
                self._claims[candidate.id] = _Claim(annotator_id, expires)
                situation_text, thought_text = self._context(candidate)
                claimed.append(ReviewItem(candidate, situation_text, thought_text,
                                          annotator_id, expires))
                if len(claimed) >= size:
                    break
        return claimed

    def _drop_expired(self, now: float) -> None:
        dead = [item_id for item_id, claim in self._claims.items()
                if claim.expires_at <= now]
        for item_id in dead:
            del self._claims[item_id]

    def release_claims(self, annotator_id: str) -> int:
        """Drop all live leases held by one annotator; returns how many."""
        self._require_annotator(annotator_id)
        with self._lock:
            mine = [item_id for item_id, claim in self._claims.items()
                    if claim.annotator == annotator_id]
            for item_id in mine:
                del self._claims[item_id]
        return len(mine)

    # -- decisions ---------------------------------------------------------

    def submit_decision(self, item_id: str, annotator_id: str, verdict: ReviewVerdict,
                        text: Optional[str] = None, reason: Optional[str] = None) -> Candidate:
        """Apply one annotator verdict to a claimed pending item."""
        verdict = ReviewVerdict(verdict)
        self._require_annotator(annotator_id)
        with self._lock:
            if item_id not in self.pool:
                raise UnknownItem(f"no item {item_id!r}")
            candidate = self.pool.get(item_id)
            if candidate.status is NodeStatus.FLAGGED:
                raise DecisionInvalid(f"{item_id} is flagged and needs expert resolution")
            if candidate.status is not NodeStatus.RAW:
                raise DecisionInvalid(f"{item_id} was already decided "
                                      f"({candidate.status.value})")
            self._check_claim(item_id, annotator_id)
            updated = self._execute(candidate, verdict, text=text, relabel=None)
            self._claims.pop(item_id, None)
            self._record(item_id, annotator_id, verdict, text=text, reason=reason)
        return updated

    def expert_resolve(self, item_id: str, expert_id: str, verdict: ReviewVerdict,
                       relabel: Optional[EmotionCategory] = None,
                       text: Optional[str] = None) -> Candidate:
        """Resolve a flagged item; only roster experts may do this."""
        verdict = ReviewVerdict(verdict)
        self._require_annotator(expert_id)
        if not self._is_expert(expert_id):
            raise RoleDenied(f"{expert_id} is not an expert")
        if verdict is ReviewVerdict.FLAG:
            raise DecisionInvalid("cannot flag an item that is already flagged")
        with self._lock:
            if item_id not in self.pool:
                raise UnknownItem(f"no item {item_id!r}")
            candidate = self.pool.get(item_id)
            if candidate.status is not NodeStatus.FLAGGED:
                raise NotFlagged(f"{item_id} is {candidate.status.value}, not flagged")
            updated = self._execute(candidate, verdict, text=text, relabel=relabel)
            self._claims.pop(item_id, None)
            self._record(item_id, expert_id, verdict, text=text,
                         relabel=relabel.value if relabel else None)
        return updated

    def _check_claim(self, item_id: str, annotator_id: str) -> None:
        claim = self._claims.get(item_id)
        now = self.clock()
        if claim is None or claim.expires_at <= now:
            if self.open_mode:
                return
            raise StaleClaim(f"{item_id} is not claimed by {annotator_id} "
                             "(no live lease)")
        if claim.annotator != annotator_id:
            raise StaleClaim(f"{item_id} is leased to {claim.annotator}")

    def _execute(self, candidate: Candidate, verdict: ReviewVerdict,
                 text: Optional[str], relabel: Optional[EmotionCategory],
                 replaying: bool = False) -> Candidate:
        """State transition shared by the annotator path, the expert path,
        and log replay. Raises before mutating."""
        item_id = candidate.id
        if verdict is ReviewVerdict.ACCEPT:
            if candidate.kind is NodeKind.EMOTION:
                self._check_emotion_text(candidate, candidate.text)
            return self.pool.update(item_id, status=NodeStatus.ACCEPTED)
        if verdict is ReviewVerdict.REJECT:
            return self.pool.update(item_id, status=NodeStatus.REJECTED)
        if verdict is ReviewVerdict.FLAG:
            return self.pool.update(item_id, status=NodeStatus.FLAGGED)
        # Revise
        if relabel is not None:
            if candidate.kind is not NodeKind.EMOTION:
                raise DecisionInvalid("relabel applies to emotion items only")
            relabel = EmotionCategory(relabel)
            self._check_emotion_category(candidate, relabel)
            return self.pool.update(item_id, text=relabel.value,
                                    status=NodeStatus.REVISED,
                                    source=NodeSource.HUMAN_REVISED.value)
        if text is None or not text.strip():
            raise DecisionInvalid("a revision needs replacement text")
        if dedup_key(text) == dedup_key(candidate.text) and not replaying:
            # a replayed revision may land on a pool that already carries
            # its text; live callers must actually change something
            raise DecisionInvalid("revision text matches the original")
        if candidate.kind is NodeKind.EMOTION:
            category = self._check_emotion_text(candidate, text)
            text = category.value
        return self.pool.update(item_id, text=text.strip(),
                                status=NodeStatus.REVISED,
                                source=NodeSource.HUMAN_REVISED.value)

    def _check_emotion_text(self, candidate: Candidate, text: str) -> EmotionCategory:
        try:
            category = normalize_emotion(text)
        except UnknownEmotion:
            raise LabelPolarityMismatch(
                f"{text!r} is not one of the six emotion labels") from None
        self._check_emotion_category(candidate, category)
        return category

    def _check_emotion_category(self, candidate: Candidate,
                                category: EmotionCategory) -> None:
        if candidate.polarity is not None \
                and polarity_of_emotion(category) is not candidate.polarity:
            raise LabelPolarityMismatch(
                f"{category.value} is outside the {candidate.polarity.value} "
                "choice set")

    # -- decision log ------------------------------------------------------

    def _record(self, item_id: str, annotator_id: str, verdict: ReviewVerdict,
                text: Optional[str] = None, reason: Optional[str] = None,
                relabel: Optional[str] = None) -> None:
        self._seq += 1
        record = {"seq": self._seq, "item": item_id, "annotator": annotator_id,
                  "verdict": verdict.value, "text": text, "reason": reason,
                  "relabel": relabel, "ts": round(self.clock(), 3)}
        self._log.append(record)
        if self.log_path:
            with open(self.log_path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")

    def decisions(self) -> list[dict]:
        return list(self._log)

    @staticmethod
    def read_log(path: str) -> list[dict]:
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
        records.sort(key=lambda r: r.get("seq", 0))
        return records

    @classmethod
    def replay(cls, pool: CandidatePool, records: Iterable[dict]) -> "CurationService":
        """Re-apply a decision log to a pool checkpoint.

        Leases and roster checks are skipped: the log only contains
        decisions that passed them when first made. The pool may be the
        pristine checkpoint or one that already carries some or all of
        the logged outcomes; re-application is idempotent.
        """
        service = cls(pool, roster=None, open_mode=True)
        for record in records:
            item_id = record["item"]
            if item_id not in pool:
                raise UnknownItem(f"log references unknown item {item_id!r}")
            candidate = pool.get(item_id)
            relabel = EmotionCategory(record["relabel"]) if record.get("relabel") else None
            service._execute(candidate, ReviewVerdict(record["verdict"]),
                             text=record.get("text"), relabel=relabel,
                             replaying=True)
            service._seq = max(service._seq, int(record.get("seq", 0)))
            service._log.append(dict(record))
        return service

    # -- reporting and finalization -----------------------------------------

    def stats(self) -> ReviewStats:
        by_kind: dict[str, dict[str, int]] = {}
        for kind in NodeKind:
            by_kind[kind.value] = {"pending": 0, "accepted": 0, "revised": 0,
                                   "rejected": 0, "flagged": 0}
        for candidate in self.pool.ordered():
            bucket = by_kind[candidate.kind.value]
            key = {NodeStatus.RAW: "pending", NodeStatus.ACCEPTED: "accepted",
                   NodeStatus.REVISED: "revised", NodeStatus.REJECTED: "rejected",
                   NodeStatus.FLAGGED: "flagged"}[candidate.status]
            bucket[key] += 1
        by_annotator: dict[str, int] = {}
        for record in self._log:
            by_annotator[record["annotator"]] = by_annotator.get(record["annotator"], 0) + 1
        total_raw = sum(self.pool.raw_counts.values())
        total_final = sum(1 for c in self.pool.ordered() if c.status in FINAL_STATUSES)
        # hand-assembled pools may not track generation counts
        retention = (retention_rate(total_final, total_raw)
                     if 0 < total_raw and total_final <= total_raw else None)
        pending = sum(row["pending"] for row in by_kind.values())
        flagged = sum(row["flagged"] for row in by_kind.values())
        return ReviewStats(by_kind=by_kind, by_annotator=by_annotator,
                           pending=pending, flagged=flagged, retention=retention)

    def finalize(self, force: bool = False) -> tuple[Graph, GraphStats]:
        """Assemble the graph from accepted and revised candidates.

        Chains are built per curated thought: its emotion label anchors the
        polarity, and every kept clue is paired with every kept action.
        """
        with self._lock:
            undecided = [c for c in self.pool.ordered()
                         if c.status in (NodeStatus.RAW, NodeStatus.FLAGGED)]
            if undecided and not force:
                raise PendingItemsRemain(
                    f"{len(undecided)} items still need review "
                    f"(first: {undecided[0].id})")
            final = sorted((c for c in self.pool.ordered()
                            if c.status in FINAL_STATUSES), key=self._queue_key)
            graph = Graph()
            mapping: dict[str, str] = {}
            for candidate in final:
                scope = self._graph_scope(candidate, mapping)
                if scope is None:
                    continue
                node = Node(id="", kind=candidate.kind, text=candidate.text,
                            polarity=candidate.polarity, topic=candidate.topic,
                            status=candidate.status,
                            source=NodeSource(candidate.source))
                mapping[candidate.id] = graph.add_node(node, scope)
            self._insert_chains(graph, final, mapping)
            for kind, count in self.pool.raw_counts.items():
                if count:
                    graph.add_raw_count(kind, count)
            return graph, graph.stats()

    def _graph_scope(self, candidate: Candidate,
                     mapping: Mapping[str, str]) -> Optional[tuple[str, ...]]:
        """Graph placement for a final candidate, or None when a parent was
        rejected (the child cannot exist without it)."""
        if candidate.kind is NodeKind.SITUATION:
            return ()
        parents = candidate.parent_ids
        if candidate.kind in (NodeKind.CLUE, NodeKind.THOUGHT):
            sid = mapping.get(parents[0]) if parents else None
            return (sid,) if sid else None
        if len(parents) < 2:
            return None
        sid = mapping.get(parents[0])
        tid = mapping.get(parents[1])
        return (sid, tid) if sid and tid else None

    def _insert_chains(self, graph: Graph, final: Sequence[Candidate],
                       mapping: Mapping[str, str]) -> None:
        def under(kind: NodeKind, parents: tuple[str, ...]) -> list[Candidate]:
            return [c for c in final
                    if c.kind is kind and c.parent_ids == parents and c.id in mapping]

        for situation in (c for c in final if c.kind is NodeKind.SITUATION):
            for thought in under(NodeKind.THOUGHT, (situation.id,)):
                emotions = under(NodeKind.EMOTION, (situation.id, thought.id))
                if not emotions:
                    continue
                category = normalize_emotion(emotions[0].text)
                clues = under(NodeKind.CLUE, (situation.id, thought.id))
                actions = under(NodeKind.ACTION, (situation.id, thought.id))
                for clue in clues:
                    for action in actions:
                        graph.insert_chain(CognitiveChain(
                            chain_id="", situation=mapping[situation.id],
                            clue=mapping[clue.id], thought=mapping[thought.id],
                            action=mapping[action.id], emotion=category,
                            polarity=thought.polarity))
