"""Graph storage: nodes, chains, dedup, stats, similarity search, and
JSONL persistence.

Mutations are serialized through a per-graph lock (single writer); reads
work on plain dict lookups. node ids are assigned by the store in insertion
order ("s-000001", "c-000001", ...) and are never derived from content, so
text revisions keep their identity.
"""

from __future__ import annotations

import json
import math
import os
import re
import threading
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Optional

from .chain_model import (
    CognitiveChain,
    EmotionCategory,
    FINAL_STATUSES,
    Node,
    NodeKind,
    NodeSource,
    NodeStatus,
    Polarity,
    Topic,
    dedup_key,
    validate_chain,
)
from .errors import (
    DomainError,
    EmptyGraph,
    FormatError,
    InvariantViolation,
    UnknownSituation,
)

_ID_PREFIX = {
    NodeKind.SITUATION: "s",
    NodeKind.CLUE: "c",
    NodeKind.THOUGHT: "t",
    NodeKind.ACTION: "a",
    NodeKind.EMOTION: "e",
}
_CHAIN_PREFIX = "ch"

_NODES_FILE = "nodes.jsonl"
_CHAINS_FILE = "chains.jsonl"
_META_FILE = "meta.json"

_WORD_RE = re.compile(r"\w+")

#: statuses whose dedup keys stay reserved (rejected text may be resubmitted)
_DEDUP_STATUSES = frozenset({NodeStatus.RAW, NodeStatus.ACCEPTED, NodeStatus.REVISED})


@dataclass(frozen=True)
class SimilarityHit:
    situation_id: str
    score: float


@dataclass(frozen=True)
class GraphStats:
    final_counts: Mapping[str, int]
    raw_counts: Mapping[str, int]
    retention: Mapping[str, Optional[float]]
    chains_total: int
    chains_positive: int
    chains_negative: int

    def to_dict(self) -> dict:
        return {
            "final_counts": dict(self.final_counts),
            "raw_counts": dict(self.raw_counts),
            "retention": dict(self.retention),
            "chains_total": self.chains_total,
            "chains_positive": self.chains_positive,
            "chains_negative": self.chains_negative,
        }


def retention_rate(final: int, raw: int) -> float:
    """final/raw to 4 decimal places; raw must be positive and >= final."""
    if raw <= 0:
        raise DomainError(f"raw count must be positive, got {raw}")
    if final < 0 or final > raw:
        raise DomainError(f"final count {final} out of range for raw {raw}")
    return round(final / raw, 4)


class Graph:
    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self.chains: dict[str, CognitiveChain] = {}
        self.scopes: dict[str, tuple[str, ...]] = {}
        self.raw_counts: dict[NodeKind, int] = {kind: 0 for kind in NodeKind}
        self._dedup: dict[tuple[NodeKind, tuple[str, ...], str], str] = {}
        self._chain_keys: dict[tuple, str] = {}
        self._chains_by_situation: dict[str, list[str]] = {}
        self._counters: dict[str, int] = {p: 0 for p in list(_ID_PREFIX.values()) + [_CHAIN_PREFIX]}
        self._lock = threading.RLock()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.nodes == other.nodes and self.chains == other.chains
                and self.scopes == other.scopes and self.raw_counts == other.raw_counts)

    def _next_id(self, prefix: str) -> str:
        self._counters[prefix] += 1
        return f"{prefix}-{self._counters[prefix]:06d}"

    def _register(self, node: Node, scope: tuple[str, ...]) -> None:
        self.nodes[node.id] = node
        self.scopes[node.id] = scope
        key = (node.kind, scope, dedup_key(node.text))
        if node.status in _DEDUP_STATUSES and key not in self._dedup:
            self._dedup[key] = node.id

    def add_node(self, node: Node, scope: Iterable[str] = ()) -> str:
        """Insert a node under a parent scope, deduplicating by normalized
        text. Scope is () for situations, (situation_id,) for clues and
        thoughts, (situation_id, thought_id) for actions and emotions.

        Returns the id of the stored node: the existing one when an
        Accepted/Revised/Raw node with the same key is present, a fresh
        monotonic id otherwise.
        """
        scope = tuple(scope)
        with self._lock:
            expected_len = {NodeKind.SITUATION: 0, NodeKind.CLUE: 1, NodeKind.THOUGHT: 1,
                            NodeKind.ACTION: 2, NodeKind.EMOTION: 2}[node.kind]
            problems = node.check()
            if len(scope) != expected_len:
                problems.append(("bad-scope",
                                 f"{node.kind.value} scope must have {expected_len} ids, got {len(scope)}"))
            for parent_id in scope:
                if parent_id not in self.nodes:
                    problems.append(("unknown-parent", f"scope id {parent_id} is not stored"))
            if problems:
                raise InvariantViolation(f"node rejected: {problems[0][1]}", report=problems)

            key = (node.kind, scope, dedup_key(node.text))
            existing_id = self._dedup.get(key)
            if existing_id is not None and self.nodes[existing_id].status in _DEDUP_STATUSES:
                return existing_id

            node_id = node.id or self._next_id(_ID_PREFIX[node.kind])
            if node_id in self.nodes:
                raise InvariantViolation(f"node id {node_id} already stored",
                                         report=[("duplicate-id", node_id)])
            self._sync_counter(node_id)
            self._register(replace(node, id=node_id), scope)
            return node_id

    def _sync_counter(self, assigned_id: str) -> None:
        prefix, _, suffix = assigned_id.rpartition("-")
        if prefix in self._counters and suffix.isdigit():
            self._counters[prefix] = max(self._counters[prefix], int(suffix))

    def replace_node(self, node_id: str, **changes) -> Node:
        """Swap stored node fields (text, status, source, polarity) in place,
        keeping the id and refreshing dedup bookkeeping."""
        with self._lock:
            old = self.nodes.get(node_id)
            if old is None:
                raise InvariantViolation(f"no node {node_id}", report=[("unknown-node", node_id)])
            new = replace(old, **changes)
            problems = new.check()
            if problems:
                raise InvariantViolation(f"node rejected: {problems[0][1]}", report=problems)
            scope = self.scopes[node_id]
            old_key = (old.kind, scope, dedup_key(old.text))
            new_key = (new.kind, scope, dedup_key(new.text))
            if new.status in _DEDUP_STATUSES:
                holder = self._dedup.get(new_key)
                if holder is not None and holder != node_id and \
                        self.nodes[holder].status in _DEDUP_STATUSES:
                    raise InvariantViolation(
                        f"text collides with {holder} in the same scope",
                        report=[("dedup-collision", holder)])
            if self._dedup.get(old_key) == node_id:
                del self._dedup[old_key]
            self.nodes[node_id] = new
            if new.status in _DEDUP_STATUSES:
                self._dedup.setdefault(new_key, node_id)
            return new

    def insert_chain(self, chain: CognitiveChain) -> str:
        with self._lock:
            report = validate_chain(chain, self.nodes.get)
            if not report.ok:
                raise InvariantViolation(
                    f"chain rejected: {report.violations[0][1]}",
                    report=list(report.violations))
            key = (chain.situation, chain.clue, chain.thought, chain.action, chain.emotion)
            existing = self._chain_keys.get(key)
            if existing is not None:
                return existing
            chain_id = chain.chain_id or self._next_id(_CHAIN_PREFIX)
            if chain_id in self.chains:
                raise InvariantViolation(f"chain id {chain_id} already stored",
                                         report=[("duplicate-id", chain_id)])
            self._sync_counter(chain_id)
            self.chains[chain_id] = replace(chain, chain_id=chain_id)
            self._chain_keys[key] = chain_id
            self._chains_by_situation.setdefault(chain.situation, []).append(chain_id)
            return chain_id

    def query_chains(self, situation_id: str,
                     polarity: Optional[Polarity] = None) -> list[CognitiveChain]:
        node = self.nodes.get(situation_id)
        if node is None or node.kind is not NodeKind.SITUATION:
            raise UnknownSituation(f"no situation {situation_id!r}")
        ids = sorted(self._chains_by_situation.get(situation_id, []))
        found = [self.chains[cid] for cid in ids]
        if polarity is not None:
            polarity = Polarity(polarity)
            found = [c for c in found if c.polarity is polarity]
        return found

    def add_raw_count(self, kind: NodeKind, count: int) -> None:
        if count < 0:
            raise DomainError("raw count increment must be >= 0")
        with self._lock:
            self.raw_counts[NodeKind(kind)] += count

    def situations(self) -> list[Node]:
        return [n for n in self.nodes.values() if n.kind is NodeKind.SITUATION]

    def stats(self) -> GraphStats:
        final: dict[str, int] = {kind.value: 0 for kind in NodeKind}
        for node in self.nodes.values():
            if node.status in FINAL_STATUSES:
                final[node.kind.value] += 1
        raw = {kind.value: self.raw_counts[kind] for kind in NodeKind}
        retention = {
            kind.value: (retention_rate(final[kind.value], raw[kind.value])
                         if raw[kind.value] > 0 else None)
            for kind in NodeKind
        }
        positive = sum(1 for c in self.chains.values() if c.polarity is Polarity.POSITIVE)
        return GraphStats(
            final_counts=final, raw_counts=raw, retention=retention,
            chains_total=len(self.chains), chains_positive=positive,
            chains_negative=len(self.chains) - positive)

    # -- similarity ----------------------------------------------------

    def link_similar_situations(self, query_text: str, k: int) -> list[SimilarityHit]:
        """Top-k situations by TF-IDF cosine over case-folded word tokens.

        tf is the raw in-document count, idf = ln(N/df) with df clamped to
        at least 1. Zero-norm vectors (no shared informative tokens, or a
        single-document corpus where idf degenerates to 0) score 0.0.
        """
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        situations = sorted(self.situations(), key=lambda n: n.id)
        if not situations:
            raise EmptyGraph("no situations stored")

        doc_tokens = {n.id: _WORD_RE.findall(n.text.casefold()) for n in situations}
        df: dict[str, int] = {}
        for tokens in doc_tokens.values():
            for token in set(tokens):
                df[token] = df.get(token, 0) + 1
        n_docs = len(situations)

        def idf(token: str) -> float:
            return math.log(n_docs / max(1, df.get(token, 0)))

        def vector(tokens: list[str]) -> dict[str, float]:
            counts: dict[str, int] = {}
            for token in tokens:
                counts[token] = counts.get(token, 0) + 1
            return {t: c * idf(t) for t, c in counts.items()}

        query_vec = vector(_WORD_RE.findall(query_text.casefold()))
        query_norm = math.sqrt(sum(w * w for w in query_vec.values()))

        hits = []
        for node in situations:
            doc_vec = vector(doc_tokens[node.id])
            doc_norm = math.sqrt(sum(w * w for w in doc_vec.values()))
            if query_norm == 0.0 or doc_norm == 0.0:
                score = 0.0
            else:
                dot = sum(w * doc_vec.get(t, 0.0) for t, w in query_vec.items())
                score = dot / (query_norm * doc_norm)
                score = max(0.0, min(1.0, score))
            hits.append(SimilarityHit(situation_id=node.id, score=score))
        hits.sort(key=lambda h: (-h.score, h.situation_id))
        return hits[:k]


# -- module-level operation aliases ------------------------------------

def add_node(graph: Graph, node: Node, scope: Iterable[str] = ()) -> str:
    return graph.add_node(node, scope)


def insert_chain(graph: Graph, chain: CognitiveChain) -> str:
    return graph.insert_chain(chain)


def query_chains(graph: Graph, situation_id: str,
                 polarity: Optional[Polarity] = None) -> list[CognitiveChain]:
    return graph.query_chains(situation_id, polarity)


def link_similar_situations(graph: Graph, query_text: str, k: int) -> list[SimilarityHit]:
    return graph.link_similar_situations(query_text, k)


# -- persistence --------------------------------------------------------

def _node_line(node: Node) -> str:
    return json.dumps({
        "id": node.id,
        "kind": node.kind.value,
        "text": node.text,
        "polarity": node.polarity.value if node.polarity else None,
        "topic": node.topic.value if node.topic else None,
        "status": node.status.value,
        "source": node.source.value,
    }, ensure_ascii=False)


def _chain_line(chain: CognitiveChain) -> str:
    return json.dumps({
        "chain_id": chain.chain_id,
        "situation": chain.situation,
        "clue": chain.clue,
        "thought": chain.thought,
        "action": chain.action,
        "emotion": chain.emotion.value,
        "polarity": chain.polarity.value,
    }, ensure_ascii=False)


def save(graph: Graph, path: str) -> None:
    """Write nodes.jsonl, chains.jsonl, and a meta.json sidecar (raw counts,
    id counters, per-node scopes) into the directory at path."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, _NODES_FILE), "w", encoding="utf-8", newline="\n") as fh:
        for node in graph.nodes.values():
            fh.write(_node_line(node) + "\n")
    with open(os.path.join(path, _CHAINS_FILE), "w", encoding="utf-8", newline="\n") as fh:
        for chain in graph.chains.values():
            fh.write(_chain_line(chain) + "\n")
    meta = {
        "raw_counts": {kind.value: graph.raw_counts[kind] for kind in NodeKind},
        "counters": dict(graph._counters),
        "scopes": {node_id: list(scope) for node_id, scope in graph.scopes.items()},
    }
    with open(os.path.join(path, _META_FILE), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, ensure_ascii=False, sort_keys=True, indent=2)
        fh.write("\n")


def _parse_enum(enum_cls, value, field_name, path, line_no):
    if value is None:
        return None
    try:
        return enum_cls(value)
    except ValueError:
        raise FormatError(f"bad {field_name} {value!r}", path=path, line=line_no) from None


def _load_json_line(raw: str, path: str, line_no: int) -> dict:
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path=path, line=line_no) from None
    if not isinstance(data, dict):
        raise FormatError("expected a JSON object", path=path, line=line_no)
    return data


def load(path: str) -> Graph:
    """Rebuild a graph from a directory written by save().

    Without meta.json (hand-built inputs) scopes are recovered from chain
    membership where possible; dedup keys for unchained nodes then fall
    back to situation-free scope.
    """
    graph = Graph()
    nodes_path = os.path.join(path, _NODES_FILE)
    chains_path = os.path.join(path, _CHAINS_FILE)
    meta_path = os.path.join(path, _META_FILE)

    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            try:
                meta = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON: {exc.msg}", path=meta_path, line=exc.lineno) from None

    scope_map = {node_id: tuple(scope) for node_id, scope in meta.get("scopes", {}).items()}

    raw_chain_rows: list[dict] = []
    if os.path.exists(chains_path):
        with open(chains_path, encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                if raw.strip():
                    raw_chain_rows.append(_load_json_line(raw, chains_path, line_no))

    if not scope_map:
        for row in raw_chain_rows:
            sid, tid = row.get("situation"), row.get("thought")
            if isinstance(sid, str):
                for key in ("clue", "thought"):
                    if isinstance(row.get(key), str):
                        scope_map.setdefault(row[key], (sid,))
                if isinstance(tid, str) and isinstance(row.get("action"), str):
                    scope_map.setdefault(row["action"], (sid, tid))

    with open(nodes_path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            data = _load_json_line(raw, nodes_path, line_no)
            for field_name in ("id", "kind", "text", "status", "source"):
                if not isinstance(data.get(field_name), str):
                    raise FormatError(f"missing or non-string field {field_name!r}",
                                      path=nodes_path, line=line_no)
            node = Node(
                id=data["id"],
                kind=_parse_enum(NodeKind, data["kind"], "kind", nodes_path, line_no),
                text=data["text"],
                polarity=_parse_enum(Polarity, data.get("polarity"), "polarity", nodes_path, line_no),
                topic=_parse_enum(Topic, data.get("topic"), "topic", nodes_path, line_no),
                status=_parse_enum(NodeStatus, data["status"], "status", nodes_path, line_no),
                source=_parse_enum(NodeSource, data["source"], "source", nodes_path, line_no),
            )
            if node.id in graph.nodes:
                raise FormatError(f"duplicate node id {node.id}", path=nodes_path, line=line_no)
            problems = node.check()
            if problems:
                raise FormatError(f"invalid node: {problems[0][1]}", path=nodes_path, line=line_no)
            graph._register(node, scope_map.get(node.id, ()))
            graph._sync_counter(node.id)

    for line_no, data in enumerate(raw_chain_rows, start=1):
        for field_name in ("chain_id", "situation", "clue", "thought", "action",
                           "emotion", "polarity"):
            if not isinstance(data.get(field_name), str):
                raise FormatError(f"missing or non-string field {field_name!r}",
                                  path=chains_path, line=line_no)
        chain = CognitiveChain(
            chain_id=data["chain_id"],
            situation=data["situation"],
            clue=data["clue"],
            thought=data["thought"],
            action=data["action"],
            emotion=_parse_enum(EmotionCategory, data["emotion"], "emotion", chains_path, line_no),
            polarity=_parse_enum(Polarity, data["polarity"], "polarity", chains_path, line_no),
        )
        report = validate_chain(chain, graph.nodes.get)
        if not report.ok:
            raise FormatError(f"invalid chain: {report.violations[0][1]}",
                              path=chains_path, line=line_no)
        if chain.chain_id in graph.chains:
            raise FormatError(f"duplicate chain id {chain.chain_id}",
                              path=chains_path, line=line_no)
        graph.chains[chain.chain_id] = chain
        graph._chain_keys[(chain.situation, chain.clue, chain.thought,
                           chain.action, chain.emotion)] = chain.chain_id
        graph._chains_by_situation.setdefault(chain.situation, []).append(chain.chain_id)
        graph._sync_counter(chain.chain_id)

    for kind in NodeKind:
        value = meta.get("raw_counts", {}).get(kind.value)
        if isinstance(value, int) and value >= 0:
            graph.raw_counts[kind] = value
    for prefix, value in meta.get("counters", {}).items():
        if prefix in graph._counters and isinstance(value, int):
            graph._counters[prefix] = max(graph._counters[prefix], value)
    return graph
