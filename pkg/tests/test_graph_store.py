import json
import os

import pytest

from tomforge import graph_store as gs
from tomforge.chain_model import (
    CognitiveChain,
    EmotionCategory,
    Node,
    NodeKind,
    NodeSource,
    NodeStatus,
    Polarity,
    Topic,
)
from tomforge.errors import (
    DomainError,
    EmptyGraph,
    FormatError,
    InvariantViolation,
    UnknownSituation,
)


def situation(text, topic=Topic.SCHOOL, status=NodeStatus.ACCEPTED):
    return Node(id="", kind=NodeKind.SITUATION, text=text, topic=topic, status=status)


def child(kind, text, polarity=Polarity.NEGATIVE, status=NodeStatus.ACCEPTED):
    return Node(id="", kind=kind, text=text, polarity=polarity, status=status)


def build_small_graph():
    """One situation with a negative and a positive branch, fully chained."""
    g = gs.Graph()
    sid = g.add_node(situation("my exam is tomorrow"))
    tid = g.add_node(child(NodeKind.THOUGHT, "I will fail"), (sid,))
    cid = g.add_node(child(NodeKind.CLUE, "I did not study"), (sid,))
    aid = g.add_node(child(NodeKind.ACTION, "I cram all night"), (sid, tid))
    g.add_node(child(NodeKind.EMOTION, "Fearful"), (sid, tid))
    tid2 = g.add_node(child(NodeKind.THOUGHT, "I am well prepared", Polarity.POSITIVE), (sid,))
    cid2 = g.add_node(child(NodeKind.CLUE, "my notes are thorough", Polarity.POSITIVE), (sid,))
    aid2 = g.add_node(child(NodeKind.ACTION, "I sleep early", Polarity.POSITIVE), (sid, tid2))
    g.add_node(child(NodeKind.EMOTION, "Joyful", Polarity.POSITIVE), (sid, tid2))
    g.insert_chain(CognitiveChain("", sid, cid, tid, aid, EmotionCategory.FEARFUL,
                                  Polarity.NEGATIVE))
    g.insert_chain(CognitiveChain("", sid, cid2, tid2, aid2, EmotionCategory.JOYFUL,
                                  Polarity.POSITIVE))
    return g, sid


class TestAddNode:
    def test_monotonic_prefixed_ids(self):
        g = gs.Graph()
        first = g.add_node(situation("first"))
        second = g.add_node(situation("second"))
        assert first == "s-000001"
        assert second == "s-000002"
        tid = g.add_node(child(NodeKind.THOUGHT, "a thought"), (first,))
        assert tid == "t-000001"

    def test_reinsert_same_text_is_idempotent(self):
        g = gs.Graph()
        sid = g.add_node(situation("exam day"))
        a = g.add_node(child(NodeKind.CLUE, "I did not study"), (sid,))
        b = g.add_node(child(NodeKind.CLUE, "I did not study"), (sid,))
        assert a == b
        assert sum(1 for n in g.nodes.values() if n.kind is NodeKind.CLUE) == 1

    def test_normalized_text_dedups(self):
        g = gs.Graph()
        sid = g.add_node(situation("exam day"))
        a = g.add_node(child(NodeKind.THOUGHT, "I will fail."), (sid,))
        b = g.add_node(child(NodeKind.THOUGHT, "i  will fail."), (sid,))
        assert a == b

    def test_same_text_different_scope_distinct(self):
        g = gs.Graph()
        s1 = g.add_node(situation("exam day"))
        s2 = g.add_node(situation("interview day"))
        a = g.add_node(child(NodeKind.CLUE, "I am unprepared"), (s1,))
        b = g.add_node(child(NodeKind.CLUE, "I am unprepared"), (s2,))
        assert a != b

    def test_rejected_text_can_return(self):
        g = gs.Graph()
        sid = g.add_node(situation("exam day"))
        a = g.add_node(child(NodeKind.CLUE, "weak clue", status=NodeStatus.REJECTED), (sid,))
        b = g.add_node(child(NodeKind.CLUE, "weak clue"), (sid,))
        assert a != b

    def test_malformed_node_rejected(self):
        g = gs.Graph()
        with pytest.raises(InvariantViolation):
            g.add_node(Node(id="", kind=NodeKind.SITUATION, text="   ", topic=Topic.WORK))
        with pytest.raises(InvariantViolation):
            g.add_node(Node(id="", kind=NodeKind.SITUATION, text="ok", topic=None))

    def test_bad_scope_rejected(self):
        g = gs.Graph()
        sid = g.add_node(situation("exam day"))
        with pytest.raises(InvariantViolation):
            g.add_node(child(NodeKind.CLUE, "clue text"))
        with pytest.raises(InvariantViolation):
            g.add_node(child(NodeKind.ACTION, "act"), (sid,))
        with pytest.raises(InvariantViolation):
            g.add_node(child(NodeKind.CLUE, "clue text"), ("s-999999",))


class TestChains:
    def test_insert_and_query(self):
        g, sid = build_small_graph()
        assert len(g.chains) == 2
        both = g.query_chains(sid)
        assert [c.chain_id for c in both] == ["ch-000001", "ch-000002"]
        negative = g.query_chains(sid, Polarity.NEGATIVE)
        assert len(negative) == 1
        assert negative[0].emotion is EmotionCategory.FEARFUL

    def test_unknown_situation(self):
        g, _ = build_small_graph()
        with pytest.raises(UnknownSituation):
            g.query_chains("s-999999")
        with pytest.raises(UnknownSituation):
            g.query_chains("t-000001")

    def test_invalid_chain_rejected_with_report(self):
        g, sid = build_small_graph()
        bad = CognitiveChain("", sid, "c-000001", "t-000001", "a-000001",
                             EmotionCategory.JOYFUL, Polarity.NEGATIVE)
        with pytest.raises(InvariantViolation) as exc:
            g.insert_chain(bad)
        rules = [rule for rule, _ in exc.value.report]
        assert "emotion-polarity-mismatch" in rules

    def test_duplicate_chain_is_idempotent(self):
        g, sid = build_small_graph()
        again = CognitiveChain("", sid, "c-000001", "t-000001", "a-000001",
                               EmotionCategory.FEARFUL, Polarity.NEGATIVE)
        assert g.insert_chain(again) == "ch-000001"
        assert len(g.chains) == 2

    def test_referential_integrity(self):
        g, _ = build_small_graph()
        for chain in g.chains.values():
            for ref, kind in chain.node_refs():
                assert g.nodes[ref].kind is kind


class TestRetention:
    def test_paper_table_values(self):
        assert gs.retention_rate(1200, 2000) == 0.6
        assert gs.retention_rate(9788, 14400) == 0.6797
        assert gs.retention_rate(21677, 29364) == 0.7382
        assert gs.retention_rate(19875, 29364) == 0.6768

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            gs.retention_rate(1, 0)
        with pytest.raises(DomainError):
            gs.retention_rate(5, 4)
        with pytest.raises(DomainError):
            gs.retention_rate(-1, 4)

    def test_stats_counts_and_retention(self):
        g, _ = build_small_graph()
        g.add_raw_count(NodeKind.THOUGHT, 4)
        stats = g.stats()
        assert stats.final_counts["Thought"] == 2
        assert stats.retention["Thought"] == 0.5
        assert stats.retention["Situation"] is None
        assert stats.chains_total == 2
        assert stats.chains_positive == 1
        assert stats.chains_negative == 1
        assert stats.chains_positive + stats.chains_negative == stats.chains_total


class TestSimilarity:
    def corpus(self):
        g = gs.Graph()
        ids = {}
        for key, text in (("s1", "exam tomorrow"), ("s2", "exam friday"),
                          ("s3", "holiday trip")):
            ids[key] = g.add_node(situation(text))
        return g, ids

    def test_hand_computed_three_docs(self):
        g, ids = self.corpus()
        hits = g.link_similar_situations("exam tomorrow", k=3)
        assert [h.situation_id for h in hits] == [ids["s1"], ids["s2"], ids["s3"]]
        assert hits[0].score == pytest.approx(1.0)
        assert hits[1].score == pytest.approx(0.11988321306398907)
        assert hits[2].score == 0.0

    def test_orthogonal_query(self):
        g, _ = self.corpus()
        hits = g.link_similar_situations("zebra quartz", k=3)
        assert all(h.score == 0.0 for h in hits)

    def test_repeated_token_weighting(self):
        g = gs.Graph()
        d1 = g.add_node(situation("win win"))
        g.add_node(situation("lose"))
        hits = g.link_similar_situations("win lose", k=2)
        by_id = {h.situation_id: h.score for h in hits}
        assert by_id[d1] == pytest.approx(0.7071067811865476)

    def test_identical_situation_text_dedups_to_one(self):
        g = gs.Graph()
        a = g.add_node(situation("same text here", topic=Topic.WORK))
        b = g.add_node(situation("same text here", topic=Topic.SCHOOL))
        assert a == b

    def test_tie_broken_by_id(self):
        # token multisets match, so both vectors (and scores) are identical
        g = gs.Graph()
        a = g.add_node(situation("alpha beta"))
        b = g.add_node(situation("beta alpha"))
        hits = g.link_similar_situations("alpha beta", k=2)
        assert hits[0].score == pytest.approx(hits[1].score)
        assert [h.situation_id for h in hits] == sorted([a, b])

    def test_scores_bounded(self):
        g, _ = self.corpus()
        for query in ("exam", "exam exam exam friday", "trip holiday exam"):
            for hit in g.link_similar_situations(query, k=3):
                assert 0.0 <= hit.score <= 1.0

    def test_empty_graph(self):
        with pytest.raises(EmptyGraph):
            gs.Graph().link_similar_situations("anything", k=1)

    def test_k_validation(self):
        g, _ = self.corpus()
        with pytest.raises(ValueError):
            g.link_similar_situations("exam", k=0)
        assert len(g.link_similar_situations("exam", k=2)) == 2


class TestPersistence:
    def test_round_trip_identity(self, tmp_path):
        g, _ = build_small_graph()
        g.add_raw_count(NodeKind.THOUGHT, 12)
        gs.save(g, str(tmp_path))
        loaded = gs.load(str(tmp_path))
        assert loaded == g
        assert loaded.stats() == g.stats()

    def test_wire_format_keys_in_order(self, tmp_path):
        g, _ = build_small_graph()
        gs.save(g, str(tmp_path))
        first = (tmp_path / "nodes.jsonl").read_text(encoding="utf-8").splitlines()[0]
        assert list(json.loads(first).keys()) == [
            "id", "kind", "text", "polarity", "topic", "status", "source"]
        chain_line = (tmp_path / "chains.jsonl").read_text(encoding="utf-8").splitlines()[0]
        assert list(json.loads(chain_line).keys()) == [
            "chain_id", "situation", "clue", "thought", "action", "emotion", "polarity"]

    def test_lf_and_utf8(self, tmp_path):
        g = gs.Graph()
        g.add_node(situation("café résumé naïve"))
        gs.save(g, str(tmp_path))
        blob = (tmp_path / "nodes.jsonl").read_bytes()
        assert b"\r" not in blob
        assert "café".encode("utf-8") in blob
        loaded = gs.load(str(tmp_path))
        assert next(iter(loaded.nodes.values())).text == "café résumé naïve"

    def test_save_is_deterministic(self, tmp_path):
        g, _ = build_small_graph()
        gs.save(g, str(tmp_path / "a"))
        gs.save(g, str(tmp_path / "b"))
        for name in ("nodes.jsonl", "chains.jsonl", "meta.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_malformed_line_reports_position(self, tmp_path):
        g, _ = build_small_graph()
        gs.save(g, str(tmp_path))
        nodes_file = tmp_path / "nodes.jsonl"
        lines = nodes_file.read_text(encoding="utf-8").splitlines()
        lines[2] = "{not json"
        nodes_file.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(FormatError) as exc:
            gs.load(str(tmp_path))
        assert exc.value.line == 3

    def test_bad_enum_value(self, tmp_path):
        g, _ = build_small_graph()
        gs.save(g, str(tmp_path))
        nodes_file = tmp_path / "nodes.jsonl"
        text = nodes_file.read_text(encoding="utf-8").replace('"Situation"', '"Scenario"', 1)
        nodes_file.write_text(text, encoding="utf-8")
        with pytest.raises(FormatError):
            gs.load(str(tmp_path))

    def test_ids_continue_after_load(self, tmp_path):
        g, _ = build_small_graph()
        gs.save(g, str(tmp_path))
        loaded = gs.load(str(tmp_path))
        new_id = loaded.add_node(situation("a brand new situation"))
        assert new_id == "s-000002"

    def test_dedup_survives_round_trip(self, tmp_path):
        g, sid = build_small_graph()
        gs.save(g, str(tmp_path))
        loaded = gs.load(str(tmp_path))
        again = loaded.add_node(child(NodeKind.CLUE, "I did not study"), (sid,))
        assert again == "c-000001"

    def test_load_without_meta_recovers_scopes_from_chains(self, tmp_path):
        g, sid = build_small_graph()
        gs.save(g, str(tmp_path))
        os.remove(tmp_path / "meta.json")
        loaded = gs.load(str(tmp_path))
        assert loaded.scopes["c-000001"] == (sid,)
        assert loaded.scopes["a-000001"] == (sid, "t-000001")
