"""Chain generation and similarity-linked lookup."""

import pytest

from tomforge import llm_backend, prompt_builder
from tomforge.chain_model import (
    CognitiveChain,
    EmotionCategory,
    NEGATIVE_EMOTIONS,
    POSITIVE_EMOTIONS,
    Node,
    NodeKind,
    NodeSource,
    NodeStatus,
    Polarity,
    Topic,
    validate_chain,
)
from tomforge.errors import (
    DomainError,
    EmotionUnresolvable,
    EmptyCompletion,
    EmptyInput,
    RateLimited,
    StageFailure,
)
from tomforge.graph_store import Graph
from tomforge import inference_pipeline as ip
from tomforge.task_builder import TaskKind


class RawMock(llm_backend.MockBackend):
    """Same deterministic behavior, but advertises no control-token support
    so the pipeline falls back to the two-line zero-shot prompts."""

    supports_control_tokens = False


class CountingBackend:
    def __init__(self, inner):
        self.inner = inner
        self.calls = 0
        self.prompts = []
        self.supports_control_tokens = getattr(inner, "supports_control_tokens", False)

    def generate(self, request):
        self.calls += 1
        self.prompts.append(request.prompt)
        return self.inner.generate(request)


class ScriptedBackend:
    supports_control_tokens = False

    def __init__(self, replies, error=None):
        self.replies = list(replies)
        self.error = error

    def generate(self, request):
        if self.error is not None:
            raise self.error
        return llm_backend.GenerationResult(
            completions=(self.replies.pop(0),), backend="scripted", latency=0.0)


def accepted(kind, text, polarity=None, topic=None):
    return Node(id="", kind=kind, text=text, polarity=polarity, topic=topic,
                status=NodeStatus.ACCEPTED, source=NodeSource.LLM_GENERATED)


def stored_graph():
    """One fully chained situation plus a vocabulary-disjoint second one.

    The second situation keeps the similarity index meaningful: with a
    single document every token's idf is zero and even an exact-text
    query scores 0.0.
    """
    g = Graph()
    s = g.add_node(accepted(NodeKind.SITUATION, "my final exam is tomorrow",
                            topic=Topic.SCHOOL))
    g.add_node(accepted(NodeKind.SITUATION, "a landlord raised our rent again",
                        topic=Topic.ORDINARY_LIFE))
    for polarity, clue, thought, action, emotion in [
            (Polarity.NEGATIVE, "I did not study", "I will fail",
             "I cram all night", EmotionCategory.FEARFUL),
            (Polarity.POSITIVE, "I prepared well", "I will do fine",
             "I sleep early", EmotionCategory.JOYFUL)]:
        c = g.add_node(accepted(NodeKind.CLUE, clue, polarity), (s,))
        t = g.add_node(accepted(NodeKind.THOUGHT, thought, polarity), (s,))
        a = g.add_node(accepted(NodeKind.ACTION, action, polarity), (s, t))
        g.add_node(accepted(NodeKind.EMOTION, emotion.value, polarity), (s, t))
        g.insert_chain(CognitiveChain(chain_id="", situation=s, clue=c, thought=t,
                                      action=a, emotion=emotion, polarity=polarity))
    return g, s


class TestConfig:
    def test_defaults(self):
        config = ip.InferenceConfig()
        assert config.similarity_threshold == 0.35
        assert config.emotion_mode is ip.EmotionMode.CONSTRAINED_CHOICE
        assert config.token_index == 1
        assert config.chains_per_polarity == 1

    def test_mode_accepts_strings(self):
        config = ip.InferenceConfig(emotion_mode="NearestLabel")
        assert config.emotion_mode is ip.EmotionMode.NEAREST_LABEL

    @pytest.mark.parametrize("value", [-0.1, 1.5])
    def test_threshold_bounds(self, value):
        with pytest.raises(DomainError):
            ip.InferenceConfig(similarity_threshold=value)

    def test_token_index_bounds(self):
        with pytest.raises(DomainError):
            ip.InferenceConfig(token_index=0)

    def test_chain_count_bounds(self):
        with pytest.raises(DomainError):
            ip.InferenceConfig(chains_per_polarity=0)


class TestEmotionResolution:
    def test_constrained_parses_canonical(self):
        got = ip._resolve_emotion("Sad", Polarity.NEGATIVE,
                                  ip.EmotionMode.CONSTRAINED_CHOICE)
        assert got is EmotionCategory.SAD

    def test_constrained_tolerates_trailing_punctuation(self):
        got = ip._resolve_emotion("surprised.", Polarity.POSITIVE,
                                  ip.EmotionMode.CONSTRAINED_CHOICE)
        assert got is EmotionCategory.SURPRISE

    def test_constrained_rejects_unknown_words(self):
        with pytest.raises(EmotionUnresolvable):
            ip._resolve_emotion("ecstatic", Polarity.POSITIVE,
                                ip.EmotionMode.CONSTRAINED_CHOICE)

    def test_constrained_rejects_wrong_polarity(self):
        with pytest.raises(EmotionUnresolvable):
            ip._resolve_emotion("Love", Polarity.NEGATIVE,
                                ip.EmotionMode.CONSTRAINED_CHOICE)

    def test_nearest_finds_embedded_label(self):
        got = ip._resolve_emotion("I would feel really sad about that",
                                  Polarity.NEGATIVE, ip.EmotionMode.NEAREST_LABEL)
        assert got is EmotionCategory.SAD

    def test_nearest_prefers_earliest_occurrence(self):
        got = ip._resolve_emotion("angry at first, then just sad",
                                  Polarity.NEGATIVE, ip.EmotionMode.NEAREST_LABEL)
        assert got is EmotionCategory.ANGRY

    def test_nearest_is_case_insensitive(self):
        got = ip._resolve_emotion("FEARFUL, honestly", Polarity.NEGATIVE,
                                  ip.EmotionMode.NEAREST_LABEL)
        assert got is EmotionCategory.FEARFUL

    def test_nearest_fails_on_adversarial_reply(self):
        with pytest.raises(EmotionUnresolvable):
            ip._resolve_emotion("ecstatic", Polarity.POSITIVE,
                                ip.EmotionMode.NEAREST_LABEL)


class TestInferChain:
    def test_deterministic_for_fixed_seed(self):
        backend = llm_backend.MockBackend(seed=4)
        first = ip.infer_chain("my interview is on monday", Polarity.NEGATIVE, backend)
        second = ip.infer_chain("my interview is on monday", Polarity.NEGATIVE, backend)
        assert first == second

    def test_stage_order_and_provenance(self):
        backend = CountingBackend(llm_backend.MockBackend(seed=4))
        inferred = ip.infer_chain("my interview is on monday",
                                  Polarity.NEGATIVE, backend)
        assert [p.stage for p in inferred.provenance] == [
            "clue", "thought", "action", "emotion"]
        assert backend.calls == 4
        assert len({p.prompt_sha256 for p in inferred.provenance}) == 4
        assert all(p.backend == "mock" for p in inferred.provenance)
        assert inferred.mode is ip.ChainMode.GENERATED

    def test_control_token_prompts_used_when_supported(self):
        backend = CountingBackend(llm_backend.MockBackend(seed=4))
        situation = "my interview is on monday"
        ip.infer_chain(situation, Polarity.NEGATIVE, backend)
        expected_first = prompt_builder.build_encoded_input(
            TaskKind.CLUE_GEN, Polarity.NEGATIVE, {"situation": situation}, 1)
        assert backend.prompts[0] == expected_first
        assert backend.prompts[0].endswith("[NegClue1]")

    def test_zero_shot_prompts_for_raw_models(self):
        backend = CountingBackend(RawMock(seed=4))
        situation = "my interview is on monday"
        inferred = ip.infer_chain(situation, Polarity.NEGATIVE, backend)
        expected_first = prompt_builder.build_test_prompt(
            TaskKind.CLUE_GEN, Polarity.NEGATIVE, {"situation": situation})
        assert backend.prompts[0] == expected_first
        assert inferred.chain.emotion in NEGATIVE_EMOTIONS

    def test_token_index_flows_into_prompts(self):
        backend = CountingBackend(llm_backend.MockBackend(seed=4))
        config = ip.InferenceConfig(token_index=3)
        ip.infer_chain("my interview is on monday", Polarity.NEGATIVE,
                       backend, config)
        assert backend.prompts[0].endswith("[NegClue3]")

    def test_stage_output_feeds_next_stage(self):
        backend = CountingBackend(llm_backend.MockBackend(seed=4))
        inferred = ip.infer_chain("my interview is on monday",
                                  Polarity.NEGATIVE, backend)
        clue_text = inferred.nodes["q-clue"].text
        thought_text = inferred.nodes["q-thought"].text
        assert clue_text in backend.prompts[1]
        assert thought_text in backend.prompts[2]
        assert thought_text in backend.prompts[3]

    @pytest.mark.parametrize("polarity,allowed", [
        (Polarity.NEGATIVE, NEGATIVE_EMOTIONS),
        (Polarity.POSITIVE, POSITIVE_EMOTIONS)])
    def test_emotion_respects_polarity(self, polarity, allowed):
        for seed in range(10):
            inferred = ip.infer_chain("my parcel arrives today", polarity,
                                      llm_backend.MockBackend(seed=seed))
            assert inferred.chain.emotion in allowed

    def test_chains_validate_across_seeds_and_backends(self):
        for seed in range(15):
            for backend in (llm_backend.MockBackend(seed=seed), RawMock(seed=seed)):
                for polarity in Polarity:
                    inferred = ip.infer_chain("the neighbors invited me over",
                                              polarity, backend)
                    report = validate_chain(inferred.chain, inferred.nodes.get)
                    assert report.ok, report.violations

    def test_empty_situation_rejected(self):
        with pytest.raises(EmptyInput):
            ip.infer_chain("   ", Polarity.NEGATIVE, llm_backend.MockBackend())

    def test_backend_error_carries_stage(self):
        backend = ScriptedBackend([], error=RateLimited("slow down"))
        with pytest.raises(StageFailure) as exc_info:
            ip.infer_chain("my interview is on monday", Polarity.NEGATIVE, backend)
        assert exc_info.value.stage == "clue"

    def test_empty_completion_fails_the_stage(self):
        backend = ScriptedBackend([], error=EmptyCompletion("blank"))
        with pytest.raises(StageFailure):
            ip.infer_chain("my interview is on monday", Polarity.NEGATIVE, backend)

    def test_scripted_zero_shot_chain(self):
        backend = ScriptedBackend(["I have not rehearsed at all",
                                   "I will freeze up in the interview",
                                   "I rehearse my answers in the mirror",
                                   "mostly fearful, a little sad"])
        config = ip.InferenceConfig(emotion_mode=ip.EmotionMode.NEAREST_LABEL)
        inferred = ip.infer_chain("my interview is on monday", Polarity.NEGATIVE,
                                  backend, config)
        assert inferred.chain.emotion is EmotionCategory.FEARFUL
        assert inferred.nodes["q-clue"].text == "I have not rehearsed at all"
        payload = inferred.to_dict()
        assert payload["mode"] == "Generated"
        assert payload["emotion"] == "Fearful"
        assert len(payload["provenance"]) == 4


class TestLookupOrInfer:
    def test_exact_match_links_without_backend_calls(self):
        graph, sid = stored_graph()
        backend = CountingBackend(llm_backend.MockBackend())
        results = ip.lookup_or_infer(graph, "my final exam is tomorrow",
                                     Polarity.NEGATIVE, backend)
        assert backend.calls == 0
        assert len(results) == 1
        linked = results[0]
        assert linked.mode is ip.ChainMode.LINKED
        assert linked.matched_situation == sid
        assert linked.similarity == pytest.approx(1.0)
        assert linked.chain.polarity is Polarity.NEGATIVE
        assert linked.provenance == ()

    def test_linked_chains_filter_by_polarity(self):
        graph, _ = stored_graph()
        backend = CountingBackend(llm_backend.MockBackend())
        results = ip.lookup_or_infer(graph, "my final exam is tomorrow",
                                     Polarity.POSITIVE, backend)
        assert backend.calls == 0
        assert [r.chain.emotion for r in results] == [EmotionCategory.JOYFUL]

    def test_dissimilar_query_generates(self):
        graph, _ = stored_graph()
        backend = CountingBackend(llm_backend.MockBackend())
        results = ip.lookup_or_infer(graph, "the ferry to the island departs",
                                     Polarity.NEGATIVE, backend)
        assert backend.calls == 4
        assert [r.mode for r in results] == [ip.ChainMode.GENERATED]

    def test_threshold_zero_always_links_nonempty_graph(self):
        graph, sid = stored_graph()
        backend = CountingBackend(llm_backend.MockBackend())
        config = ip.InferenceConfig(similarity_threshold=0.0)
        results = ip.lookup_or_infer(graph, "ferry departs at dawn",
                                     Polarity.NEGATIVE, backend, config)
        assert backend.calls == 0
        assert len(results) == 1
        assert all(r.mode is ip.ChainMode.LINKED for r in results)
        assert all(r.matched_situation == sid for r in results)

    def test_empty_graph_generates(self):
        backend = CountingBackend(llm_backend.MockBackend())
        results = ip.lookup_or_infer(Graph(), "my final exam is tomorrow",
                                     Polarity.NEGATIVE, backend)
        assert results[0].mode is ip.ChainMode.GENERATED
        assert backend.calls == 4

    def test_missing_graph_generates(self):
        backend = CountingBackend(llm_backend.MockBackend())
        results = ip.lookup_or_infer(None, "my final exam is tomorrow",
                                     Polarity.NEGATIVE, backend)
        assert results[0].mode is ip.ChainMode.GENERATED

    def test_requested_chain_count(self):
        backend = CountingBackend(llm_backend.MockBackend())
        config = ip.InferenceConfig(chains_per_polarity=3)
        results = ip.lookup_or_infer(None, "my final exam is tomorrow",
                                     Polarity.NEGATIVE, backend, config)
        assert len(results) == 3
        assert backend.calls == 12

    def test_linked_nodes_come_from_the_graph(self):
        graph, _ = stored_graph()
        results = ip.lookup_or_infer(graph, "my final exam is tomorrow",
                                     Polarity.NEGATIVE,
                                     CountingBackend(llm_backend.MockBackend()))
        linked = results[0]
        report = validate_chain(linked.chain, linked.nodes.get)
        assert report.ok
        assert linked.nodes[linked.chain.clue].text == "I did not study"
