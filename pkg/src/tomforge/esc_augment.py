"""Augment support-dialogue transcripts with generated keyword hints.

A dialogue arrives with a situation and its turn history. The latest user
utterance is treated as an observed clue, one thought is generated per
polarity, one action per thought, and the verbs and nouns found in the
generated texts are appended to the serialized history as a compact hint
for a downstream response model.
"""

import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

from . import llm_backend, prompt_builder
from .chain_model import Polarity
from .errors import (
    DomainError,
    EmptyInput,
    FormatError,
    NoUserTurn,
    StageFailure,
    TomforgeError,
)
from .task_builder import TaskKind


class Speaker(Enum):
    USER = "User"
    SYSTEM = "System"

    def __str__(self) -> str:
        return self.value


class KeywordSource(str, Enum):
    """Which generated texts feed the keyword extractor."""

    THOUGHTS = "Thoughts"
    ACTIONS = "Actions"


@dataclass(frozen=True)
class Turn:
    speaker: Speaker
    text: str

    def __post_init__(self):
        object.__setattr__(self, "speaker", Speaker(self.speaker))


@dataclass(frozen=True)
class Dialogue:
    situation: str
    turns: tuple[Turn, ...]

    def __post_init__(self):
        if not self.situation or not self.situation.strip():
            raise EmptyInput("dialogue situation is empty")
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.turns:
            raise EmptyInput("dialogue has no turns")


@dataclass(frozen=True)
class AugmentConfig:
    keyword_source: KeywordSource = KeywordSource.THOUGHTS
    token_index: int = 1

    def __post_init__(self):
        object.__setattr__(self, "keyword_source",
                           KeywordSource(self.keyword_source))
        if self.token_index not in (1, 2, 3):
            raise DomainError(
                f"token_index must be 1, 2 or 3, got {self.token_index}")


@dataclass(frozen=True)
class AugmentedContext:
    history: str
    keywords: tuple[str, ...]
    enhanced_context: str


_WORD_RE = re.compile(r"[a-z]+(?:'[a-z]+)?")

_STOPWORDS = frozenset("""
    a an the and or but nor if then else because so as than that this these
    those there here when where while why how what which who whom whose
    i me my mine myself we us our ours ourselves you your yours yourself
    yourselves he him his himself she her hers herself it its itself they
    them their theirs themselves someone somebody anyone anybody everyone
    everybody nothing something anything everything
    at by for from in into of off on onto to with without within about
    above below over under between among through during before after
    again further once up down out around away back behind beyond
    against toward towards upon near per via
    not no never only also just even still yet too very quite rather
    really almost already soon now ever often sometimes usually always
    maybe perhaps please okay ok oh well
    i'm i'll i've i'd it's that's there's what's let's you're you'll
    we're we'll they're he's she's
""".split())

_AUXILIARIES = frozenset("""
    am is are was were be been being have has had having do does did doing
    will would shall should can could may might must ought need gonna
    won't wouldn't shan't shouldn't can't couldn't mightn't mustn't
    don't doesn't didn't isn't aren't wasn't weren't haven't hasn't hadn't
""".split())

_ADJECTIVES = frozenset("""
    new old good bad great terrible big small little large long short high
    low early late last next first second third same different difficult
    easy hard happy sad glad sorry nice fine okay sure certain whole full
    empty young best worst better worse able unable important serious
    strange awful wonderful beautiful ugly right wrong true false real
    proud angry afraid nervous anxious upset lonely tired busy free ready
""".split())

_VERBS = frozenset("""
    accept accomplish ache achieve act admit advise agree answer apologize
    appear apply argue arrive ask assume attend avoid bake become begin
    believe blame borrow break breathe bring build buy call calm care carry
    catch celebrate change chat check cheer choose clean climb close come
    comfort complain complete confront congratulate consider continue cook
    cope cost count cram cry dance decide deliver describe deserve die
    discuss dream dress drink drive earn eat encourage end enjoy exercise
    expect explain express fail fall fear feel fight find finish fix fly
    focus follow forget forgive gain get give go graduate grow handle
    happen hate heal hear help hide hit hold hope hug hurry hurt imagine
    improve invite join jump keep know laugh learn leave lend let lie like
    listen live look lose love make manage marry mean meet mention mess
    mind miss move need notice offer open order pack panic pass pay phone
    plan play practice prepare promise propose pull push put quit reach
    read realize receive recover reflect refuse regret rehearse relax
    remember remind rent repair repeat reply rest return ride rise run
    rush save say see seem sell send share shop shout show sing sit sleep
    smile speak spend spill stand start stay stop struggle study succeed
    suffer suggest support take talk teach tell text thank think throw
    travel treat trust try turn understand visit wait wake walk want warn
    wash waste watch wear win wish wonder work worry write yell
""".split())

_NOUN_SUFFIXES = ("tion", "sion", "ment", "ness", "ity", "ship", "ance", "ence")


class HeuristicTagger:
    """Rule-based word classifier used when no real tagger is plugged in.

    Tokens fall through a fixed cascade: closed-class stopwords, then
    auxiliaries and modals, then common adjectives, then a lexicon of
    frequent verbs, then noun-forming suffixes, then participle endings,
    and anything left is called a noun.
    """

    def tag(self, token: str) -> str:
        if token in _STOPWORDS:
            return "stop"
        if token in _AUXILIARIES:
            return "auxiliary"
        if token in _ADJECTIVES:
            return "adjective"
        if token in _VERBS:
            return "verb"
        if token.endswith(_NOUN_SUFFIXES):
            return "noun"
        if token.endswith("s") and not token.endswith("ss"):
            return "noun"
        if len(token) > 4 and (token.endswith("ing") or token.endswith("ed")):
            return "verb"
        return "noun"


def extract_keywords(texts: Iterable[str], tagger=None) -> list[str]:
    """Collect verb and noun tokens across texts.

    Tokens are case-folded, kept in first-occurrence order, and
    deduplicated; possessive 's is stripped before tagging. Any object
    with a ``tag(token) -> str`` method may replace the built-in
    heuristic tagger.
    """
    if tagger is None:
        tagger = HeuristicTagger()
    seen = set()
    keywords = []
    for text in texts:
        for token in _WORD_RE.findall(text.casefold()):
            if token.endswith("'s"):
                token = token[:-2]
            if not token or token in seen:
                continue
            seen.add(token)
            if tagger.tag(token) in ("verb", "noun"):
                keywords.append(token)
    return keywords


def serialize_history(dialogue: Dialogue) -> str:
    return "\n".join(f"{turn.speaker.value.upper()}: {turn.text}"
                     for turn in dialogue.turns)


def _latest_user_text(dialogue: Dialogue) -> str:
    for turn in reversed(dialogue.turns):
        if turn.speaker is Speaker.USER:
            return turn.text
    raise NoUserTurn("dialogue has no user turn to treat as a clue")


def _generate(stage: str, task: TaskKind, polarity: Polarity, fields: dict,
              backend, config: AugmentConfig) -> str:
    if getattr(backend, "supports_control_tokens", False):
        prompt = prompt_builder.build_encoded_input(task, polarity, fields,
                                                    config.token_index)
    else:
        prompt = prompt_builder.build_test_prompt(task, polarity, fields)
    request = llm_backend.GenerationRequest(
        prompt=prompt, params=llm_backend.GenerationParams())
    try:
        result = backend.generate(request)
    except TomforgeError as exc:
        raise StageFailure(stage, exc) from exc
    return result.completions[0].strip()


def augment_dialogue(dialogue: Dialogue, backend,
                     config: AugmentConfig = AugmentConfig(),
                     tagger=None) -> AugmentedContext:
    """Append generated verb/noun keywords to the dialogue history.

    The latest user utterance serves as the clue. One thought is
    generated per polarity and one action per thought, four backend
    calls in total; the configured source texts are then mined for
    keywords.
    """
    clue = _latest_user_text(dialogue)
    thoughts = []
    actions = []
    for polarity in Polarity:
        thought = _generate("thought", TaskKind.THOUGHT_GEN, polarity,
                            {"situation": dialogue.situation, "clue": clue},
                            backend, config)
        action = _generate("action", TaskKind.ACTION_GEN, polarity,
                           {"situation": dialogue.situation, "thought": thought},
                           backend, config)
        thoughts.append(thought)
        actions.append(action)
    if config.keyword_source is KeywordSource.THOUGHTS:
        source_texts = thoughts
    else:
        source_texts = actions
    keywords = tuple(extract_keywords(source_texts, tagger))
    history = serialize_history(dialogue)
    if keywords:
        enhanced = history + ", " + ",".join(keywords)
    else:
        enhanced = history
    return AugmentedContext(history=history, keywords=keywords,
                            enhanced_context=enhanced)


def load_dialogues(path) -> list[tuple[str, Dialogue]]:
    """Read dialogues from a JSONL file as (dialogue id, dialogue) pairs.

    Each line holds {"situation": ..., "turns": [{"speaker", "text"}, ...]}
    and may carry an optional "dialogue_id"; lines without one get a
    positional id. Blank lines are ignored.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc

    pairs = []
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{line_no}: not valid JSON") from exc
        if not isinstance(record, dict) or not isinstance(record.get("turns"), list):
            raise FormatError(f"{path}:{line_no}: expected an object with a "
                              f"'turns' list")
        try:
            turns = tuple(
                Turn(speaker=Speaker(str(raw.get("speaker", "")).strip().capitalize()),
                     text=str(raw.get("text", "")))
                for raw in record["turns"])
            dialogue = Dialogue(situation=str(record.get("situation", "")),
                                turns=turns)
        except (ValueError, AttributeError, EmptyInput) as exc:
            raise FormatError(f"{path}:{line_no}: {exc}") from exc
        dialogue_id = str(record.get("dialogue_id") or f"dlg-{len(pairs) + 1:06d}")
        pairs.append((dialogue_id, dialogue))
    if not pairs:
        raise EmptyInput(f"no dialogues found in {path}")
    return pairs


def augment_file(in_path, out_path, backend,
                 config: AugmentConfig = AugmentConfig(), tagger=None) -> int:
    """Augment every dialogue in a JSONL file; returns the count written."""
    pairs = load_dialogues(in_path)
    with open(out_path, "w", encoding="utf-8") as fh:
        for dialogue_id, dialogue in pairs:
            augmented = augment_dialogue(dialogue, backend, config, tagger)
            fh.write(json.dumps({
                "dialogue_id": dialogue_id,
                "keywords": list(augmented.keywords),
                "enhanced_context": augmented.enhanced_context,
            }, ensure_ascii=False) + "\n")
    return len(pairs)
