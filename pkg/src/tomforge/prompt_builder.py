"""Few-shot prompt construction and control-token sample encoding.

Prompt templates live in ``data/prompt_templates.json`` so that the
demonstration sets can be swapped without touching code. Rendering is a pure
function of (template, slot values); the same inputs always produce the same
bytes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Mapping, Optional

from .chain_model import NodeKind, Polarity, Topic, normalize_emotion
from .errors import EmptyInput, FormatError, InvalidFieldText, MalformedEncoding, MissingField
from .task_builder import TaskKind

_TEMPLATE_RESOURCE = "data/prompt_templates.json"

_LINE_COUNTS = {
    NodeKind.SITUATION: 6,
    NodeKind.THOUGHT: 5,
    NodeKind.CLUE: 5,
    NodeKind.ACTION: 5,
    NodeKind.EMOTION: 20,
}

_SLOT_RE = re.compile(r"\{([a-z_]+)\}")
_ALLOWED_SLOTS = {"event", "situation", "thought", "clue"}

_TOKEN_RE = re.compile(r"\[(Pos|Neg)(Clue|Thought|Action|Emotion)([123])\]")

_TOKEN_WORD = {
    TaskKind.CLUE_GEN: "Clue",
    TaskKind.THOUGHT_GEN: "Thought",
    TaskKind.ACTION_GEN: "Action",
    TaskKind.EMOTION_CLS: "Emotion",
}
_TASK_OF_WORD = {word: task for task, word in _TOKEN_WORD.items()}

# token kind that marks the second input field of each two-field task
_CONTEXT_WORD = {
    TaskKind.THOUGHT_GEN: "Clue",
    TaskKind.ACTION_GEN: "Thought",
    TaskKind.EMOTION_CLS: "Thought",
}

_INPUT_FIELDS = {
    TaskKind.CLUE_GEN: ("situation",),
    TaskKind.THOUGHT_GEN: ("situation", "clue"),
    TaskKind.ACTION_GEN: ("situation", "thought"),
    TaskKind.EMOTION_CLS: ("situation", "thought"),
}

_TARGET_FIELD = {
    TaskKind.CLUE_GEN: "clue",
    TaskKind.THOUGHT_GEN: "thought",
    TaskKind.ACTION_GEN: "action",
    TaskKind.EMOTION_CLS: "emotion",
}


@dataclass(frozen=True)
class PromptTemplate:
    kind: NodeKind
    polarity: Optional[Polarity]
    topic: Optional[Topic]
    lines: tuple[str, ...]

    def render(self, **slots: str) -> str:
        return "\n".join(line.format_map(_SlotMap(slots)) for line in self.lines)


@dataclass(frozen=True)
class ControlToken:
    task: TaskKind
    polarity: Polarity
    index: int

    def __post_init__(self):
        if self.index not in (1, 2, 3):
            raise ValueError(f"token index must be 1, 2 or 3, got {self.index}")

    def render(self) -> str:
        prefix = "Pos" if self.polarity is Polarity.POSITIVE else "Neg"
        return f"[{prefix}{_TOKEN_WORD[self.task]}{self.index}]"


@dataclass(frozen=True)
class EncodedSample:
    input_text: str
    target_text: str
    task: TaskKind
    polarity: Polarity


class _SlotMap(dict):
    def __missing__(self, key):
        raise MissingField(f"prompt slot {{{key}}} has no value")


def _validate_lines(name: str, lines: list, expected: int) -> tuple[str, ...]:
    if not isinstance(lines, list) or len(lines) != expected:
        raise FormatError(f"template {name} must have {expected} lines, got "
                          f"{len(lines) if isinstance(lines, list) else type(lines).__name__}")
    for line in lines:
        stripped = _SLOT_RE.sub("", line)
        if "{" in stripped or "}" in stripped:
            raise FormatError(f"template {name} contains a stray brace: {line!r}")
        for slot in _SLOT_RE.findall(line):
            if slot not in _ALLOWED_SLOTS:
                raise FormatError(f"template {name} uses unknown slot {{{slot}}}")
    return tuple(lines)


@lru_cache(maxsize=1)
def load_templates() -> dict:
    """Parse and validate the shipped template file.

    Returns a mapping with one PromptTemplate per (kind, polarity/topic)
    plus the raw two-line test prompt table under "test_prompts".
    """
    raw = json.loads(resources.files("tomforge").joinpath(_TEMPLATE_RESOURCE).read_text("utf-8"))
    templates: dict = {"test_prompts": {}}

    for topic in Topic:
        lines = raw.get("situation", {}).get(topic.value)
        if lines is None:
            raise FormatError(f"situation template missing for topic {topic.value}")
        templates[(NodeKind.SITUATION, topic)] = PromptTemplate(
            NodeKind.SITUATION, None, topic,
            _validate_lines(f"situation/{topic.value}", lines, _LINE_COUNTS[NodeKind.SITUATION]))

    for kind, key in ((NodeKind.THOUGHT, "thought"), (NodeKind.CLUE, "clue"),
                      (NodeKind.ACTION, "action"), (NodeKind.EMOTION, "emotion")):
        for polarity in Polarity:
            lines = raw.get(key, {}).get(polarity.value)
            if lines is None:
                raise FormatError(f"{key} template missing for polarity {polarity.value}")
            templates[(kind, polarity)] = PromptTemplate(
                kind, polarity, None,
                _validate_lines(f"{key}/{polarity.value}", lines, _LINE_COUNTS[kind]))

    for task in TaskKind:
        for polarity in Polarity:
            lines = raw.get("test_prompts", {}).get(task.value, {}).get(polarity.value)
            if lines is None:
                raise FormatError(f"test prompt missing for {task.value}/{polarity.value}")
            templates["test_prompts"][(task, polarity)] = _validate_lines(
                f"test/{task.value}/{polarity.value}", lines, 2)
    return templates


def _require(name: str, value: str) -> str:
    if not isinstance(value, str) or not value.strip():
        raise EmptyInput(f"{name} must be a non-empty string")
    return value


def build_situation_prompt(topic: Topic, event: str) -> str:
    """Six-line rewriting prompt: instruction, four topic demonstrations,
    and the event slotted into the query line."""
    _require("event", event)
    template = load_templates()[(NodeKind.SITUATION, Topic(topic))]
    return template.render(event=event)


def build_thought_prompt(situation: str, polarity: Polarity) -> str:
    _require("situation", situation)
    template = load_templates()[(NodeKind.THOUGHT, Polarity(polarity))]
    return template.render(situation=situation)


def build_clue_prompt(situation: str, thought: str, polarity: Polarity) -> str:
    _require("situation", situation)
    _require("thought", thought)
    template = load_templates()[(NodeKind.CLUE, Polarity(polarity))]
    return template.render(situation=situation, thought=thought)


def build_action_prompt(situation: str, thought: str, polarity: Polarity) -> str:
    _require("situation", situation)
    _require("thought", thought)
    template = load_templates()[(NodeKind.ACTION, Polarity(polarity))]
    return template.render(situation=situation, thought=thought)


def build_emotion_prompt(situation: str, thought: str, polarity: Polarity) -> str:
    """Twenty-line QA prompt; the choice line carries the three categories
    of the requested polarity and the last line is an open "Answer:"."""
    _require("situation", situation)
    _require("thought", thought)
    template = load_templates()[(NodeKind.EMOTION, Polarity(polarity))]
    return template.render(situation=situation, thought=thought)


def _check_field(name: str, value) -> str:
    if not isinstance(value, str) or not value:
        raise MissingField(f"field {name!r} is missing or empty")
    if "[" in value or "]" in value:
        raise InvalidFieldText(f"field {name!r} must not contain square brackets")
    if value != value.strip():
        raise InvalidFieldText(f"field {name!r} must not have leading or trailing whitespace")
    return value


def build_encoded_input(task: TaskKind, polarity: Polarity, fields: Mapping[str, str],
                        token_index: int) -> str:
    """Render the input side of the control-token wire format.

    The task's context fields are interleaved with control tokens and the
    line always ends with the output-kind token. Field text is rejected if
    it could break the encoding (brackets, edge whitespace).
    """
    task = TaskKind(task)
    polarity = Polarity(polarity)
    for name in _INPUT_FIELDS[task]:
        if name not in fields:
            raise MissingField(f"{task.value} requires field {name!r}")

    out_token = ControlToken(task, polarity, token_index).render()
    situation = _check_field("situation", fields["situation"])
    if task is TaskKind.CLUE_GEN:
        return f"{situation} {out_token}"
    context_name = _INPUT_FIELDS[task][1]
    context = _check_field(context_name, fields[context_name])
    mid_token = ControlToken(_TASK_OF_WORD[_CONTEXT_WORD[task]], polarity,
                             token_index).render()
    return f"{situation} {mid_token} {context} {out_token}"


def encode_training_sample(task: TaskKind, polarity: Polarity, fields: Mapping[str, str],
                           token_index: int) -> EncodedSample:
    """Render one supervised sample: encoded input plus bare target text."""
    task = TaskKind(task)
    polarity = Polarity(polarity)
    expected = set(_INPUT_FIELDS[task]) | {_TARGET_FIELD[task]}
    extra = set(fields) - expected
    if extra:
        raise MissingField(f"unexpected fields for {task.value}: {sorted(extra)}")
    target_name = _TARGET_FIELD[task]
    if target_name not in fields:
        raise MissingField(f"{task.value} requires field {target_name!r}")
    input_text = build_encoded_input(task, polarity, fields, token_index)

    if task is TaskKind.EMOTION_CLS:
        target = normalize_emotion(fields[target_name]).value
    else:
        target = _check_field(target_name, fields[target_name])
    return EncodedSample(input_text=input_text, target_text=target, task=task, polarity=polarity)


def _field_between(segment: str, name: str, leading_space: bool) -> str:
    """Recover a field from the text between control tokens.

    Encoded fields are joined with single spaces, so a context segment looks
    like " field " and the leading situation segment like "field ".
    """
    if leading_space:
        if not segment.startswith(" "):
            raise MalformedEncoding(f"missing separator before {name}")
        segment = segment[1:]
    if not segment.endswith(" "):
        raise MalformedEncoding(f"missing separator after {name}")
    inner = segment[:-1]
    if not inner or inner != inner.strip():
        raise MalformedEncoding(f"{name} text is empty or badly padded")
    return inner


def parse_encoded_input(text: str) -> tuple[TaskKind, Polarity, int, dict[str, str]]:
    """Invert encode_training_sample's input side.

    Accepts only well-formed encodings: one or two control tokens agreeing
    on polarity and index, the last token terminating the string, and no
    stray brackets in field text.
    """
    if not isinstance(text, str) or not text:
        raise MalformedEncoding("empty input")
    tokens = list(_TOKEN_RE.finditer(text))
    if not tokens:
        raise MalformedEncoding("no control token found")
    if len(tokens) > 2:
        raise MalformedEncoding(f"expected at most 2 control tokens, found {len(tokens)}")

    outside = _TOKEN_RE.sub("", text)
    if "[" in outside or "]" in outside:
        raise MalformedEncoding("stray bracket outside control tokens")
    last = tokens[-1]
    if last.end() != len(text):
        raise MalformedEncoding("input does not end with a control token")

    polarity = Polarity.POSITIVE if last.group(1) == "Pos" else Polarity.NEGATIVE
    index = int(last.group(3))
    task = _TASK_OF_WORD[last.group(2)]

    if len(tokens) == 1:
        if task is not TaskKind.CLUE_GEN:
            raise MalformedEncoding(f"{task.value} input requires a context field")
        situation = _field_between(text[:last.start()], "situation", leading_space=False)
        return task, polarity, index, {"situation": situation}

    first = tokens[0]
    if task is TaskKind.CLUE_GEN:
        raise MalformedEncoding("ClueGen input admits a single control token")
    if first.group(2) != _CONTEXT_WORD[task]:
        raise MalformedEncoding(
            f"{task.value} context must be marked [{first.group(1)}{_CONTEXT_WORD[task]}N], "
            f"got {first.group(0)}")
    if first.group(1) != last.group(1) or first.group(3) != last.group(3):
        raise MalformedEncoding("control tokens disagree on polarity or index")

    situation = _field_between(text[:first.start()], "situation", leading_space=False)
    context_name = _INPUT_FIELDS[task][1]
    context = _field_between(text[first.end():last.start()], context_name, leading_space=True)
    return task, polarity, index, {"situation": situation, context_name: context}


def build_test_prompt(task: TaskKind, polarity: Polarity, fields: Mapping[str, str]) -> str:
    """Two-line zero-shot prompt for raw language model inference."""
    task = TaskKind(task)
    polarity = Polarity(polarity)
    for name in _INPUT_FIELDS[task]:
        if name not in fields or not str(fields[name]).strip():
            raise MissingField(f"{task.value} test prompt requires field {name!r}")
    lines = load_templates()["test_prompts"][(task, polarity)]
    slots = {name: fields[name] for name in _INPUT_FIELDS[task]}
    return "\n".join(line.format_map(_SlotMap(slots)) for line in lines)
