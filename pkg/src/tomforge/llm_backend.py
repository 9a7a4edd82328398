"""Text-generation backends: an OpenAI-compatible HTTP client and a
deterministic mock for tests and offline runs.

Both expose ``generate(request) -> GenerationResult`` and can be used from
multiple threads. The HTTP client bounds in-flight requests with a
semaphore and retries transient failures with exponential backoff; the
mock is a pure function of (seed, prompt, completion index).
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

from .chain_model import NodeKind, Polarity
from .errors import (
    BadResponse,
    EmptyCompletion,
    EmptyLexicon,
    RateLimited,
    TransportError,
)

API_KEY_ENV = "TOMFORGE_API_KEY"
DEFAULT_MODEL = "text-davinci-002"

_MULTI_CANDIDATE_KINDS = (NodeKind.CLUE, NodeKind.THOUGHT, NodeKind.ACTION)


@dataclass(frozen=True)
class GenerationParams:
    n: int = 1
    best_of: int = 1
    model: str = DEFAULT_MODEL
    temperature: float = 1.0
    max_tokens: int = 256
    top_p: float = 1.0
    frequency_penalty: float = 0.0
    presence_penalty: float = 0.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.best_of < self.n:
            raise ValueError(f"best_of must be >= n, got {self.best_of} < {self.n}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    params: GenerationParams = field(default_factory=GenerationParams)
    stop: tuple[str, ...] = ("\n",)

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")


@dataclass(frozen=True)
class GenerationResult:
    completions: tuple[str, ...]
    backend: str
    latency: float


def default_params(kind: NodeKind) -> GenerationParams:
    """Per-kind sampling defaults: three candidates for the middle nodes of
    a chain, a single one for situations and emotion labels."""
    kind = NodeKind(kind)
    count = 3 if kind in _MULTI_CANDIDATE_KINDS else 1
    return GenerationParams(n=count, best_of=count)


def _finalize(texts: Sequence[str], stop: Sequence[str], expected: int) -> tuple[str, ...]:
    cleaned = []
    for text in texts:
        for seq in stop:
            cut = text.find(seq)
            if cut >= 0:
                text = text[:cut]
        text = text.strip()
        if not text:
            raise EmptyCompletion("backend returned an empty completion")
        cleaned.append(text)
    if len(cleaned) != expected:
        raise BadResponse(f"expected {expected} completions, got {len(cleaned)}")
    return tuple(cleaned)


def generate(backend, request: GenerationRequest) -> GenerationResult:
    return backend.generate(request)


class HttpBackend:
    """Client for a `/v1/completions` endpoint.

    The credential is read from the TOMFORGE_API_KEY environment variable;
    there is deliberately no way to pass it through configuration files.
    `retries` counts extra attempts after the first, each preceded by an
    exponentially growing delay.
    """

    def __init__(self, endpoint_url: str, *, max_concurrency: int = 4, retries: int = 3,
                 timeout_ms: int = 30000, backoff_base: float = 0.5,
                 label: str = "http", sleep: Callable[[float], None] = time.sleep,
                 supports_control_tokens: bool = False):
        if not endpoint_url:
            raise ValueError("endpoint_url is required")
        self.supports_control_tokens = supports_control_tokens
        url = endpoint_url.rstrip("/")
        if not url.endswith("/completions"):
            url = url + "/v1/completions"
        self.url = url
        self.label = label
        self.retries = max(0, int(retries))
        self.timeout = max(1, int(timeout_ms)) / 1000.0
        self.backoff_base = backoff_base
        self._sleep = sleep
        self._slots = threading.Semaphore(max(1, int(max_concurrency)))

    @classmethod
    def from_config(cls, config: Mapping[str, str], **overrides) -> "HttpBackend":
        kwargs = {}
        if "endpoint_url" not in config:
            raise ValueError("backend config requires endpoint_url")
        for key, cast in (("max_concurrency", int), ("retries", int), ("timeout_ms", int)):
            if key in config:
                kwargs[key] = cast(config[key])
        if "supports_control_tokens" in config:
            kwargs["supports_control_tokens"] = str(
                config["supports_control_tokens"]).strip().lower() in ("1", "true", "yes")
        kwargs.update(overrides)
        return cls(config["endpoint_url"], **kwargs)

    def generate(self, request: GenerationRequest) -> GenerationResult:
        params = request.params
        payload = {
            "prompt": request.prompt,
            "model": params.model,
            "n": params.n,
            "best_of": params.best_of,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "top_p": params.top_p,
            "frequency_penalty": params.frequency_penalty,
            "presence_penalty": params.presence_penalty,
            "stop": list(request.stop),
        }
        started = time.monotonic()
        attempt = 0
        with self._slots:
            while True:
                try:
                    body = self._post(payload)
                    break
                except RateLimited:
                    if attempt >= self.retries:
                        raise
                except TransportError:
                    if attempt >= self.retries:
                        raise
                self._sleep(self.backoff_base * (2 ** attempt))
                attempt += 1

        texts = self._extract(body, params.n)
        completions = _finalize(texts, request.stop, params.n)
        return GenerationResult(completions=completions, backend=self.label,
                                latency=time.monotonic() - started)

    def _post(self, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        data = json.dumps(payload).encode("utf-8")
        req = urllib.request.Request(self.url, data=data, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read()
        except urllib.error.HTTPError as exc:
            if exc.code == 429:
                raise RateLimited(f"rate limited by {self.url}") from exc
            if 500 <= exc.code < 600:
                raise TransportError(f"server error {exc.code} from {self.url}") from exc
            raise BadResponse(f"HTTP {exc.code} from {self.url}") from exc
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise TransportError(f"cannot reach {self.url}: {exc}") from exc
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BadResponse(f"non-JSON response from {self.url}") from exc

    @staticmethod
    def _extract(body: dict, n: int) -> list[str]:
        choices = body.get("choices")
        if not isinstance(choices, list) or not choices:
            raise BadResponse("response has no choices")
        texts: list[tuple[int, str]] = []
        for fallback_index, choice in enumerate(choices):
            if not isinstance(choice, dict) or not isinstance(choice.get("text"), str):
                raise BadResponse("choice entry has no text")
            index = choice.get("index", fallback_index)
            texts.append((index if isinstance(index, int) else fallback_index, choice["text"]))
        texts.sort(key=lambda pair: pair[0])
        return [text for _, text in texts[:n]]


#: generic completion pools keyed by (kind, polarity); situations are
#: polarity-free, emotion pools hold the canonical category names
DEFAULT_LEXICON: dict[tuple[NodeKind, Optional[Polarity]], tuple[str, ...]] = {
    (NodeKind.SITUATION, None): (
        "I will give a presentation at college tomorrow",
        "my manager moved our one-on-one to Friday",
        "my cousin invited me on a road trip next month",
        "I signed up for the evening pottery class",
        "my landlord is coming by to inspect the apartment",
    ),
    (NodeKind.THOUGHT, Polarity.POSITIVE): (
        "I am going to handle this well",
        "people will enjoy having me around",
        "this is my chance to show what I can do",
        "everything is coming together for me",
    ),
    (NodeKind.THOUGHT, Polarity.NEGATIVE): (
        "I will embarrass myself in front of everyone",
        "nothing I do ever works out",
        "they are going to be disappointed in me",
        "something is bound to go wrong",
    ),
    (NodeKind.CLUE, Polarity.POSITIVE): (
        "I have prepared for this for weeks",
        "my friends keep telling me how well I am doing",
        "last time went better than I expected",
        "everyone smiled when I walked in",
    ),
    (NodeKind.CLUE, Polarity.NEGATIVE): (
        "I have never done this before",
        "I barely slept last night",
        "the last attempt ended badly",
        "nobody replied to my messages",
    ),
    (NodeKind.ACTION, Polarity.POSITIVE): (
        "I lay out my clothes the night before",
        "I celebrate with a nice dinner",
        "I call my mom to share the news",
        "I write down a plan for the day",
    ),
    (NodeKind.ACTION, Polarity.NEGATIVE): (
        "I rehearse in front of the mirror again and again",
        "I pace around the room",
        "I ask a friend to double-check everything",
        "I put off opening the email",
    ),
    (NodeKind.EMOTION, Polarity.POSITIVE): ("Joyful", "Love", "Surprise"),
    (NodeKind.EMOTION, Polarity.NEGATIVE): ("Sad", "Angry", "Fearful"),
}

_CONTROL_TOKEN_RE = re.compile(r"\[(Pos|Neg)(Clue|Thought|Action|Emotion)([123])\]")
_CHOICE_LINE_RE = re.compile(r"^Choice\s*:\s*(.+)$", re.MULTILINE)
_CHOOSE_FROM_RE = re.compile(r"Choose one word from (.+?) to describe")

_WORD_OF_KIND = {"Clue": NodeKind.CLUE, "Thought": NodeKind.THOUGHT,
                 "Action": NodeKind.ACTION, "Emotion": NodeKind.EMOTION}

# one demonstration fingerprint per collection template, used to recover the
# polarity of completion prompts that do not name it
_NEGATIVE_FINGERPRINTS = (
    "I haven't given a presentation before",
    "I rehearse in front of the mirror",
    "I feel terrible since I think",
    "feel terrible since I thought",
)
_POSITIVE_FINGERPRINTS = (
    "they clap their hands happily",
    "I take good sleep at night",
    "I feel great since I think",
    "feel great since I thought",
)


class MockBackend:
    """Deterministic stand-in for a completion server.

    Classifies the prompt by shape (control tokens, emotion QA, event
    rewriting, sentence completion), then samples the matching lexicon
    bucket with an offset derived from sha256(seed | prompt). Emotion QA
    prompts always answer with a word from their own choice line.
    """

    supports_control_tokens = True

    def __init__(self, seed: int = 0,
                 lexicon: Optional[Mapping[tuple[NodeKind, Optional[Polarity]], Sequence[str]]] = None,
                 label: str = "mock"):
        self.seed = seed
        self.label = label
        source = DEFAULT_LEXICON if lexicon is None else lexicon
        self._lexicon = {key: tuple(values) for key, values in source.items()}
        required: list[tuple[NodeKind, Optional[Polarity]]] = [(NodeKind.SITUATION, None)]
        for kind in (NodeKind.CLUE, NodeKind.THOUGHT, NodeKind.ACTION, NodeKind.EMOTION):
            required.extend((kind, polarity) for polarity in Polarity)
        for key in required:
            if not self._lexicon.get(key):
                raise EmptyLexicon(f"mock lexicon has no entries for {key[0].value}"
                                   f"/{key[1].value if key[1] else 'any'}")

    def generate(self, request: GenerationRequest) -> GenerationResult:
        pool = self._pool_for(request.prompt)
        base = int.from_bytes(
            hashlib.sha256(f"{self.seed}|{request.prompt}".encode("utf-8")).digest()[:8],
            "big")
        completions = []
        for i in range(request.params.n):
            text = pool[(base + i) % len(pool)]
            if i >= len(pool):
                text = f"{text} ({i // len(pool) + 1})"
            completions.append(text)
        final = _finalize(completions, request.stop, request.params.n)
        return GenerationResult(completions=final, backend=self.label, latency=0.0)

    def _pool_for(self, prompt: str) -> tuple[str, ...]:
        tokens = list(_CONTROL_TOKEN_RE.finditer(prompt))
        if tokens:
            last = tokens[-1]
            polarity = Polarity.POSITIVE if last.group(1) == "Pos" else Polarity.NEGATIVE
            return self._lexicon[(_WORD_OF_KIND[last.group(2)], polarity)]

        chosen = _CHOOSE_FROM_RE.search(prompt)
        choice_lines = _CHOICE_LINE_RE.findall(prompt)
        if chosen or choice_lines:
            raw = chosen.group(1) if chosen else choice_lines[-1]
            words = tuple(word.strip() for word in raw.split(",") if word.strip())
            if not words:
                raise BadResponse("emotion prompt has an empty choice line")
            return words

        if "[Sentence]" in prompt:
            return self._lexicon[(NodeKind.SITUATION, None)]

        stripped = prompt.rstrip()
        if stripped.endswith("I feel great since I think"):
            return self._lexicon[(NodeKind.THOUGHT, Polarity.POSITIVE)]
        if stripped.endswith("I feel terrible since I think"):
            return self._lexicon[(NodeKind.THOUGHT, Polarity.NEGATIVE)]
        if stripped.endswith(", so"):
            return self._lexicon[(NodeKind.ACTION, self._polarity_of(prompt))]
        if stripped.endswith("since"):
            return self._lexicon[(NodeKind.CLUE, self._polarity_of(prompt))]
        raise BadResponse("mock backend cannot classify this prompt shape")

    @staticmethod
    def _polarity_of(prompt: str) -> Polarity:
        lowered = prompt.lower()
        for marker in ("negative clue", "negative action", "negative thought",
                       "think negatively"):
            if marker in lowered:
                return Polarity.NEGATIVE
        for marker in ("positive clue", "positive action", "positive thought",
                       "think positively"):
            if marker in lowered:
                return Polarity.POSITIVE
        if any(f in prompt for f in _NEGATIVE_FINGERPRINTS):
            return Polarity.NEGATIVE
        if any(f in prompt for f in _POSITIVE_FINGERPRINTS):
            return Polarity.POSITIVE
        raise BadResponse("cannot infer polarity from prompt")
