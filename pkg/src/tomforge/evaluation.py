"""Sentence-level text metrics and multi-reference evaluation.

Implements BLEU-1/2 (clipped precision, epsilon-smoothed), ROUGE-L (F1 over
the LCS), a METEOR variant restricted to exact unigram matches, all-pairs
multi-reference averaging, and emotion classification accuracy. Everything
is deterministic and dependency-free.
"""

from __future__ import annotations

import math
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

from .chain_model import EmotionCategory, normalize_emotion
from .errors import (
    AlignmentError,
    EmptyCandidate,
    EmptyInput,
    EmptyList,
    LengthMismatch,
    UnknownEmotion,
)

#: smoothing constant for zero-count n-gram precisions
BLEU_EPSILON = 0.1

#: reference positions beyond which the chunk search falls back to greedy
_EXACT_SEARCH_LIMIT = 18

Text = Union[str, Sequence[str]]


def tokenize(text: str) -> list[str]:
    """Case-fold, split on whitespace, strip edge punctuation per token."""
    tokens = []
    for raw in text.casefold().split():
        start, end = 0, len(raw)
        while start < end and unicodedata.category(raw[start]).startswith("P"):
            start += 1
        while end > start and unicodedata.category(raw[end - 1]).startswith("P"):
            end -= 1
        if start < end:
            tokens.append(raw[start:end])
    return tokens


def _tokens(text: Text) -> list[str]:
    if isinstance(text, str):
        return tokenize(text)
    return list(text)


def _ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def bleu_n(candidate: Text, reference: Text, n: int) -> float:
    """Sentence BLEU-n for n in {1, 2}.

    BP * geometric mean of clipped k-gram precisions; a zero numerator is
    smoothed to epsilon/denominator, and a candidate too short to have any
    k-gram contributes epsilon.
    """
    if n not in (1, 2):
        raise ValueError(f"n must be 1 or 2, got {n}")
    cand = _tokens(candidate)
    ref = _tokens(reference)
    if not cand:
        raise EmptyCandidate("candidate has no tokens")

    log_sum = 0.0
    for k in range(1, n + 1):
        cand_grams = _ngrams(cand, k)
        if not cand_grams:
            log_sum += math.log(BLEU_EPSILON)
            continue
        ref_counts = Counter(_ngrams(ref, k))
        clipped = sum(min(count, ref_counts[gram]) for gram, count in Counter(cand_grams).items())
        if clipped == 0:
            log_sum += math.log(BLEU_EPSILON / len(cand_grams))
        else:
            log_sum += math.log(clipped / len(cand_grams))

    c, r = len(cand), len(ref)
    brevity = 1.0 if c > r else math.exp(1 - r / c)
    return brevity * math.exp(log_sum / n)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    # rolling single-row DP
    if len(b) > len(a):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for tok_a in a:
        current = [0]
        for j, tok_b in enumerate(b, start=1):
            if tok_a == tok_b:
                current.append(prev[j - 1] + 1)
            else:
                current.append(max(prev[j], current[j - 1]))
        prev = current
    return prev[-1]


def rouge_l(candidate: Text, reference: Text) -> float:
    """ROUGE-L F1 (beta = 1); symmetric in its arguments."""
    cand = _tokens(candidate)
    ref = _tokens(reference)
    if not cand or not ref:
        raise EmptyInput("rouge_l requires non-empty candidate and reference")
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


def _alignment_stats(cand: Sequence[str], ref: Sequence[str]) -> tuple[int, int]:
    """(matches, chunks) under a one-to-one exact-token alignment that
    maximizes matches and, among those, minimizes chunks.

    Exact via memoized search over reference positions of shared tokens;
    falls back to a greedy run-extending alignment when the shared-position
    space is too large for the exact search (same match count, chunk count
    then an upper bound).
    """
    cand_counts = Counter(cand)
    ref_counts = Counter(ref)
    quota = {t: min(cand_counts[t], ref_counts[t]) for t in cand_counts if t in ref_counts}
    matches = sum(quota.values())
    if matches == 0:
        return 0, 0

    shared_ref = [j for j, t in enumerate(ref) if t in quota]
    if len(shared_ref) > _EXACT_SEARCH_LIMIT:
        return matches, _greedy_chunks(cand, ref, quota)

    bit_of = {j: i for i, j in enumerate(shared_ref)}
    ref_pos_by_token: dict[str, list[int]] = {}
    for j in shared_ref:
        ref_pos_by_token.setdefault(ref[j], []).append(j)

    # occurrences of each quota token at or after each candidate index
    tail_counts: list[Counter] = [Counter() for _ in range(len(cand) + 1)]
    for i in range(len(cand) - 1, -1, -1):
        tail_counts[i] = tail_counts[i + 1].copy()
        if cand[i] in quota:
            tail_counts[i][cand[i]] += 1

    memo: dict[tuple[int, int, int], int] = {}

    def used_of(mask: int, token: str) -> int:
        return sum(1 for j in ref_pos_by_token[token] if mask >> bit_of[j] & 1)

    def search(i: int, mask: int, last_ref: int) -> int:
        # last_ref: ref index matched at candidate position i-1, else -1
        if i == len(cand):
            return 0
        key = (i, mask, last_ref)
        if key in memo:
            return memo[key]
        token = cand[i]
        best: Optional[int] = None
        remaining = quota.get(token, 0) - (used_of(mask, token) if token in quota else 0)
        must_match = token in quota and remaining >= tail_counts[i][token]
        if token in quota and remaining > 0:
            for j in ref_pos_by_token[token]:
                if mask >> bit_of[j] & 1:
                    continue
                new_chunk = 0 if j == last_ref + 1 and last_ref >= 0 else 1
                cost = new_chunk + search(i + 1, mask | 1 << bit_of[j], j)
                if best is None or cost < best:
                    best = cost
        if not must_match:
            cost = search(i + 1, mask, -1)
            if best is None or cost < best:
                best = cost
        memo[key] = best
        return best

    return matches, search(0, 0, -1)


def _greedy_chunks(cand: Sequence[str], ref: Sequence[str], quota: Mapping[str, int]) -> int:
    remaining = dict(quota)
    used: set[int] = set()
    ref_pos_by_token: dict[str, list[int]] = {}
    for j, t in enumerate(ref):
        if t in quota:
            ref_pos_by_token.setdefault(t, []).append(j)
    chunks = 0
    last_ref = -2
    for token in cand:
        if remaining.get(token, 0) > 0:
            positions = ref_pos_by_token[token]
            pick = None
            if last_ref + 1 in positions and last_ref + 1 not in used:
                pick = last_ref + 1
            else:
                for j in positions:
                    if j not in used:
                        pick = j
                        break
            used.add(pick)
            remaining[token] -= 1
            if pick != last_ref + 1:
                chunks += 1
            last_ref = pick
        else:
            last_ref = -2
    return chunks


def meteor_lite(candidate: Text, reference: Text) -> float:
    """Exact-match METEOR: harmonic mean weighted 9:1 toward recall, with a
    fragmentation penalty of 0.5 * (chunks / matches)^3.

    No stemming, synonym, or paraphrase stages; scores are not comparable
    to full METEOR.
    """
    cand = _tokens(candidate)
    ref = _tokens(reference)
    if not cand or not ref:
        raise EmptyInput("meteor_lite requires non-empty candidate and reference")
    matches, chunks = _alignment_stats(cand, ref)
    if matches == 0:
        return 0.0
    precision = matches / len(cand)
    recall = matches / len(ref)
    fmean = 10 * precision * recall / (recall + 9 * precision)
    penalty = 0.5 * (chunks / matches) ** 3
    return fmean * (1 - penalty)


def multi_ref_score(predictions: Sequence[Text], references: Sequence[Text], metric) -> float:
    """Mean of metric(p, r) over the full predictions x references product."""
    if not predictions or not references:
        raise EmptyList("multi_ref_score requires non-empty prediction and reference lists")
    total = 0.0
    for pred in predictions:
        for ref in references:
            total += metric(pred, ref)
    return total / (len(predictions) * len(references))


def _coerce_emotion(value) -> Optional[EmotionCategory]:
    if isinstance(value, EmotionCategory):
        return value
    try:
        return normalize_emotion(str(value))
    except UnknownEmotion:
        return None


def emotion_accuracy(predictions: Sequence, golds: Sequence) -> float:
    """Exact-match accuracy; string inputs are normalized first, and a
    prediction that fails to normalize counts as incorrect."""
    if len(predictions) != len(golds):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(golds)} golds")
    if not predictions:
        raise EmptyList("emotion_accuracy requires non-empty inputs")
    correct = 0
    for pred, gold in zip(predictions, golds):
        gold_cat = _coerce_emotion(gold)
        if gold_cat is None:
            raise UnknownEmotion(f"gold label {gold!r} is not an emotion category")
        if _coerce_emotion(pred) is gold_cat:
            correct += 1
    return correct / len(predictions)


@dataclass(frozen=True)
class MetricReport:
    task: str
    sample_count: int
    meteor: Optional[float] = None
    rouge_l: Optional[float] = None
    bleu1: Optional[float] = None
    bleu2: Optional[float] = None
    accuracy: Optional[float] = None

    def to_dict(self) -> dict:
        data = {"task": self.task, "sample_count": self.sample_count}
        for name in ("meteor", "rouge_l", "bleu1", "bleu2", "accuracy"):
            value = getattr(self, name)
            if value is not None:
                data[name] = round(value, 4)
        return data


def evaluate_task(task, predictions: Mapping[str, Sequence[str]],
                  references: Mapping[str, Sequence[str]]) -> MetricReport:
    """Score aligned per-input prediction/reference sets for one task.

    Generation tasks get the four text metrics, each macro-averaged over
    inputs after all-pairs multi-reference averaging within an input; the
    emotion task gets classification accuracy instead.
    """
    from .task_builder import TaskKind

    task = TaskKind(task) if not isinstance(task, TaskKind) else task
    if set(predictions) != set(references):
        missing = set(predictions) ^ set(references)
        raise AlignmentError(f"prediction/reference ids differ: {sorted(missing)[:5]}")
    if not predictions:
        raise EmptyList("no inputs to evaluate")

    ids = sorted(predictions)
    if task is TaskKind.EMOTION_CLS:
        per_input = []
        for input_id in ids:
            preds = predictions[input_id]
            golds = [_coerce_emotion(r) for r in references[input_id]]
            if not preds or not golds:
                raise EmptyList(f"input {input_id} has empty predictions or references")
            hits = sum(1 for p in preds if _coerce_emotion(p) in golds and _coerce_emotion(p) is not None)
            per_input.append(hits / len(preds))
        return MetricReport(task=task.value, sample_count=len(ids),
                            accuracy=sum(per_input) / len(per_input))

    sums = {"meteor": 0.0, "rouge_l": 0.0, "bleu1": 0.0, "bleu2": 0.0}
    for input_id in ids:
        preds, refs = predictions[input_id], references[input_id]
        sums["meteor"] += multi_ref_score(preds, refs, meteor_lite)
        sums["rouge_l"] += multi_ref_score(preds, refs, rouge_l)
        sums["bleu1"] += multi_ref_score(preds, refs, lambda p, r: bleu_n(p, r, 1))
        sums["bleu2"] += multi_ref_score(preds, refs, lambda p, r: bleu_n(p, r, 2))
    count = len(ids)
    return MetricReport(task=task.value, sample_count=count,
                        meteor=sums["meteor"] / count, rouge_l=sums["rouge_l"] / count,
                        bleu1=sums["bleu1"] / count, bleu2=sums["bleu2"] / count)


def render_report_table(reports: Sequence[MetricReport]) -> str:
    """Fixed-width table, one row per task."""
    headers = ["Task", "Samples", "METEOR", "ROUGE-L", "BLEU-1", "BLEU-2", "Accuracy"]
    rows = []
    for report in reports:
        def fmt(value):
            return f"{value:.4f}" if value is not None else "-"
        rows.append([
            report.task, str(report.sample_count), fmt(report.meteor), fmt(report.rouge_l),
            fmt(report.bleu1), fmt(report.bleu2), fmt(report.accuracy),
        ])
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)
