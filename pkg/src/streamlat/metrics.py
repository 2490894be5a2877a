"""Evaluation metrics: corpus latency and token error rate.

Latency is the token-pooled mean signed offset between hypothesis trigger
frames and ground-truth boundaries, in original frame units; early
triggering yields negative terms. When a hypothesis disagrees with the
reference in length, tokens are paired through the Levenshtein alignment
and only match/substitution pairs enter the sum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence


@dataclass
class LatencyReport:
    delta_corpus: float
    per_utterance: list[list[float]]  # signed per-token offsets, aligned pairs only
    token_count: int


class NoAlignedTokensError(ValueError):
    """Latency requested but no token pair survived alignment."""


def levenshtein_align(hyp: Sequence[int], ref: Sequence[int]
                      ) -> tuple[int, list[tuple[int, int]]]:
    """Edit distance plus the aligned (hyp_idx, ref_idx) match/sub pairs."""
    n, m = len(hyp), len(ref)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    for j in range(m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1][j - 1] + (hyp[i - 1] != ref[j - 1])
            dist[i][j] = min(sub, dist[i - 1][j] + 1, dist[i][j - 1] + 1)
    pairs = []
    i, j = n, m
    while i > 0 and j > 0:
        sub_cost = dist[i - 1][j - 1] + (hyp[i - 1] != ref[j - 1])
        if dist[i][j] == sub_cost:
            pairs.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif dist[i][j] == dist[i - 1][j] + 1:
            i -= 1
        else:
            j -= 1
    pairs.reverse()
    return dist[n][m], pairs


@dataclass
class LatencyEntry:
    """One utterance's contribution to the latency metric."""

    triggers: Sequence[int]
    boundaries: Sequence[int]
    hyp_tokens: Optional[Sequence[int]] = None
    ref_tokens: Optional[Sequence[int]] = None


def corpus_latency(entries: Sequence[LatencyEntry]) -> LatencyReport:
    """Token-pooled mean of (trigger - boundary) over aligned token pairs."""
    offsets_all: list[list[float]] = []
    total = 0.0
    count = 0
    for entry in entries:
        trig, bound = list(entry.triggers), list(entry.boundaries)
        if len(trig) == len(bound):
            pairs = list(zip(range(len(trig)), range(len(bound))))
        else:
            if entry.hyp_tokens is None or entry.ref_tokens is None:
                raise ValueError(
                    "trigger/boundary lengths differ; token sequences are "
                    "required to align them")
            _, pairs = levenshtein_align(entry.hyp_tokens, entry.ref_tokens)
        offsets = [float(trig[i] - bound[j]) for i, j in pairs]
        offsets_all.append(offsets)
        total += sum(offsets)
        count += len(offsets)
    if count == 0:
        raise NoAlignedTokensError("no aligned tokens to score latency on")
    return LatencyReport(delta_corpus=total / count,
                         per_utterance=offsets_all, token_count=count)


def token_error_rate(hypotheses: Sequence[Sequence[int]],
                     references: Sequence[Sequence[int]]) -> float:
    """Summed edit distance over total reference tokens."""
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference sets differ in size")
    total_ref = sum(len(r) for r in references)
    if total_ref == 0:
        raise ValueError("empty reference set")
    errors = 0
    for hyp, ref in zip(hypotheses, references):
        dist, _ = levenshtein_align(list(hyp), list(ref))
        errors += dist
    return errors / total_ref
