"""Greedy, beam, and exhaustive search over a trained recognizer.

Scores are cumulative token log-probabilities with no length
normalization. A hypothesis's total length, terminal eos included, never
exceeds max_len; survivors alive at the cap are force-completed with eos
at the eos token's actual log-probability so every hypothesis re-scores
exactly under teacher forcing. Ties break by lexicographic token order so
label generation is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import EOS_ID, SOS_ID, EncoderStates, Seq2SeqModel

EXHAUSTIVE_PATH_LIMIT = 10 ** 6


@dataclass(frozen=True)
class Hypothesis:
    """A completed candidate: tokens end with the sequence's only eos."""

    tokens: tuple[int, ...]
    log_prob: float


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int
    top_k: int
    max_len: int

    def __post_init__(self):
        if self.beam_size < 1 or self.top_k < 1 or self.max_len < 1:
            raise ValueError(f"beam_size, top_k, max_len must be >= 1: {self}")
        if self.top_k > self.beam_size:
            raise ValueError(
                f"top_k ({self.top_k}) must not exceed beam_size ({self.beam_size})")


def default_max_len(encoder_length: int) -> int:
    return min(2 * encoder_length + 10, 400)


class _Cursor:
    """A live prefix: its tokens, running score, and decoder position."""

    __slots__ = ("tokens", "log_prob", "state", "prev_weights", "last_token")

    def __init__(self, tokens, log_prob, state, prev_weights, last_token):
        self.tokens = tokens
        self.log_prob = log_prob
        self.state = state
        self.prev_weights = prev_weights
        self.last_token = last_token


def _initial_cursor(model: Seq2SeqModel, encoder: EncoderStates) -> _Cursor:
    zero = model.dtype.type(0.0)
    return _Cursor((), zero, model.initial_state(),
                   model.initial_weights(encoder), SOS_ID)


def _advance(model: Seq2SeqModel, encoder: EncoderStates, cur: _Cursor):
    """One decoder step for a cursor; returns (log_dist array, next cursor parts)."""
    log_dist, state, att = model.decode_step(
        cur.last_token, cur.state, encoder, cur.prev_weights)
    return log_dist.data, state, att.weights


def _sort_key(item: tuple):
    log_prob, tokens = item[0], item[1]
    return (-log_prob, tokens)


def greedy_decode(model: Seq2SeqModel, features, max_len: int | None = None) -> Hypothesis:
    """Emit the argmax token each step; force eos at the length cap."""
    encoder = model.encode(features)
    if max_len is None:
        max_len = default_max_len(encoder.length)
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    cur = _initial_cursor(model, encoder)
    while True:
        log_dist, state, weights = _advance(model, encoder, cur)
        if len(cur.tokens) == max_len - 1:
            tok = EOS_ID
        else:
            tok = int(np.argmax(log_dist))
        cur = _Cursor(cur.tokens + (tok,), cur.log_prob + log_dist[tok],
                      state, weights, tok)
        if tok == EOS_ID:
            return Hypothesis(cur.tokens, float(cur.log_prob))


def beam_search(model: Seq2SeqModel, features, cfg: BeamConfig) -> list[Hypothesis]:
    """Breadth-first beam search returning up to top_k completed hypotheses.

    Each step expands every live prefix over the whole vocabulary and
    walks the candidates best-first: eos candidates move to the completed
    pool (freeing their slot), others refill the live set up to beam_size.
    Search stops once the pool holds top_k entries and the best live score
    cannot exceed the pool's worst, or at the length cap. May return fewer
    than top_k hypotheses when fewer completions exist within max_len.
    """
    encoder = model.encode(features)
    live = [_initial_cursor(model, encoder)]
    pool: list[tuple] = []  # (log_prob, tokens)

    def pool_add(log_prob, tokens) -> None:
        pool.append((log_prob, tokens))
        pool.sort(key=_sort_key)
        del pool[cfg.top_k:]

    while live:
        if (len(pool) == cfg.top_k
                and max(c.log_prob for c in live) <= pool[-1][0]):
            break
        if len(live[0].tokens) == cfg.max_len - 1:
            # length cap: survivors complete with eos at its true log-prob
            for cur in live:
                log_dist, _, _ = _advance(model, encoder, cur)
                pool_add(cur.log_prob + log_dist[EOS_ID], cur.tokens + (EOS_ID,))
            break
        candidates = []
        for cur in live:
            log_dist, state, weights = _advance(model, encoder, cur)
            for tok in range(model.config.vocab_size):
                candidates.append((cur.log_prob + log_dist[tok],
                                   cur.tokens + (tok,), state, weights))
        candidates.sort(key=_sort_key)
        live = []
        for log_prob, tokens, state, weights in candidates:
            if tokens[-1] == EOS_ID:
                pool_add(log_prob, tokens)
            else:
                live.append(_Cursor(tokens, log_prob, state, weights, tokens[-1]))
                if len(live) == cfg.beam_size:
                    break
    return [Hypothesis(tokens, float(log_prob))
            for log_prob, tokens in sorted(pool, key=_sort_key)]


def exhaustive_search(model: Seq2SeqModel, features, max_len: int,
                      top_k: int) -> list[Hypothesis]:
    """Score every eos-terminated sequence of length <= max_len.

    The global oracle for beam search: same scoring, same tie-break.
    Rejected when vocab_size ** max_len exceeds 10^6 paths.
    """
    if max_len < 1 or top_k < 1:
        raise ValueError(f"max_len and top_k must be >= 1: {max_len}, {top_k}")
    paths = model.config.vocab_size ** max_len
    if paths > EXHAUSTIVE_PATH_LIMIT:
        raise ValueError(
            f"exhaustive search space has {paths} paths, over the "
            f"{EXHAUSTIVE_PATH_LIMIT} limit")
    encoder = model.encode(features)
    results: list[tuple] = []

    def descend(cur: _Cursor) -> None:
        log_dist, state, weights = _advance(model, encoder, cur)
        results.append((cur.log_prob + log_dist[EOS_ID], cur.tokens + (EOS_ID,)))
        if len(cur.tokens) < max_len - 1:
            for tok in range(model.config.vocab_size):
                if tok == EOS_ID:
                    continue
                descend(_Cursor(cur.tokens + (tok,),
                                cur.log_prob + log_dist[tok],
                                state, weights, tok))

    descend(_initial_cursor(model, encoder))
    results.sort(key=_sort_key)
    return [Hypothesis(tokens, float(log_prob))
            for log_prob, tokens in results[:top_k]]
