"""Edit-distance based character and word error rates.

Corpus rates pool edit distances and reference lengths across utterances
before dividing, so utterance order never matters. When several optimal
alignments exist, operation counts prefer substitution over deletion over
insertion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence


@dataclass(frozen=True)
class EditCounts:
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def edit_distance(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Unit-cost Levenshtein distance from ref to hyp with operation counts."""
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        row, prev = dist[i], dist[i - 1]
        for j in range(1, m + 1):
            if ref[i - 1] == hyp[j - 1]:
                row[j] = prev[j - 1]
            else:
                row[j] = 1 + min(prev[j - 1], prev[j], row[j - 1])
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and dist[i][j] == dist[i - 1][j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + 1:
            subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(dist[n][m], subs, ins, dels)


def words(text: str) -> list[str]:
    return text.split(" ") if text else []


def cer(ref: str, hyp: str) -> float:
    """Character error rate in percent, spaces included."""
    if not ref:
        raise ValueError("reference is empty")
    return 100.0 * edit_distance(ref, hyp).distance / len(ref)


def wer(ref: str, hyp: str) -> float:
    """Word error rate in percent over space-delimited words."""
    ref_words = words(ref)
    if not ref_words:
        raise ValueError("reference has no words")
    return 100.0 * edit_distance(ref_words, words(hyp)).distance / len(ref_words)


@dataclass
class UtteranceScore:
    utterance_id: str
    ref: str
    hyp: str
    cer: float
    wer: float
    char_counts: EditCounts
    word_counts: EditCounts


@dataclass
class EvalReport:
    """Per-utterance scores plus pooled corpus rates."""

    utterances: list[UtteranceScore] = field(default_factory=list)

    def add(self, utterance_id: str, ref: str, hyp: str) -> UtteranceScore:
        cc = edit_distance(ref, hyp)
        wc = edit_distance(words(ref), words(hyp))
        score = UtteranceScore(
            utterance_id, ref, hyp,
            cer=100.0 * cc.distance / len(ref) if ref else 0.0,
            wer=100.0 * wc.distance / len(words(ref)) if words(ref) else 0.0,
            char_counts=cc, word_counts=wc)
        self.utterances.append(score)
        return score

    @property
    def corpus_cer(self) -> float:
        total_ref = sum(len(u.ref) for u in self.utterances)
        if total_ref == 0:
            raise ValueError("corpus has no reference characters")
        return 100.0 * sum(u.char_counts.distance for u in self.utterances) / total_ref

    @property
    def corpus_wer(self) -> float:
        total_ref = sum(len(words(u.ref)) for u in self.utterances)
        if total_ref == 0:
            raise ValueError("corpus has no reference words")
        return 100.0 * sum(u.word_counts.distance for u in self.utterances) / total_ref

    def _pooled(self, pick) -> EditCounts:
        counts = [pick(u) for u in self.utterances]
        return EditCounts(sum(c.distance for c in counts),
                          sum(c.substitutions for c in counts),
                          sum(c.insertions for c in counts),
                          sum(c.deletions for c in counts))

    @property
    def corpus_char_counts(self) -> EditCounts:
        return self._pooled(lambda u: u.char_counts)

    @property
    def corpus_word_counts(self) -> EditCounts:
        return self._pooled(lambda u: u.word_counts)

    def summary_line(self) -> str:
        return f"CER={self.corpus_cer:.2f}% WER={self.corpus_wer:.2f}%"

    def record_lines(self) -> list[str]:
        return [
            f"{u.utterance_id}\tcer={u.cer:.2f}\twer={u.wer:.2f}\t"
            f"ref={u.ref}\thyp={u.hyp}"
            for u in self.utterances
        ]
