"""Sequence- and frame-level distillation losses plus the three-step
pipeline: decode k-best hypotheses from a trained teacher, store them as
pseudo labels, and expand the training set by a factor of k so a student
can train on them in place of the ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Utterance, Vocabulary
from .decoding import BeamConfig, Hypothesis, beam_search
from .model import Seq2SeqModel
from .tensor import Tensor


@dataclass(frozen=True)
class Provenance:
    checkpoint_digest: str
    beam_size: int
    top_k: int
    max_len: int

    def as_dict(self) -> dict:
        return {"checkpoint_digest": self.checkpoint_digest,
                "beam_size": self.beam_size, "top_k": self.top_k,
                "max_len": self.max_len}


@dataclass
class PseudoLabelSet:
    """Ordered teacher hypotheses per utterance, tagged with how they were made."""

    entries: dict[str, list[Hypothesis]]
    provenance: Provenance

    def empty_ids(self) -> list[str]:
        return [uid for uid, hyps in self.entries.items() if not hyps]


@dataclass
class TrainingPair:
    utterance_id: str
    features: np.ndarray  # (S, D)
    target: tuple[int, ...]  # eos-terminated token ids
    weight: float = 1.0

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError(f"pair weight must be positive, got {self.weight}")


def generate_pseudo_labels(teacher: Seq2SeqModel, dataset: list[Utterance],
                           cfg: BeamConfig, checkpoint_digest: str = ""
                           ) -> PseudoLabelSet:
    """Beam-search every utterance and keep its completed k-best list.

    Deterministic given the teacher parameters and the beam settings. An
    utterance whose beam completes nothing is recorded with an empty list
    and generation continues.
    """
    entries: dict[str, list[Hypothesis]] = {}
    for utt in dataset:
        entries[utt.utterance_id] = beam_search(teacher, utt.features, cfg)
    return PseudoLabelSet(entries, Provenance(
        checkpoint_digest, cfg.beam_size, cfg.top_k, cfg.max_len))


def expand_dataset(dataset: list[Utterance], labels: PseudoLabelSet
                   ) -> tuple[list[TrainingPair], int]:
    """One pair per (utterance, hypothesis), utterance order then rank.

    Utterances with empty label entries are skipped; the skip count is
    returned. Label ids that match no dataset utterance are an error.
    """
    by_id = {u.utterance_id: u for u in dataset}
    unmatched = sorted(uid for uid, hyps in labels.entries.items()
                       if hyps and uid not in by_id)
    if unmatched:
        raise ValueError(f"pseudo labels for unknown utterances: {unmatched}")
    pairs: list[TrainingPair] = []
    skipped = 0
    for utt in dataset:
        hyps = labels.entries.get(utt.utterance_id, [])
        if not hyps:
            skipped += 1
            continue
        for hyp in hyps:
            pairs.append(TrainingPair(utt.utterance_id, utt.features,
                                      tuple(hyp.tokens)))
    return pairs, skipped


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def seq_nll_loss(model: Seq2SeqModel, pair: TrainingPair, dropout: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Negative teacher-forced sequence log-probability, times the pair weight."""
    if not pair.target:
        raise ValueError("pair target is empty")
    nll = T.neg(model.sequence_log_prob(pair.features, pair.target,
                                        dropout=dropout, rng=rng))
    return T.mul(nll, float(pair.weight))


def seq_kd_loss(model: Seq2SeqModel, pair: TrainingPair, dropout: float = 0.0,
                rng: np.random.Generator | None = None) -> Tensor:
    """Distillation sequence loss: the same computation as seq_nll_loss.

    The distillation semantics live in the data: the pair's target is a
    teacher beam hypothesis rather than the ground truth transcript.
    """
    return seq_nll_loss(model, pair, dropout=dropout, rng=rng)


def frame_kd_loss(student_log_dist: Tensor, teacher_dist: np.ndarray) -> Tensor:
    """Cross-entropy of one step's distributions: -sum_k q_k * log p_k."""
    teacher_dist = np.asarray(teacher_dist)
    if student_log_dist.shape != teacher_dist.shape:
        raise ValueError(f"distribution sizes differ: {student_log_dist.shape} "
                         f"vs {teacher_dist.shape}")
    if teacher_dist.min() < 0 or abs(teacher_dist.sum() - 1.0) > 1e-6:
        raise ValueError(
            f"teacher distribution must be nonnegative and sum to 1, got "
            f"sum {teacher_dist.sum()!r}")
    return T.neg(T.dot(student_log_dist,
                       Tensor(teacher_dist.astype(student_log_dist.dtype))))


def teacher_step_distributions(teacher: Seq2SeqModel, features, tokens
                               ) -> list[np.ndarray]:
    """Teacher-forced per-step output distributions (softmax probabilities)."""
    encoder = teacher.encode(features)
    state = teacher.initial_state()
    prev_w = teacher.initial_weights(encoder)
    prev_tok = 0
    dists = []
    for target in tokens:
        log_dist, state, att = teacher.decode_step(prev_tok, state, encoder, prev_w)
        dists.append(np.exp(log_dist.data))
        prev_w, prev_tok = att.weights, target
    return dists


def frame_kd_sequence_loss(student: Seq2SeqModel, features, tokens,
                           teacher_dists: list[np.ndarray],
                           dropout: float = 0.0,
                           rng: np.random.Generator | None = None) -> Tensor:
    """Per-step cross-entropy against teacher distributions, summed over a
    teacher-forced pass through ``tokens``."""
    if len(teacher_dists) != len(tokens):
        raise ValueError(f"{len(teacher_dists)} teacher steps for "
                         f"{len(tokens)} target tokens")
    encoder = student.encode(features, dropout=dropout, rng=rng)
    state = student.initial_state()
    prev_w = student.initial_weights(encoder)
    prev_tok = 0
    total: Tensor | None = None
    for target, q in zip(tokens, teacher_dists):
        log_dist, state, att = student.decode_step(prev_tok, state, encoder,
                                                   prev_w, dropout=dropout, rng=rng)
        term = frame_kd_loss(log_dist, q)
        total = term if total is None else T.add(total, term)
        prev_w, prev_tok = att.weights, target
    return total


# ---------------------------------------------------------------------------
# pseudo-label files: one JSON record per utterance
# ---------------------------------------------------------------------------


def write_pseudo_labels(path, labels: PseudoLabelSet, vocab: Vocabulary) -> int:
    """Write UTF-8 JSON lines; tokens render as characters, eos implicit.

    Hypotheses containing tokens with no character rendering (sos, or an
    interior eos) cannot be stored; they are dropped and counted in the
    return value.
    """
    dropped = 0
    with open(path, "w", encoding="utf-8") as f:
        for uid, hyps in labels.entries.items():
            rendered = []
            for hyp in hyps:
                if not vocab.renderable(hyp.tokens):
                    dropped += 1
                    continue
                rendered.append({"tokens": vocab.detokenize(hyp.tokens),
                                 "log_prob": hyp.log_prob})
            record = {"id": uid, "hypotheses": rendered,
                      "provenance": labels.provenance.as_dict()}
            f.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
    return dropped


def read_pseudo_labels(path, vocab: Vocabulary) -> PseudoLabelSet:
    entries: dict[str, list[Hypothesis]] = {}
    provenance: Provenance | None = None
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            hyps = [Hypothesis(tuple(vocab.tokenize(h["tokens"])), h["log_prob"])
                    for h in record["hypotheses"]]
            entries[record["id"]] = hyps
            provenance = Provenance(**record["provenance"])
    if provenance is None:
        raise ValueError(f"pseudo-label file {path} is empty")
    return PseudoLabelSet(entries, provenance)
