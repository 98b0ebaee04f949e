"""Optimization loop: Adam with per-epoch exponential learning-rate decay,
seeded shuffling into fixed-size batches, per-step teacher forcing,
validation-CER early stopping, and divergence handling.

Batch losses are summed over utterances and divided by the total number
of target tokens, which keeps the effective step size stable across
variable-length batches. Everything draws from one seeded generator in a
fixed order, so identical seeds and data reproduce training bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Utterance, Vocabulary
from .decoding import greedy_decode
from .distillation import TrainingPair
from .metrics import EvalReport
from .model import SOS_ID, Seq2SeqModel
from .tensor import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
GRAD_CLIP_NORM = 5.0


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    decay_per_epoch: float = 0.99
    batch_size: int = 16
    teacher_forcing_rate: float = 0.4
    dropout: float = 0.4
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or not 0 < self.decay_per_epoch <= 1:
            raise ValueError(f"bad learning-rate schedule: {self}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError(f"batch_size, max_epochs, patience must be >= 1: {self}")
        if not 0 <= self.teacher_forcing_rate <= 1:
            raise ValueError(f"teacher forcing rate must be in [0, 1]: {self}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must be in [0, 1): {self}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict[str, Tensor],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place; rejects non-finite gradients."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g.data)):
            raise ValueError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.items():
        g = grads[name].data
        m = state.m[name]
        v = state.v[name]
        m[...] = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v[...] = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * (g * g)
        p.data[...] = p.data - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def clip_gradients(grads: dict[str, Tensor], max_norm: float = GRAD_CLIP_NORM) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g.data.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g.data[...] = g.data * g.data.dtype.type(scale)
    return norm


def choose_conditioning(rate: float, rng: np.random.Generator,
                        truth_token: int, model_token: int) -> int:
    """Ground-truth previous token with probability ``rate``, else the
    model's own previous argmax."""
    return truth_token if rng.random() < rate else model_token


def policy_sequence_loss(model: Seq2SeqModel, pair: TrainingPair, tf_rate: float,
                         rng: np.random.Generator, dropout: float = 0.0) -> Tensor:
    """Negative log-likelihood of the pair's target under mixed conditioning.

    The loss always scores the true target token; teacher forcing only
    decides what the decoder conditions on. At rate 1.0 this equals
    seq_nll_loss exactly.
    """
    tokens = pair.target
    if not tokens:
        raise ValueError("pair target is empty")
    encoder = model.encode(pair.features, dropout=dropout, rng=rng)
    state = model.initial_state()
    prev_w = model.initial_weights(encoder)
    cond = SOS_ID
    total: Tensor | None = None
    for t, target in enumerate(tokens):
        log_dist, state, att = model.decode_step(cond, state, encoder, prev_w,
                                                 dropout=dropout, rng=rng)
        term = T.getitem(log_dist, target)
        total = term if total is None else T.add(total, term)
        prev_w = att.weights
        if t + 1 < len(tokens):
            model_token = int(np.argmax(log_dist.data))
            cond = choose_conditioning(tf_rate, rng, target, model_token)
    return T.mul(T.neg(total), float(pair.weight))


@dataclass
class EpochRecord:
    epoch: int
    step: int
    loss: float
    lr: float
    val_cer: float | None

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, "step": self.step, "loss": self.loss,
                "lr": self.lr, "val_cer": self.val_cer}


@dataclass
class TrainResult:
    params: dict[str, Tensor]  # best-validation snapshot
    log: list[EpochRecord]
    best_val_cer: float | None
    epochs_run: int
    rejected_steps: list[list[str]] = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last good parameters and the log."""

    def __init__(self, message: str, params: dict[str, Tensor],
                 log: list[EpochRecord]):
        super().__init__(message)
        self.params = params
        self.log = log


def validation_cer(model: Seq2SeqModel, val_set: list[Utterance],
                   vocab: Vocabulary) -> float:
    report = EvalReport()
    for utt in val_set:
        hyp = greedy_decode(model, utt.features)
        text = vocab.detokenize(hyp.tokens) if vocab.renderable(hyp.tokens) else ""
        report.add(utt.utterance_id, utt.text, text)
    return report.corpus_cer


def _snapshot(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(p.data.copy(), requires_grad=True, name=p.name)
            for k, p in params.items()}


def train(model: Seq2SeqModel, pairs: list[TrainingPair], cfg: TrainConfig,
          val_set: list[Utterance] | None = None,
          vocab: Vocabulary | None = None,
          on_epoch=None) -> TrainResult:
    """Optimize in place; return the best snapshot and the epoch log.

    Early stopping watches validation CER when a validation set is given,
    otherwise the epoch training loss. Batches whose gradients come out
    non-finite are rejected (utterance ids recorded) without an update;
    a non-finite loss aborts with the last good parameters.
    """
    if not pairs:
        raise ValueError("no training pairs")
    if val_set is not None and vocab is None:
        raise ValueError("validation needs a vocabulary to render hypotheses")
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState.for_params(model.params)
    log: list[EpochRecord] = []
    rejected: list[list[str]] = []
    best_metric = np.inf
    best_params = _snapshot(model.params)
    best_val: float | None = None
    since_best = 0
    step = 0
    for epoch in range(cfg.max_epochs):
        lr = cfg.learning_rate * cfg.decay_per_epoch ** epoch
        order = rng.permutation(len(pairs))
        epoch_loss_sum = 0.0
        epoch_tokens = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
            n_tokens = sum(len(p.target) for p in batch)
            with T.Tape() as tape:
                total: Tensor | None = None
                for pair in batch:
                    loss = policy_sequence_loss(model, pair,
                                                cfg.teacher_forcing_rate, rng,
                                                dropout=cfg.dropout)
                    total = loss if total is None else T.add(total, loss)
                batch_loss = T.mul(total, 1.0 / n_tokens)
            loss_value = batch_loss.item()
            if not np.isfinite(loss_value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}",
                    best_params, log)
            grads = T.backward(tape, batch_loss, model.params)
            if not all(np.all(np.isfinite(g.data)) for g in grads.values()):
                rejected.append([p.utterance_id for p in batch])
                continue
            clip_gradients(grads)
            adam_step(model.params, grads, adam, lr)
            step += 1
            epoch_loss_sum += loss_value * n_tokens
            epoch_tokens += n_tokens
        epoch_loss = epoch_loss_sum / max(epoch_tokens, 1)
        val = None
        if val_set is not None:
            val = validation_cer(model, val_set, vocab)
        record = EpochRecord(epoch, step, epoch_loss, lr, val)
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
        metric = val if val is not None else epoch_loss
        if metric < best_metric:
            best_metric = metric
            best_params = _snapshot(model.params)
            best_val = val
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    return TrainResult(params=best_params, log=log, best_val_cer=best_val,
                       epochs_run=len(log), rejected_steps=rejected)
