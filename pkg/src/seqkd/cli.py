"""Batch pipeline driver: synth-data, train, decode, eval, gradcheck.

Every subcommand is a pure function of its flags, input files, and seed;
reruns write byte-identical outputs. Each one also drops a run manifest
(JSON, written atomically) beside its outputs recording the resolved
configuration, input digests, and wall clock. Exit codes: 0 success,
1 check failure, 2 usage or input error, 3 training divergence.
The SKD_SEED environment variable overrides --seed when set.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (VOCAB, Utterance, generate_synth_corpus, load_utterances)
from .decoding import BeamConfig, beam_search, default_max_len, greedy_decode
from .distillation import (Provenance, PseudoLabelSet, TrainingPair,
                           expand_dataset, frame_kd_sequence_loss,
                           read_pseudo_labels, seq_kd_loss, seq_nll_loss,
                           teacher_step_distributions, write_pseudo_labels)
from .metrics import EvalReport
from .model import (ModelConfig, PRESETS, Seq2SeqModel, checkpoint_digest,
                    load_checkpoint, save_checkpoint)
from .training import TrainConfig, TrainingDiverged, train

GRADCHECK_THRESHOLD = 1e-4
GRADCHECK_EPS = (1e-5, 1e-3)


class CliError(Exception):
    """Input or usage problem; exits with code 2."""


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def _resolve_seed(seed: int) -> int:
    env = os.environ.get("SKD_SEED")
    return int(env) if env else seed


def _write_run_manifest(path, subcommand: str, config: dict,
                        input_paths: list, output_paths: list,
                        started: float, seed: int | None) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "input_digests": {str(p): _file_digest(p) for p in input_paths},
        "output_paths": [str(p) for p in output_paths],
        "wall_clock_seconds": round(time.time() - started, 3),
        "seed": seed,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# model config resolution: preset or key=value file, then flag overrides
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}


def _parse_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in _CONFIG_FIELDS:
            raise CliError(f"{path}:{lineno}: unknown config line {line!r}")
        ftype = _CONFIG_FIELDS[key]
        values[key] = (int(value) if "int" in ftype
                       else float(value) if "float" in ftype else value)
    return values


_MODEL_FLAGS = {
    "enc_layers": "encoder_layers", "enc_cells": "encoder_cells",
    "dec_layers": "decoder_layers", "dec_cells": "decoder_cells",
    "embedding_size": "embedding_size", "vocab_size": "vocab_size",
    "attention_variant": "attention_variant", "attention_dim": "attention_dim",
    "attention_conv_channels": "attention_conv_channels",
    "frontend": "frontend", "frontend_layers": "frontend_layers",
    "input_dim": "input_dim", "model_dropout": "dropout",
}


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("model architecture overrides")
    g.add_argument("--enc-layers", type=int)
    g.add_argument("--enc-cells", type=int)
    g.add_argument("--dec-layers", type=int)
    g.add_argument("--dec-cells", type=int)
    g.add_argument("--embedding-size", type=int)
    g.add_argument("--vocab-size", type=int)
    g.add_argument("--attention-variant", choices=["dot", "bilinear", "mlp", "conv-mlp"])
    g.add_argument("--attention-dim", type=int)
    g.add_argument("--attention-conv-channels", type=int)
    g.add_argument("--frontend", choices=["none", "conv2d"])
    g.add_argument("--frontend-layers", type=int)
    g.add_argument("--input-dim", type=int)
    g.add_argument("--model-dropout", type=float)


def _resolve_model_config(args, data_input_dim: int) -> ModelConfig:
    values: dict = {}
    if args.config:
        if args.config in PRESETS:
            values = dataclasses.asdict(PRESETS[args.config])
        else:
            values = _parse_config_file(_require_file(args.config, "config file"))
    for flag, key in _MODEL_FLAGS.items():
        flag_value = getattr(args, flag)
        if flag_value is not None:
            values[key] = flag_value
    values.setdefault("input_dim", data_input_dim)
    required = ("encoder_layers", "encoder_cells", "decoder_layers", "decoder_cells")
    missing = [k for k in required if k not in values]
    if missing:
        raise CliError(f"model sizes unspecified: give --config or flags for {missing}")
    try:
        config = ModelConfig(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad model config: {exc}") from exc
    if config.input_dim != data_input_dim:
        raise CliError(f"config input_dim {config.input_dim} does not match "
                       f"the data's feature width {data_input_dim}")
    return config


# ---------------------------------------------------------------------------
# worker-pool decoding (order-stable regardless of worker count)
# ---------------------------------------------------------------------------

_WORKER_MODEL: Seq2SeqModel | None = None


def _worker_init(ckpt_path: str) -> None:
    global _WORKER_MODEL
    config, params = load_checkpoint(ckpt_path)
    _WORKER_MODEL = Seq2SeqModel(config, params)


def _worker_beam(task):
    features, beam_size, top_k, max_len = task
    cfg = BeamConfig(beam_size=beam_size, top_k=top_k,
                     max_len=max_len or default_max_len(
                         _WORKER_MODEL.encode(features).length))
    return beam_search(_WORKER_MODEL, features, cfg)


def _worker_greedy(task):
    features, max_len = task
    return greedy_decode(_WORKER_MODEL, features, max_len)


def _pool_map(ckpt_path, fn, tasks, workers: int):
    with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                             initargs=(str(ckpt_path),)) as pool:
        return list(pool.map(fn, tasks, chunksize=8))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    started = time.time()
    seed = _resolve_seed(args.seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CliError(f"output directory not writable: {exc}") from exc
    split = None
    if args.split:
        try:
            split = tuple(int(s) for s in args.split.split(","))
            assert len(split) == 3
        except (ValueError, AssertionError):
            raise CliError(f"--split must be three comma-separated counts, "
                           f"got {args.split!r}")
    sizes = generate_synth_corpus(out, args.utterances, args.min_len,
                                  args.max_len, args.noise_std, seed,
                                  dim=args.dim, split=split)
    print(f"wrote {args.utterances} utterances to {out} "
          f"(train={sizes['train']} dev={sizes['dev']} test={sizes['test']})")
    _write_run_manifest(
        out / "run-manifest.json", "synth-data",
        {"utterances": args.utterances, "min_len": args.min_len,
         "max_len": args.max_len, "noise_std": args.noise_std,
         "dim": args.dim, "split": list(sizes.values())},
        [], [out / f"{n}.jsonl" for n in ("train", "dev", "test")],
        started, seed)
    return 0


def _training_pairs(utterances: list[Utterance], labels_path) -> tuple[list[TrainingPair], int]:
    if labels_path is None:
        pairs = [TrainingPair(u.utterance_id, u.features,
                              tuple(VOCAB.tokenize(u.text)))
                 for u in utterances]
        return pairs, 0
    labels = read_pseudo_labels(_require_file(labels_path, "pseudo labels"), VOCAB)
    return expand_dataset(utterances, labels)


def cmd_train(args) -> int:
    started = time.time()
    seed = _resolve_seed(args.seed)
    manifest = _require_file(args.data, "training manifest")
    utterances = load_utterances(manifest)
    if not utterances:
        raise CliError(f"no utterances in {manifest}")
    pairs, skipped = _training_pairs(utterances, args.labels)
    if skipped:
        print(f"skipped {skipped} utterances with empty pseudo-label entries")
    print(f"training on {len(pairs)} pairs from {len(utterances)} utterances")
    model_config = _resolve_model_config(args, utterances[0].features.shape[1])
    val_set = None
    if args.val:
        val_set = load_utterances(_require_file(args.val, "validation manifest"))
    train_config = TrainConfig(
        learning_rate=args.lr, decay_per_epoch=args.decay,
        batch_size=args.batch_size, teacher_forcing_rate=args.teacher_forcing,
        dropout=args.dropout, max_epochs=args.max_epochs,
        patience=args.patience, seed=seed)
    model = Seq2SeqModel.build(model_config, seed=seed, dtype=np.float32)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(out.suffix + ".log.jsonl")

    def write_outputs(params, log) -> None:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out, model_config, params)
        with open(log_path, "w", encoding="utf-8") as f:
            for record in log:
                f.write(json.dumps(record.as_dict(), sort_keys=True) + "\n")

    def on_epoch(record) -> None:
        val = "" if record.val_cer is None else f" val_cer={record.val_cer:.2f}%"
        print(f"epoch {record.epoch}: loss={record.loss:.4f} "
              f"lr={record.lr:.2e}{val}", flush=True)

    merged = {**dataclasses.asdict(model_config),
              **{f"train_{k}": v for k, v in dataclasses.asdict(train_config).items()},
              "labels": args.labels, "pairs": len(pairs)}
    inputs = [manifest] + ([Path(args.labels)] if args.labels else []) \
        + ([Path(args.val)] if args.val else []) \
        + ([Path(args.config)] if args.config and args.config not in PRESETS else [])
    try:
        result = train(model, pairs, train_config, val_set=val_set,
                       vocab=VOCAB if val_set else None, on_epoch=on_epoch)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        write_outputs(exc.params, exc.log)
        _write_run_manifest(Path(str(out) + ".run.json"), "train", merged,
                            inputs, [out, log_path], started, seed)
        return 3
    write_outputs(result.params, result.log)
    if result.rejected_steps:
        flat = sorted({u for batch in result.rejected_steps for u in batch})
        print(f"rejected {len(result.rejected_steps)} steps with non-finite "
              f"gradients (utterances: {', '.join(flat)})", file=sys.stderr)
    best = "" if result.best_val_cer is None else f", best val CER {result.best_val_cer:.2f}%"
    print(f"finished after {result.epochs_run} epochs{best}; checkpoint: {out}")
    _write_run_manifest(Path(str(out) + ".run.json"), "train", merged,
                        inputs, [out, log_path], started, seed)
    return 0


def cmd_decode(args) -> int:
    started = time.time()
    if args.top_k > args.beam_size:
        raise CliError(f"--top-k ({args.top_k}) must not exceed --beam-size "
                       f"({args.beam_size})")
    ckpt = _require_file(args.model, "checkpoint")
    manifest = _require_file(args.data, "manifest")
    utterances = load_utterances(manifest)
    digest = checkpoint_digest(ckpt)
    config, params = load_checkpoint(ckpt)
    model = Seq2SeqModel(config, params)
    if utterances and utterances[0].features.shape[1] != config.input_dim:
        raise CliError(f"checkpoint expects {config.input_dim}-dim features, "
                       f"data has {utterances[0].features.shape[1]}")
    if args.workers > 1:
        tasks = [(u.features, args.beam_size, args.top_k, args.max_len)
                 for u in utterances]
        hyp_lists = _pool_map(ckpt, _worker_beam, tasks, args.workers)
        entries = {u.utterance_id: hyps
                   for u, hyps in zip(utterances, hyp_lists)}
    else:
        def utt_cfg(u):
            max_len = args.max_len or default_max_len(model.encode(u.features).length)
            return BeamConfig(args.beam_size, args.top_k, max_len)
        entries = {u.utterance_id: beam_search(model, u.features, utt_cfg(u))
                   for u in utterances}
    # max_len 0 marks the per-utterance default cap
    labels = PseudoLabelSet(entries, Provenance(
        digest, args.beam_size, args.top_k, args.max_len or 0))
    dropped = write_pseudo_labels(args.out, labels, VOCAB)
    empty = labels.empty_ids()
    print(f"decoded {len(utterances)} utterances -> {args.out}")
    print(f"empty beams: {len(empty)}")
    if dropped:
        print(f"hypotheses without character rendering dropped: {dropped}")
    _write_run_manifest(
        Path(str(args.out) + ".run.json"), "decode",
        {"beam_size": args.beam_size, "top_k": args.top_k,
         "max_len": args.max_len, "workers": args.workers,
         "checkpoint_digest": digest},
        [ckpt, manifest], [Path(args.out)], started, None)
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    ckpt = _require_file(args.model, "checkpoint")
    manifest = _require_file(args.data, "manifest")
    utterances = load_utterances(manifest)
    config, params = load_checkpoint(ckpt)
    model = Seq2SeqModel(config, params)

    def best_hypothesis(features):
        if args.beam_size is None or args.beam_size == 1:
            return greedy_decode(model, features, args.max_len)
        max_len = args.max_len or default_max_len(model.encode(features).length)
        hyps = beam_search(model, features,
                           BeamConfig(args.beam_size, 1, max_len))
        return hyps[0]

    if args.workers > 1 and (args.beam_size is None or args.beam_size == 1):
        hyps = _pool_map(ckpt, _worker_greedy,
                         [(u.features, args.max_len) for u in utterances],
                         args.workers)
    else:
        hyps = [best_hypothesis(u.features) for u in utterances]
    report = EvalReport()
    for utt, hyp in zip(utterances, hyps):
        text = VOCAB.detokenize(hyp.tokens) if VOCAB.renderable(hyp.tokens) else ""
        report.add(utt.utterance_id, utt.text, text)
    lines = report.record_lines() + [report.summary_line()]
    print("\n".join(lines))
    outputs = []
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
        outputs.append(Path(args.out))
        _write_run_manifest(
            Path(str(args.out) + ".run.json"), "eval",
            {"beam_size": args.beam_size, "max_len": args.max_len,
             "workers": args.workers},
            [ckpt, manifest], outputs, started, None)
    return 0


def _gradcheck_model(seed: int) -> tuple[Seq2SeqModel, Seq2SeqModel, np.ndarray, tuple]:
    config = ModelConfig(input_dim=5, encoder_layers=1, encoder_cells=8,
                         decoder_layers=1, decoder_cells=8, embedding_size=4,
                         vocab_size=6, attention_variant="conv-mlp",
                         attention_dim=6, attention_conv_channels=3,
                         attention_conv_kernel=5, attention_conv_padding=2,
                         frontend="none", dropout=0.0)
    student = Seq2SeqModel.build(config, seed=seed, dtype=np.float64)
    teacher = Seq2SeqModel.build(config, seed=seed + 10 ** 6, dtype=np.float64)
    rng = np.random.default_rng(seed + 2 * 10 ** 6)
    features = rng.standard_normal((6, 5))
    tokens = tuple(int(t) for t in rng.integers(2, 6, size=3)) + (1,)
    return student, teacher, features, tokens


def gradcheck_losses(seed: int, samples_per_param: int = 6
                     ) -> dict[str, tuple[float, str]]:
    """Max relative gradient error and worst parameter per loss path."""
    student, teacher, features, tokens = _gradcheck_model(seed)
    pair = TrainingPair("g", features, tokens)
    teacher_dists = teacher_step_distributions(teacher, features, tokens)
    corrupt = bool(os.environ.get("SKD_GRADCHECK_CORRUPT"))

    def wrap(fn):
        if not corrupt:
            return fn

        def corrupted(params):
            # negative control: a stop-gradient bug the tape cannot see
            leak = sum(float(p.data.sum()) for p in student.params.values())
            return T.add(fn(params), T.Tensor(np.float64(1e-3 * leak)))
        return corrupted

    losses = {
        "frame-kd": wrap(lambda p: frame_kd_sequence_loss(
            student, features, tokens, teacher_dists)),
        "seq-nll": wrap(lambda p: seq_nll_loss(student, pair)),
        "seq-kd": wrap(lambda p: seq_kd_loss(student, pair)),
    }
    results = {}
    for name, fn in losses.items():
        err, worst = T.finite_difference_check(
            fn, student.params, eps=GRADCHECK_EPS,
            samples_per_param=samples_per_param,
            rng=np.random.default_rng(seed), return_worst=True)
        results[name] = (err, worst)
    return results


def cmd_gradcheck(args) -> int:
    if args.sizes != "tiny":
        raise CliError(f"unsupported --sizes {args.sizes!r}; only 'tiny' exists")
    seed = _resolve_seed(args.seed)
    results = gradcheck_losses(seed)
    worst_err = 0.0
    worst_label = ""
    for name, (err, param) in sorted(results.items()):
        print(f"loss={name} max_rel_err={err:.3e} worst_param={param}")
        if err > worst_err:
            worst_err, worst_label = err, f"{name}/{param}"
    print(f"max relative error: {worst_err:.3e} (threshold {args.threshold:g})")
    if worst_err >= args.threshold:
        print(f"FAIL: {worst_label} exceeds the threshold", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqkd",
        description="Train, distill, decode, and evaluate character-level "
                    "attention recognizers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--utterances", type=int, required=True)
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-len", type=int, default=9)
    p.add_argument("--noise-std", type=float, default=0.3)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--split", help="train,dev,test counts overriding 80/10/10")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("train", help="train a model on transcripts or pseudo labels")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--labels", help="pseudo-label file; replaces ground truth")
    p.add_argument("--config", help="preset name (teacher, student-mid, "
                                    "student-small) or key=value file")
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--decay", type=float, default=0.99)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--teacher-forcing", type=float, default=0.4)
    p.add_argument("--dropout", type=float, default=0.4)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("decode", help="write k-best beam hypotheses as pseudo labels")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam-size", type=int, default=5)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--max-len", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("eval", help="report CER/WER on a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam-size", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all loss paths")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", default="tiny")
    p.add_argument("--threshold", type=float, default=GRADCHECK_THRESHOLD)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
