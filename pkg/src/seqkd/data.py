"""Dataset ingestion: the 31-class character vocabulary, WAV to STFT
features, bit-exact feature files, line-delimited manifests, and a
synthetic desk-scale corpus generator.
"""

from __future__ import annotations

import json
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import EOS_ID, SOS_ID

FEATURE_MAGIC = b"SKDF"
FEATURE_VERSION = 1

SAMPLE_RATE = 16000
STFT_WINDOW = 320  # 20 ms at 16 kHz
STFT_HOP = 160     # 10 ms
STFT_BINS = STFT_WINDOW // 2 + 1  # 161

LETTERS = "abcdefghijklmnopqrstuvwxyz"


class Vocabulary:
    """sos, eos, space, apostrophe, period, then a..z: 31 symbols."""

    def __init__(self):
        self.symbols = ["<sos>", "<eos>", " ", "'", "."] + list(LETTERS)
        self._char_to_id = {s: i for i, s in enumerate(self.symbols) if len(s) == 1}

    def __len__(self) -> int:
        return len(self.symbols)

    def char_id(self, ch: str) -> int | None:
        return self._char_to_id.get(ch)

    def tokenize(self, text: str) -> list[int]:
        """Character ids plus terminal eos; sos never appears in targets."""
        lowered = text.lower()
        ids = []
        for pos, ch in enumerate(lowered):
            tid = self._char_to_id.get(ch)
            if tid is None:
                raise ValueError(
                    f"character {ch!r} at position {pos} is not in the "
                    f"31-class inventory")
            ids.append(tid)
        ids.append(EOS_ID)
        return ids

    def detokenize(self, ids) -> str:
        """Characters for a token sequence; the terminal eos is dropped."""
        chars = []
        for pos, tid in enumerate(ids):
            if tid == EOS_ID:
                if pos != len(ids) - 1:
                    raise ValueError(f"eos at interior position {pos}")
                break
            if tid == SOS_ID:
                raise ValueError(f"sos (id {SOS_ID}) has no character rendering")
            if not 0 <= tid < len(self.symbols):
                raise ValueError(f"token id {tid} outside the vocabulary")
            chars.append(self.symbols[tid])
        return "".join(chars)

    def renderable(self, ids) -> bool:
        """True when every non-terminal token maps to a character."""
        return all(tid != SOS_ID and 0 <= tid < len(self.symbols)
                   for tid in ids[:-1]) and (len(ids) == 0 or EOS_ID not in ids[:-1])


VOCAB = Vocabulary()


@dataclass
class FeatureSequence:
    """S x D acoustic (or synthetic) frames for one utterance."""

    frames: np.ndarray
    utterance_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ValueError(f"frames must be S x D with S, D >= 1, got "
                             f"{self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")


@dataclass
class Utterance:
    utterance_id: str
    features: np.ndarray  # (S, D)
    text: str


# ---------------------------------------------------------------------------
# WAV ingestion and STFT
# ---------------------------------------------------------------------------


def read_wav(path) -> np.ndarray:
    """16 kHz mono 16-bit PCM samples as float in [-1, 1)."""
    with wave.open(str(path), "rb") as w:
        channels = w.getnchannels()
        width = w.getsampwidth()
        rate = w.getframerate()
        if rate != SAMPLE_RATE or channels != 1 or width != 2:
            raise ValueError(
                f"expected 16-bit mono PCM at {SAMPLE_RATE} Hz, found "
                f"rate={rate}, channels={channels}, sample_width={width}")
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples


def stft_magnitude(samples: np.ndarray) -> np.ndarray:
    """Hanning-windowed magnitude spectrogram: (frames, 161).

    Window 320 samples, hop 160, transform size 320. Frame count is
    (N - 320) // 160 + 1, so at least 320 samples are required.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if n < STFT_WINDOW:
        raise ValueError(f"need at least {STFT_WINDOW} samples, got {n}")
    frames = np.lib.stride_tricks.sliding_window_view(samples, STFT_WINDOW)[::STFT_HOP]
    window = np.hanning(STFT_WINDOW)
    return np.abs(np.fft.rfft(frames * window, n=STFT_WINDOW, axis=1))


def stft_features(samples: np.ndarray, utterance_id: str = "") -> FeatureSequence:
    """Magnitude STFT with per-utterance mean/variance normalization."""
    mag = stft_magnitude(samples)
    mean = mag.mean(axis=0)
    std = mag.std(axis=0)
    normalized = (mag - mean) / (std + 1e-8)
    return FeatureSequence(normalized.astype(np.float32), utterance_id)


# ---------------------------------------------------------------------------
# feature files: magic, version, S, D, then S*D little-endian float32
# ---------------------------------------------------------------------------


def write_feature_file(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise ValueError(f"feature files hold S x D matrices, got {frames.shape}")
    s, d = frames.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, s, d))
        f.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_feature_file(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != FEATURE_MAGIC:
        raise ValueError(f"bad feature magic at offset 0: expected "
                         f"{FEATURE_MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 16:
        raise ValueError(f"truncated header: expected 16 bytes, have {len(blob)}")
    version, s, d = struct.unpack("<III", blob[4:16])
    if version != FEATURE_VERSION:
        raise ValueError(f"unsupported feature version {version} at offset 4, "
                         f"expected {FEATURE_VERSION}")
    expected = 16 + 4 * s * d
    if len(blob) != expected:
        raise ValueError(f"feature payload for {s}x{d} needs {expected} bytes, "
                         f"file has {len(blob)}")
    return np.frombuffer(blob[16:], dtype="<f4").reshape(s, d).copy()


# ---------------------------------------------------------------------------
# manifests: one JSON record per line with id, audio|features, text
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    utterance_id: str
    text: str
    audio: str | None = None
    features: str | None = None

    def __post_init__(self):
        if (self.audio is None) == (self.features is None):
            raise ValueError(
                f"record {self.utterance_id!r} needs exactly one of audio/features")


def save_manifest(path, records: list[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            entry = {"id": r.utterance_id, "text": r.text}
            if r.audio is not None:
                entry["audio"] = r.audio
            else:
                entry["features"] = r.features
            f.write(json.dumps(entry, sort_keys=True, ensure_ascii=False) + "\n")


def load_manifest(path) -> list[ManifestRecord]:
    records = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            rec = ManifestRecord(utterance_id=entry["id"], text=entry["text"],
                                 audio=entry.get("audio"),
                                 features=entry.get("features"))
            if rec.utterance_id in seen:
                raise ValueError(f"duplicate utterance id {rec.utterance_id!r} "
                                 f"at line {lineno}")
            seen.add(rec.utterance_id)
            records.append(rec)
    return records


def load_utterance(record: ManifestRecord, base_dir) -> Utterance:
    """Resolve a manifest record to frames, via feature file or WAV."""
    base = Path(base_dir)
    if record.features is not None:
        frames = read_feature_file(base / record.features)
    else:
        frames = stft_features(read_wav(base / record.audio)).frames
    return Utterance(record.utterance_id, frames, record.text)


def load_utterances(manifest_path) -> list[Utterance]:
    base = Path(manifest_path).parent
    return [load_utterance(r, base) for r in load_manifest(manifest_path)]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

SYNTH_DIM = 16
SYNTH_CHARS = LETTERS + " "
# Pattern scale against the usual noise_std 0.3: small enough that model
# capacity separates teacher from student, large enough that a 2x64
# teacher still lands under 10% CER on 2000 utterances.
SYNTH_PATTERN_SCALE = 0.55


def synth_patterns(seed: int, dim: int = SYNTH_DIM) -> dict[str, np.ndarray]:
    """One fixed pattern vector per letter-or-space, derived from the seed."""
    rng = np.random.default_rng([seed, 1])
    return {ch: rng.uniform(-SYNTH_PATTERN_SCALE, SYNTH_PATTERN_SCALE, size=dim)
            for ch in SYNTH_CHARS}


def synth_transcript(rng: np.random.Generator, min_len: int, max_len: int) -> str:
    """Space-separated words of random letters, at most max_len chars total
    (one char may be shaved off the drawn target when a word boundary
    falls on the budget)."""
    target = int(rng.integers(min_len, max_len + 1))
    words = []
    used = 0
    while used < target:
        room = target - used - (1 if words else 0)
        if room < 1:
            break
        length = min(int(rng.integers(1, 6)), room)
        words.append("".join(LETTERS[i] for i in rng.integers(0, 26, size=length)))
        used += length + (1 if len(words) > 1 else 0)
    return " ".join(words)


def synth_utterance(transcript: str, patterns: dict[str, np.ndarray],
                    noise_std: float, rng: np.random.Generator,
                    dim: int = SYNTH_DIM) -> np.ndarray:
    """Each character becomes 2-4 consecutive noisy copies of its pattern."""
    rows = []
    for ch in transcript:
        repeats = int(rng.integers(2, 5))
        for _ in range(repeats):
            rows.append(patterns[ch] + noise_std * rng.standard_normal(dim))
    return np.asarray(rows, dtype=np.float32)


def split_sizes(n: int, split: tuple[int, int, int] | None = None) -> tuple[int, int, int]:
    """Default 80/10/10: dev and test each get n // 10, train the rest."""
    if split is not None:
        if sum(split) != n or any(s < 0 for s in split):
            raise ValueError(f"split {split} does not partition {n} utterances")
        return split
    dev = n // 10
    test = n // 10
    return n - dev - test, dev, test


def generate_synth_corpus(out_dir, n_utterances: int, min_len: int, max_len: int,
                          noise_std: float, seed: int,
                          dim: int = SYNTH_DIM,
                          split: tuple[int, int, int] | None = None
                          ) -> dict[str, int]:
    """Write feature files plus train/dev/test manifests; pure in the seed."""
    if n_utterances < 1:
        raise ValueError("refusing to generate an empty corpus")
    if not 1 <= min_len <= max_len:
        raise ValueError(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    patterns = synth_patterns(seed, dim)
    records = []
    for idx in range(n_utterances):
        rng = np.random.default_rng([seed, 2, idx])
        text = synth_transcript(rng, min_len, max_len)
        frames = synth_utterance(text, patterns, noise_std, rng, dim)
        rel = f"features/utt{idx:05d}.skdf"
        write_feature_file(out / rel, frames)
        records.append(ManifestRecord(utterance_id=f"utt{idx:05d}", text=text,
                                      features=rel))
    order = np.random.default_rng([seed, 3]).permutation(n_utterances)
    n_train, n_dev, n_test = split_sizes(n_utterances, split)
    shuffled = [records[i] for i in order]
    parts = {
        "train": shuffled[:n_train],
        "dev": shuffled[n_train:n_train + n_dev],
        "test": shuffled[n_train + n_dev:],
    }
    for name, recs in parts.items():
        save_manifest(out / f"{name}.jsonl", recs)
    return {name: len(recs) for name, recs in parts.items()}
