"""Attention encoder-decoder over acoustic frames.

Pipeline per utterance: an optional strided 2-D conv frontend, a stacked
bidirectional GRU encoder, an attention scorer (dot, bilinear, mlp, or
conv-mlp), a unidirectional GRU decoder fed with the previous token's
embedding concatenated with the attention context, and a log-softmax
output layer. Token id 0 is reserved for sos, id 1 for eos.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SOS_ID = 0
EOS_ID = 1

FRONTEND_FILTERS = 32
FRONTEND_KERNEL = (5, 8)
FRONTEND_STRIDE = (2, 2)

ATTENTION_VARIANTS = ("dot", "bilinear", "mlp", "conv-mlp")

CHECKPOINT_MAGIC = b"SKDC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; parameter names and shapes follow from it."""

    input_dim: int
    encoder_layers: int
    encoder_cells: int
    decoder_layers: int
    decoder_cells: int
    embedding_size: int = 32
    vocab_size: int = 31
    attention_variant: str = "conv-mlp"
    attention_dim: int = 128
    attention_conv_channels: int = 128
    attention_conv_kernel: int = 15
    attention_conv_padding: int = 7
    frontend: str = "conv2d"
    frontend_layers: int = 2
    dropout: float = 0.4

    def __post_init__(self):
        sizes = (self.input_dim, self.encoder_layers, self.encoder_cells,
                 self.decoder_layers, self.decoder_cells, self.embedding_size,
                 self.vocab_size, self.attention_dim)
        if any(s <= 0 for s in sizes):
            raise ValueError(f"all sizes must be positive: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.attention_variant not in ATTENTION_VARIANTS:
            raise ValueError(f"unknown attention variant {self.attention_variant!r}")
        if self.frontend not in ("none", "conv2d"):
            raise ValueError(f"unknown frontend {self.frontend!r}")
        if self.frontend == "conv2d" and self.frontend_layers < 1:
            raise ValueError("conv2d frontend needs at least one layer")
        if self.attention_variant == "dot" and self.encoder_out_width != self.decoder_cells:
            raise ValueError(
                "dot attention requires encoder output width == decoder state "
                f"width, got {self.encoder_out_width} vs {self.decoder_cells}")

    @property
    def encoder_out_width(self) -> int:
        return 2 * self.encoder_cells

    @property
    def encoder_input_width(self) -> int:
        if self.frontend == "none":
            return self.input_dim
        _, width = frontend_output_shape(self, 10 ** 9, self.input_dim)
        return width


def frontend_min_input(config: ModelConfig) -> tuple[int, int]:
    """Smallest (S, D) the conv frontend accepts."""
    kt, kf = FRONTEND_KERNEL
    st, sf = FRONTEND_STRIDE
    s_min, d_min = kt, kf
    for _ in range(config.frontend_layers - 1):
        # previous stage output must itself be at least one kernel extent
        s_min = (s_min - 1) * st + kt
        d_min = (d_min - 1) * sf + kf
    return s_min, d_min


def frontend_output_shape(config: ModelConfig, s: int, d: int) -> tuple[int, int]:
    """(frame count, per-frame width) after the conv stack.

    Each stage maps S to (S - 5) // 2 + 1 and D to (D - 8) // 2 + 1;
    the final frame width is 32 * D_last with frequency-major flattening.
    """
    if config.frontend == "none":
        return s, d
    kt, kf = FRONTEND_KERNEL
    st, sf = FRONTEND_STRIDE
    s_min, d_min = frontend_min_input(config)
    if s < s_min or d < d_min:
        raise ValueError(
            f"frontend input ({s}, {d}) too small: needs at least ({s_min}, {d_min})")
    for _ in range(config.frontend_layers):
        s = (s - kt) // st + 1
        d = (d - kf) // sf + 1
    return s, FRONTEND_FILTERS * d


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Named parameter shapes implied by the config, in a fixed order."""
    shapes: dict[str, tuple[int, ...]] = {}
    kt, kf = FRONTEND_KERNEL
    if config.frontend == "conv2d":
        for i in range(config.frontend_layers):
            cin = 1 if i == 0 else FRONTEND_FILTERS
            shapes[f"frontend.conv{i}.w"] = (FRONTEND_FILTERS, cin, kt, kf)
            shapes[f"frontend.conv{i}.b"] = (FRONTEND_FILTERS,)
    ec = config.encoder_cells
    din = config.encoder_input_width
    for layer in range(config.encoder_layers):
        for direction in ("fwd", "bwd"):
            shapes[f"enc.l{layer}.{direction}.wx"] = (3 * ec, din)
            shapes[f"enc.l{layer}.{direction}.wh"] = (3 * ec, ec)
            shapes[f"enc.l{layer}.{direction}.b"] = (3 * ec,)
        din = 2 * ec
    shapes["embed.table"] = (config.vocab_size, config.embedding_size)
    m = config.encoder_out_width
    n = config.decoder_cells
    din = config.embedding_size + m
    for layer in range(config.decoder_layers):
        shapes[f"dec.l{layer}.wx"] = (3 * n, din)
        shapes[f"dec.l{layer}.wh"] = (3 * n, n)
        shapes[f"dec.l{layer}.b"] = (3 * n,)
        din = n
    if config.attention_variant == "bilinear":
        shapes["attn.w"] = (m, n)
    elif config.attention_variant in ("mlp", "conv-mlp"):
        shapes["attn.w"] = (config.attention_dim, m + n)
        shapes["attn.v"] = (config.attention_dim,)
        if config.attention_variant == "conv-mlp":
            shapes["attn.conv.w"] = (config.attention_conv_channels, 1,
                                     config.attention_conv_kernel)
            shapes["attn.conv.b"] = (config.attention_conv_channels,)
            shapes["attn.proj"] = (config.attention_dim,
                                   config.attention_conv_channels)
    shapes["out.w"] = (config.vocab_size, n)
    shapes["out.b"] = (config.vocab_size,)
    return shapes


def count_parameters(config: ModelConfig) -> int:
    """Exact number of scalar parameters implied by the config."""
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name == "embed.table":
        return shape[1]
    if len(shape) == 1:
        return shape[0]
    return int(np.prod(shape[1:]))


def init_parameters(config: ModelConfig, seed: int = 0,
                    dtype=np.float32) -> dict[str, Tensor]:
    """Weights uniform in +-1/sqrt(fan-in), biases zero, fixed seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(_fan_in(name, shape))
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


@dataclass
class AttentionState:
    """Alignment weights over encoder frames and the resulting context."""

    weights: Tensor  # (S',), nonnegative, sums to 1
    context: Tensor  # (M,), weighted sum of encoder states


class EncoderStates:
    """Encoder output (S', M) plus lazily cached attention projections."""

    def __init__(self, states: Tensor):
        self.states = states
        self._proj = None  # (S', A) for mlp/conv-mlp scores

    @property
    def length(self) -> int:
        return self.states.shape[0]


def gru_cell(wx: Tensor, wh: Tensor, b: Tensor, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU step from a cell's weights: update z, reset r, candidate n,
    then h = (1 - z) * n + z * h_prev. Output stays in (-1, 1) elementwise
    whenever h_prev does."""
    return T.gru_step(T.linear(x_t, wx, b), wh, h_prev)


def score(variant: str, params: dict[str, Tensor], h_e_s: Tensor,
          h_d_t: Tensor) -> Tensor:
    """Compatibility of one encoder state with one decoder state, as a scalar."""
    if variant == "dot":
        if h_e_s.shape != h_d_t.shape:
            raise T.ShapeError(
                f"dot score needs equal widths, got {h_e_s.shape} vs {h_d_t.shape}")
        return T.dot(h_e_s, h_d_t)
    if variant == "bilinear":
        return T.dot(h_e_s, T.matmul(params["attn.w"], h_d_t))
    if variant == "mlp":
        joint = T.concat([h_e_s, h_d_t])
        return T.dot(params["attn.v"], T.tanh(T.matmul(params["attn.w"], joint)))
    raise ValueError(f"score() covers dot/bilinear/mlp, got {variant!r}")


class Seq2SeqModel:
    """Config plus named parameter tensors, with the forward operations."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter names mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ValueError(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Seq2SeqModel":
        return cls(config, init_parameters(config, seed=seed, dtype=dtype))

    @property
    def dtype(self):
        return self.params["out.w"].dtype

    def _zeros(self, n: int) -> Tensor:
        return Tensor(np.zeros(n, dtype=self.dtype))

    # ----- encoder ---------------------------------------------------------

    def frontend(self, frames: Tensor) -> Tensor:
        """Conv stack over an (S, D) frame matrix; identity when disabled.

        Output frames are (S', 32 * D') with channels flattened in
        frequency-major order: column f * 32 + c holds channel c of
        frequency f.
        """
        cfg = self.config
        if cfg.frontend == "none":
            return frames
        s, d = frames.shape
        frontend_output_shape(cfg, s, d)  # validates minimum extent
        x = T.reshape(frames, (1, s, d))
        for i in range(cfg.frontend_layers):
            x = T.conv2d(x, self.params[f"frontend.conv{i}.w"],
                         self.params[f"frontend.conv{i}.b"],
                         stride=FRONTEND_STRIDE)
            x = T.tanh(x)
        c, sp, dp = x.shape
        return T.reshape(T.transpose(x, (1, 2, 0)), (sp, dp * c))

    def encode(self, features, dropout: float = 0.0,
               rng: np.random.Generator | None = None) -> EncoderStates:
        """Frontend plus stacked bi-GRU; rows are per-frame [fwd, bwd] states."""
        x = features if isinstance(features, Tensor) else Tensor(
            np.asarray(features, dtype=self.dtype))
        if x.shape[0] < 1:
            raise ValueError("encode needs at least one frame")
        x = self.frontend(x)
        ec = self.config.encoder_cells
        for layer in range(self.config.encoder_layers):
            fwd = T.gru_sequence(
                T.linear(x, self.params[f"enc.l{layer}.fwd.wx"],
                         self.params[f"enc.l{layer}.fwd.b"]),
                self.params[f"enc.l{layer}.fwd.wh"], self._zeros(ec))
            bwd = T.flip0(T.gru_sequence(
                T.linear(T.flip0(x), self.params[f"enc.l{layer}.bwd.wx"],
                         self.params[f"enc.l{layer}.bwd.b"]),
                self.params[f"enc.l{layer}.bwd.wh"], self._zeros(ec)))
            x = T.concat([fwd, bwd], axis=1)
            if dropout > 0.0 and layer < self.config.encoder_layers - 1:
                x = T.dropout(x, dropout, rng)
        return EncoderStates(x)

    # ----- attention -------------------------------------------------------

    def initial_weights(self, encoder: EncoderStates) -> Tensor | None:
        """Uniform previous-alignment vector for conv-mlp; None otherwise."""
        if self.config.attention_variant != "conv-mlp":
            return None
        n = encoder.length
        return Tensor(np.full(n, 1.0 / n, dtype=self.dtype))

    def attend(self, encoder: EncoderStates, query: Tensor,
               prev_weights: Tensor | None) -> AttentionState:
        """Normalized alignment over encoder frames and their weighted sum."""
        cfg = self.config
        h_e = encoder.states
        if encoder.length == 0:
            raise ValueError("attend over empty encoder states")
        variant = cfg.attention_variant
        if variant == "dot":
            scores = T.matmul(h_e, query)
        elif variant == "bilinear":
            scores = T.matmul(h_e, T.matmul(self.params["attn.w"], query))
        else:
            m = cfg.encoder_out_width
            if encoder._proj is None:
                w_enc = T.getitem(self.params["attn.w"], (slice(None), slice(0, m)))
                encoder._proj = T.linear(h_e, w_enc)
            w_dec = T.getitem(self.params["attn.w"], (slice(None), slice(m, None)))
            arg = T.add(encoder._proj, T.matmul(w_dec, query))
            if variant == "conv-mlp":
                if prev_weights is None:
                    raise ValueError("conv-mlp attention needs previous weights")
                conv = T.conv1d(T.reshape(prev_weights, (encoder.length, 1)),
                                self.params["attn.conv.w"], self.params["attn.conv.b"],
                                padding=cfg.attention_conv_padding)
                arg = T.add(arg, T.linear(conv, self.params["attn.proj"]))
            scores = T.matmul(T.tanh(arg), self.params["attn.v"])
        weights = T.softmax(scores, axis=0)
        context = T.matmul(weights, h_e)
        return AttentionState(weights=weights, context=context)

    # ----- decoder ---------------------------------------------------------

    def initial_state(self) -> list[Tensor]:
        return [self._zeros(self.config.decoder_cells)
                for _ in range(self.config.decoder_layers)]

    def decode_step(self, y_prev: int, state: list[Tensor], encoder: EncoderStates,
                    prev_weights: Tensor | None, dropout: float = 0.0,
                    rng: np.random.Generator | None = None
                    ) -> tuple[Tensor, list[Tensor], AttentionState]:
        """One decoder step conditioned on the previous token.

        Returns (log-distribution over the vocabulary, new decoder state,
        attention state). Attention queries the previous top-layer state.
        """
        cfg = self.config
        if not 0 <= y_prev < cfg.vocab_size:
            raise ValueError(
                f"token id {y_prev} outside vocabulary of size {cfg.vocab_size}")
        att = self.attend(encoder, state[-1], prev_weights)
        emb = T.getitem(self.params["embed.table"], y_prev)
        x = T.concat([emb, att.context])
        new_state: list[Tensor] = []
        for layer in range(cfg.decoder_layers):
            h = T.gru_step(
                T.linear(x, self.params[f"dec.l{layer}.wx"],
                         self.params[f"dec.l{layer}.b"]),
                self.params[f"dec.l{layer}.wh"], state[layer])
            new_state.append(h)
            x = h
            if dropout > 0.0 and layer < cfg.decoder_layers - 1:
                x = T.dropout(x, dropout, rng)
        logits = T.linear(new_state[-1], self.params["out.w"], self.params["out.b"])
        return T.log_softmax(logits, axis=0), new_state, att

    def sequence_log_prob(self, features, tokens, dropout: float = 0.0,
                          rng: np.random.Generator | None = None) -> Tensor:
        """Teacher-forced log p(y | x): the sum of per-step token log-probs.

        ``tokens`` must be nonempty and end with eos; each step conditions
        on the given previous token.
        """
        tokens = list(tokens)
        if not tokens:
            raise ValueError("target token sequence is empty")
        if tokens[-1] != EOS_ID:
            raise ValueError(f"target must end with eos (id {EOS_ID}), got {tokens}")
        for t in tokens:
            if not 0 <= t < self.config.vocab_size:
                raise ValueError(f"token id {t} outside vocabulary")
        encoder = self.encode(features, dropout=dropout, rng=rng)
        state = self.initial_state()
        prev_w = self.initial_weights(encoder)
        total: Tensor | None = None
        prev_token = SOS_ID
        for t, target in enumerate(tokens):
            log_dist, state, att = self.decode_step(
                prev_token, state, encoder, prev_w, dropout=dropout, rng=rng)
            term = T.getitem(log_dist, target)
            total = term if total is None else T.add(total, term)
            prev_w = att.weights
            prev_token = target
        return total


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def _config_to_text(config: ModelConfig) -> str:
    pairs = sorted(dataclasses.asdict(config).items())
    return "".join(f"{k}={v}\n" for k, v in pairs)


def _config_from_text(text: str) -> ModelConfig:
    fields = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    kwargs = {}
    for line in text.splitlines():
        key, _, value = line.partition("=")
        if key not in fields:
            raise ValueError(f"unknown config key {key!r} in checkpoint")
        ftype = fields[key]
        if "int" in ftype:
            kwargs[key] = int(value)
        elif "float" in ftype:
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return ModelConfig(**kwargs)


def save_checkpoint(path, config: ModelConfig, params: dict[str, Tensor]) -> None:
    """Write magic, version, config text, manifest, then 32-bit LE values."""
    names = sorted(params)
    config_blob = _config_to_text(config).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(config_blob)))
        f.write(config_blob)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            blob = name.encode("utf-8")
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            shape = params[name].shape
            f.write(struct.pack("<I", len(shape)))
            for dim in shape:
                f.write(struct.pack("<I", dim))
        for name in names:
            data = np.ascontiguousarray(params[name].data, dtype="<f4")
            f.write(data.tobytes())


def load_checkpoint(path, dtype=np.float32) -> tuple[ModelConfig, dict[str, Tensor]]:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ValueError(
                f"truncated checkpoint at offset {off}: needs {n} bytes for "
                f"{what}, {len(blob) - off} available")
        out = blob[off:off + n]
        off += n
        return out

    magic = take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(
            f"bad checkpoint magic at offset 0: expected {CHECKPOINT_MAGIC!r}, got {magic!r}")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}, "
                         f"expected {CHECKPOINT_VERSION}")
    config_len = struct.unpack("<I", take(4, "config length"))[0]
    config = _config_from_text(take(config_len, "config block").decode("utf-8"))
    count = struct.unpack("<I", take(4, "tensor count"))[0]
    manifest: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        name_len = struct.unpack("<I", take(4, "name length"))[0]
        name = take(name_len, "tensor name").decode("utf-8")
        rank = struct.unpack("<I", take(4, "rank"))[0]
        dims = tuple(struct.unpack("<I", take(4, "dim"))[0] for _ in range(rank))
        manifest.append((name, dims))
    expected = parameter_shapes(config)
    params: dict[str, Tensor] = {}
    for name, dims in manifest:
        if name not in expected:
            raise ValueError(f"checkpoint tensor {name!r} not implied by its config")
        if dims != expected[name]:
            raise ValueError(
                f"checkpoint tensor {name!r} has shape {dims}, config implies {expected[name]}")
        n = int(np.prod(dims))
        raw = take(4 * n, f"values of {name}")
        data = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    if off != len(blob):
        raise ValueError(f"trailing {len(blob) - off} bytes after checkpoint payload")
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        raise ValueError(f"checkpoint missing tensors: {missing}")
    return config, params


def checkpoint_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# named presets
# ---------------------------------------------------------------------------

PRESETS: dict[str, ModelConfig] = {
    "teacher": ModelConfig(input_dim=161, encoder_layers=5, encoder_cells=384,
                           decoder_layers=3, decoder_cells=384),
    "student-mid": ModelConfig(input_dim=161, encoder_layers=4, encoder_cells=256,
                               decoder_layers=1, decoder_cells=256),
    "student-small": ModelConfig(input_dim=161, encoder_layers=3, encoder_cells=128,
                                 decoder_layers=1, decoder_cells=128),
}
