"""Transformer encoder-decoder whose upper decoder layers use monotonic multihead attention."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .monoattn import AlignmentState, MonotonicMultiheadAttention, merge_heads, split_heads
from .numerics import (
    AdamConfig,
    AdamNoam,
    CheckpointError,
    Embedding,
    Layer,
    LayerNorm,
    Linear,
    NonFiniteError,
    RandomStreams,
    Tensor,
    log_softmax,
    masked_softmax,
    matmul,
    relu,
    load_checkpoint,
    save_checkpoint,
)
from .numerics.tensor import transpose

PAD, SOS, EOS = 0, 1, 2
N_SPECIAL = 3


@dataclass
class ChunkMask:
    left: int
    current: int
    right: int

    def __post_init__(self):
        if self.current < 1 or self.left < 0 or self.right < 0:
            raise ValueError("chunk sizes must satisfy current >= 1, left/right >= 0")


@dataclass
class ModelConfig:
    d_in: int = 8
    vocab_size: int = 23
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    n_heads_ma: int = 4
    n_heads_ca: int = 1
    chunk_width: int = 4
    n_enc_layers: int = 4
    n_dec_layers: int = 4
    d_lm: int = 3
    p_hd: float = 0.5
    frame_stack_factor: int = 4
    label_smoothing: float = 0.1
    dropout: float = 0.1
    noise_std: float = 1.0
    chunk_mask: ChunkMask | None = None

    def __post_init__(self):
        if isinstance(self.chunk_mask, dict):
            self.chunk_mask = ChunkMask(**self.chunk_mask)
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.d_lm <= self.n_dec_layers - 1:
            raise ValueError(f"d_lm must lie in [0, {self.n_dec_layers - 1}], got {self.d_lm}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % (self.n_heads_ma * self.n_heads_ca):
            raise ValueError("d_model must be divisible by n_heads_ma * n_heads_ca")
        if self.chunk_width < 1 or self.frame_stack_factor < 1:
            raise ValueError("chunk_width and frame_stack_factor must be >= 1")
        if self.vocab_size <= N_SPECIAL:
            raise ValueError("vocab_size must exceed the 3 special symbols")
        if not 0.0 <= self.p_hd < 1.0:
            raise ValueError("p_hd must lie in [0, 1)")

    @property
    def n_mma_layers(self) -> int:
        return self.n_dec_layers - self.d_lm

    @property
    def total_ma_heads(self) -> int:
        return self.n_mma_layers * self.n_heads_ma

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


# -- helpers --------------------------------------------------------------

def sinusoid_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    table = np.zeros((n, d), dtype=np.float32)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table


def stack_frames(frames: np.ndarray, factor: int) -> np.ndarray:
    """Concatenate groups of ``factor`` frames (zero-padding the tail): [T_raw, d] -> [ceil(T_raw/f), f*d]."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2 or len(frames) == 0:
        raise ValueError("frames must be a non-empty [T, d_in] array")
    n = math.ceil(len(frames) / factor)
    padded = np.zeros((n * factor, frames.shape[1]), dtype=np.float32)
    padded[: len(frames)] = frames
    return padded.reshape(n, factor * frames.shape[1])


def chunk_attention_mask(n_frames: int, chunk: ChunkMask | None) -> np.ndarray:
    """[T, T] boolean mask; row t may attend [chunk_start - left, chunk_end + right] of t's chunk."""
    if chunk is None:
        return np.ones((n_frames, n_frames), dtype=bool)
    idx = np.arange(n_frames)
    start = (idx // chunk.current) * chunk.current
    end = start + chunk.current - 1
    lo = start - chunk.left
    hi = end + chunk.right
    return (idx[None, :] >= lo[:, None]) & (idx[None, :] <= hi[:, None])


def dropout(x: Tensor, rate: float, gen: np.random.Generator | None) -> Tensor:
    if gen is None or rate <= 0:
        return x
    keep = (gen.random(x.shape, dtype=np.float32) >= rate) * np.float32(1.0 / (1.0 - rate))
    return x * keep


# -- layers ---------------------------------------------------------------

class SelfAttention(Layer):
    def __init__(self, gen, d_model: int, n_heads: int):
        self.q = Linear(gen, d_model, d_model)
        self.k = Linear(gen, d_model, d_model)
        self.v = Linear(gen, d_model, d_model)
        self.o = Linear(gen, d_model, d_model)
        self._h = n_heads

    def __call__(self, x: Tensor, mask: np.ndarray, drop=None, rate: float = 0.0) -> Tensor:
        """x: [B, T, d]; mask broadcastable to [B, H, T, T] (True = may attend)."""
        q = split_heads(self.q(x), self._h)
        k = split_heads(self.k(x), self._h)
        v = split_heads(self.v(x), self._h)
        return self._attend(q, k, v, mask, drop, rate)

    def _attend(self, q, k, v, mask, drop=None, rate=0.0) -> Tensor:
        d_k = q.shape[-1]
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d_k))
        w = dropout(masked_softmax(scores, mask), rate, drop)
        return self.o(merge_heads(matmul(w, v)))

    def step(self, x: Tensor, cache: tuple[np.ndarray, np.ndarray] | None):
        """Attend from one new position x [K, 1, d] over cached keys/values plus itself."""
        q = split_heads(self.q(x), self._h)
        k = split_heads(self.k(x), self._h).data
        v = split_heads(self.v(x), self._h).data
        if cache is not None:
            k = np.concatenate([cache[0], k], axis=2)
            v = np.concatenate([cache[1], v], axis=2)
        out = self._attend(q, Tensor(k), Tensor(v), None)
        return out, (k, v)


class FeedForward(Layer):
    def __init__(self, gen, d_model: int, d_ff: int):
        self.l1 = Linear(gen, d_model, d_ff)
        self.l2 = Linear(gen, d_ff, d_model)

    def __call__(self, x: Tensor, drop=None, rate: float = 0.0) -> Tensor:
        return self.l2(dropout(relu(self.l1(x)), rate, drop))


class EncoderLayer(Layer):
    def __init__(self, gen, cfg: ModelConfig):
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = SelfAttention(gen, cfg.d_model, cfg.n_heads)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(gen, cfg.d_model, cfg.d_ff)

    def __call__(self, x, mask, drop=None, rate=0.0):
        x = x + dropout(self.attn(self.ln1(x), mask, drop, rate), rate, drop)
        return x + dropout(self.ffn(self.ln2(x), drop, rate), rate, drop)


class DecoderLayer(Layer):
    """SAN -> (MMA) -> FFN, pre-norm residual blocks; ``mma`` is None for pruned layers."""

    def __init__(self, gen, cfg: ModelConfig, with_mma: bool):
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = SelfAttention(gen, cfg.d_model, cfg.n_heads)
        if with_mma:
            self.ln_mma = LayerNorm(cfg.d_model)
            self.mma = MonotonicMultiheadAttention(gen, cfg.d_model, cfg.n_heads_ma, cfg.n_heads_ca,
                                                   cfg.chunk_width, cfg.noise_std, cfg.p_hd)
        else:
            self.ln_mma = None
            self.mma = None
        self.ln2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(gen, cfg.d_model, cfg.d_ff)


# -- the model ------------------------------------------------------------

class MMATransformer(Layer):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self._cfg = cfg
        gen = RandomStreams(seed).get("init")
        self.enc_in = Linear(gen, cfg.d_in * cfg.frame_stack_factor, cfg.d_model)
        self.enc_layers = [EncoderLayer(gen, cfg) for _ in range(cfg.n_enc_layers)]
        self.enc_norm = LayerNorm(cfg.d_model)
        self.embed = Embedding(gen, cfg.vocab_size, cfg.d_model)
        self.dec_layers = [DecoderLayer(gen, cfg, with_mma=i >= cfg.d_lm) for i in range(cfg.n_dec_layers)]
        self.dec_norm = LayerNorm(cfg.d_model)
        self.out = Linear(gen, cfg.d_model, cfg.vocab_size)

    @property
    def cfg(self) -> ModelConfig:
        return self._cfg

    @property
    def mma_layers(self) -> list[DecoderLayer]:
        return [layer for layer in self.dec_layers if layer.mma is not None]

    # -- encoder ---------------------------------------------------------
    def encode(self, frames_batch, streams: RandomStreams | None = None, train: bool = False):
        """Encode a list of [T_raw, d_in] arrays -> (h [B, T, d], frame_mask [B, T])."""
        cfg = self._cfg
        if len(frames_batch) == 0:
            raise ValueError("encode() needs at least one utterance")
        stacked = []
        for f in frames_batch:
            f = np.asarray(f, dtype=np.float32)
            if f.ndim != 2 or len(f) == 0:
                raise ValueError("each utterance must be a non-empty [T_raw, d_in] array")
            if len(f) < cfg.frame_stack_factor:
                raise ValueError(f"utterance shorter than frame_stack_factor={cfg.frame_stack_factor}")
            stacked.append(stack_frames(f, cfg.frame_stack_factor))
        n = max(len(s) for s in stacked)
        x = np.zeros((len(stacked), n, stacked[0].shape[1]), dtype=np.float32)
        frame_mask = np.zeros((len(stacked), n), dtype=bool)
        for b, s in enumerate(stacked):
            x[b, : len(s)] = s
            frame_mask[b, : len(s)] = True
        drop, rate = self._dropout(streams, train)
        h = self.enc_in(Tensor(x)) + sinusoid_table(n, cfg.d_model)
        h = dropout(h, rate, drop)
        mask = chunk_attention_mask(n, cfg.chunk_mask)[None, None] & frame_mask[:, None, None, :]
        for layer in self.enc_layers:
            h = layer(h, mask, drop, rate)
        return self.enc_norm(h), frame_mask

    def _dropout(self, streams, train):
        if train and streams is not None and self._cfg.dropout > 0:
            return streams.get("dropout"), self._cfg.dropout
        return None, 0.0

    def embed_tokens(self, ids: np.ndarray, offset: int = 0) -> Tensor:
        n = ids.shape[-1]
        pe = sinusoid_table(offset + n, self._cfg.d_model)[offset:]
        return self.embed(ids) * math.sqrt(self._cfg.d_model) + pe

    # -- decoder (teacher forcing) ----------------------------------------
    def decode_train(self, h: Tensor, frame_mask: np.ndarray, y_in: np.ndarray,
                     streams: RandomStreams | None = None, train: bool = True):
        """Teacher-forced decoder pass.

        y_in: [B, U] decoder inputs (sos + targets without eos). Returns logits
        [B, U, V] and one :class:`AlignmentState` per decoder layer (None for
        pruned layers).
        """
        y_in = np.asarray(y_in)
        if y_in.ndim != 2 or y_in.shape[1] == 0:
            raise ValueError("y_in must be a non-empty [B, U] array")
        n_u = y_in.shape[1]
        drop, rate = self._dropout(streams, train)
        mode = "train" if train else "test"
        hd_gen = streams.get("headdrop") if (train and streams is not None) else None
        noise_gen = streams.get("noise") if (train and streams is not None) else None
        if train and streams is None:
            raise ValueError("training mode needs random streams")
        causal = np.tril(np.ones((n_u, n_u), dtype=bool))
        mask = causal[None, None] & (y_in != PAD)[:, None, None, :]
        mask |= np.eye(n_u, dtype=bool)[None, None]
        x = dropout(self.embed_tokens(y_in), rate, drop)
        states: list[AlignmentState | None] = []
        for layer in self.dec_layers:
            x = x + dropout(layer.attn(layer.ln1(x), mask, drop, rate), rate, drop)
            if layer.mma is not None:
                ctx, st = layer.mma.forward_train(layer.ln_mma(x), h, frame_mask, mode, hd_gen, noise_gen)
                x = x + dropout(ctx, rate, drop)
                states.append(st)
            else:
                states.append(None)
            x = x + dropout(layer.ffn(layer.ln2(x), drop, rate), rate, drop)
        return self.out(self.dec_norm(x)), states

    def forward(self, frames_batch, y_in, streams=None, train=True):
        h, frame_mask = self.encode(frames_batch, streams, train)
        return self.decode_train(h, frame_mask, y_in, streams, train)


def smoothed_nll(logits: Tensor, targets: np.ndarray, smoothing: float = 0.1) -> Tensor:
    """Cross-entropy against (1 - eps) on the gold token and eps / (V - 1) elsewhere,
    averaged over non-pad positions."""
    targets = np.asarray(targets)
    n_vocab = logits.shape[-1]
    dist = np.full(logits.shape, smoothing / (n_vocab - 1), dtype=logits.data.dtype)
    np.put_along_axis(dist, targets[..., None], 1.0 - smoothing, axis=-1)
    valid = (targets != PAD).astype(logits.data.dtype)
    n = max(float(valid.sum()), 1.0)
    dist *= valid[..., None]
    return -(log_softmax(logits) * dist).sum() * (1.0 / n)


def make_batch(token_seqs) -> tuple[np.ndarray, np.ndarray]:
    """Token lists (model ids, no specials) -> (decoder inputs with sos, targets with eos), PAD-filled."""
    n = max(len(t) for t in token_seqs) + 1
    y_in = np.full((len(token_seqs), n), PAD, dtype=np.int64)
    y_out = np.full((len(token_seqs), n), PAD, dtype=np.int64)
    for b, t in enumerate(token_seqs):
        y_in[b, : len(t) + 1] = [SOS, *t]
        y_out[b, : len(t) + 1] = [*t, EOS]
    return y_in, y_out


@dataclass
class TrainState:
    model: MMATransformer
    optimizer: AdamNoam
    streams: RandomStreams
    history: list = field(default_factory=list)


def train_step(state: TrainState, frames_batch, token_seqs) -> float:
    """One forward/backward/update. Raises :class:`NonFiniteError` on a NaN/Inf loss."""
    model = state.model
    y_in, y_out = make_batch(token_seqs)
    state.optimizer.zero_grad()
    logits, _ = model.forward(frames_batch, y_in, state.streams, train=True)
    loss = smoothed_nll(logits, y_out, model.cfg.label_smoothing)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite loss at step {state.optimizer.t + 1}")
    loss.backward()
    lr = state.optimizer.step()
    state.history.append((state.optimizer.t, value, lr))
    return value


def new_train_state(cfg: ModelConfig, seed: int, adam: AdamConfig | None = None,
                    lr_scale: float = 1.0) -> TrainState:
    model = MMATransformer(cfg, seed)
    adam = adam or AdamConfig(d_model=cfg.d_model)
    return TrainState(model, AdamNoam(model.parameters(), adam, lr_scale), RandomStreams(seed))


def save_model(model: MMATransformer, path, extra: dict | None = None) -> None:
    """Write a checkpoint; ``extra`` is stored next to the model config."""
    config = {"model": model.cfg.to_dict(), **(extra or {})}
    save_checkpoint(path, config, model.state_dict())


def load_model(path) -> tuple[MMATransformer, dict]:
    """Load a checkpoint written by :func:`save_model`; returns (model, full config)."""
    config, params = load_checkpoint(path)
    if "model" not in config:
        raise CheckpointError(f"{path}: checkpoint has no model config")
    model = MMATransformer(ModelConfig.from_dict(config["model"]))
    model.load_state_dict(params)
    return model, config
