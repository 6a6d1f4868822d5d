"""Beam search for MMA decoders: head-synchronous and standard variants.

Boundary kinds recorded per (layer, head, step):

* ``natural``   the head found p >= 0.5 itself;
* ``forced``    it lagged ``eps_wait`` frames behind the leftmost boundary of
                its layer and was moved to the layer's rightmost boundary;
* ``exhausted`` it scanned to the last frame without stopping and was moved
                to the rightmost boundary (a streaming failure);
* ``none``      no activation; the head contributes a zero context and its
                pointer stays where it was (logged as the sentinel T + 1).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .model import EOS, SOS, MMATransformer
from .monoattn import first_activation
from .numerics import Tensor, log_softmax, no_grad

log = logging.getLogger(__name__)

NONE, NATURAL, FORCED, EXHAUSTED = 0, 1, 2, 3
KIND_NAMES = ("none", "natural", "forced", "exhausted")
KIND_CODES = {name: i for i, name in enumerate(KIND_NAMES)}


class DecodeError(RuntimeError):
    pass


@dataclass
class BeamConfig:
    beam: int = 10
    eps_wait: int = 8
    alpha_lm: float = 0.5
    beta_len: float = 2.0
    max_len: int = 200

    def __post_init__(self):
        if self.beam < 1 or self.eps_wait < 1 or self.max_len < 1:
            raise ValueError("beam, eps_wait and max_len must all be >= 1")


class LanguageModel(Protocol):
    def score_next(self, prefix: Sequence[int]) -> np.ndarray:
        """Log-probabilities over the vocabulary for the token following ``prefix``."""


class NullLM:
    """Uniform distribution; a placeholder for shallow fusion."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def score_next(self, prefix: Sequence[int]) -> np.ndarray:
        return np.full(self.vocab_size, -math.log(self.vocab_size))


# -- boundary scanning ----------------------------------------------------

def scan_layer(p: np.ndarray, t_prev: np.ndarray, eps_wait: int | None):
    """Find this step's boundaries for every head of one layer.

    p: [K, H, T] stop probabilities, t_prev: [K, H] previous 1-based
    boundaries. ``eps_wait=None`` is the standard (unsynchronised) search.
    Returns (t_new [K, H], kinds [K, H], high_water [K]) where high_water is
    the furthest frame any head had to inspect.
    """
    n_frames = p.shape[-1]
    nat = first_activation(p, t_prev)
    has = nat > 0
    if eps_wait is None:
        kinds = np.where(has, NATURAL, NONE)
        t_new = np.where(has, nat, t_prev)
        high = np.where(has.all(axis=1), nat.max(axis=1), n_frames)
        return t_new, kinds, high
    any_act = has.any(axis=1)
    first = np.where(has, nat, n_frames + 1).min(axis=1)
    horizon = np.minimum(first + eps_wait - 1, n_frames)
    natural = has & (nat <= horizon[:, None])
    tail = np.where(natural, nat, 0).max(axis=1)
    triggered = (first + eps_wait <= n_frames)[:, None]
    kinds = np.where(natural, NATURAL, np.where(triggered, FORCED, EXHAUSTED))
    t_new = np.where(natural, nat, np.maximum(tail[:, None], t_prev))
    kinds = np.where(any_act[:, None], kinds, NONE)
    t_new = np.where(any_act[:, None], t_new, t_prev)
    high = np.where(any_act, horizon, n_frames)
    return t_new, kinds, high


# -- incremental decoder --------------------------------------------------

@dataclass
class EncoderCache:
    """Per-utterance projections of the encoder output for every MMA layer."""

    n_frames: int
    mono_keys: list[np.ndarray]   # [H, T, d_k]
    chunk_keys: list[np.ndarray]  # [Hc, T, d_c]
    values: list[np.ndarray]      # [Hc, T, d_c]


def _heads(x: np.ndarray, n: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, n, d // n).transpose(1, 0, 2)


def encoder_cache(model: MMATransformer, h: np.ndarray) -> EncoderCache:
    mk, ck, vs = [], [], []
    for layer in model.mma_layers:
        m = layer.mma
        mk.append(_heads(h @ m.w_h.data, m.n_heads))
        ck.append(_heads(h @ m.w_k.data, m._n_chunk))
        vs.append(_heads(h @ m.w_v.data, m._n_chunk))
    return EncoderCache(len(h), mk, ck, vs)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def step_probs(mma, z: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Test-mode stop probabilities for queries z [K, d] against keys [H, T, d_k] -> [K, H, T]."""
    q = (z @ mma.w_s.data).reshape(len(z), mma.n_heads, -1)
    e = np.einsum("khd,htd->kht", q, keys) / math.sqrt(keys.shape[-1]) + mma.r.data[None, :, None]
    return _sigmoid(e)


def step_chunk_energy(mma, z: np.ndarray, keys: np.ndarray) -> np.ndarray:
    q = (z @ mma.w_q.data).reshape(len(z), keys.shape[0], -1)
    return np.einsum("kcd,ctd->kct", q, keys) / math.sqrt(keys.shape[-1])


@dataclass
class StepOutput:
    log_probs: np.ndarray          # [K, V]
    boundaries: np.ndarray         # [K, L, H] 1-based
    kinds: np.ndarray              # [K, L, H]
    high_water: np.ndarray         # [K]
    caches: list                   # per hypothesis: per layer (k, v)


def decoder_step(model: MMATransformer, enc: EncoderCache, last_tokens: np.ndarray, position: int,
                 caches: list, t_prev: np.ndarray, eps_wait: int | None) -> StepOutput:
    """Advance K hypotheses by one output step.

    last_tokens: [K]; position: 0-based index of the token being fed;
    caches: per hypothesis a list (per decoder layer) of (keys, values) or None;
    t_prev: [K, L, H] previous boundaries.
    """
    n_hyp = len(last_tokens)
    n_layers = len(model.dec_layers)
    stacked = []
    for l in range(n_layers):
        if caches[0] is None:
            stacked.append(None)
        else:
            stacked.append((np.stack([c[l][0] for c in caches]), np.stack([c[l][1] for c in caches])))
    t_new = np.array(t_prev, copy=True)
    kinds = np.zeros_like(t_prev)
    high = np.zeros(n_hyp, dtype=np.int64)
    new_layer_caches = []
    with no_grad():
        x = model.embed_tokens(np.asarray(last_tokens)[:, None], offset=position)
        m_idx = 0
        for l, layer in enumerate(model.dec_layers):
            y, kv = layer.attn.step(layer.ln1(x), stacked[l])
            new_layer_caches.append(kv)
            x = x + y
            if layer.mma is not None:
                z = layer.ln_mma(x).data[:, 0]
                p = step_probs(layer.mma, z, enc.mono_keys[m_idx])
                tb, kd, hw = scan_layer(p, t_prev[:, m_idx], eps_wait)
                t_new[:, m_idx], kinds[:, m_idx] = tb, kd
                high = np.maximum(high, hw)
                u = step_chunk_energy(layer.mma, z, enc.chunk_keys[m_idx])
                attend = np.where(kd != NONE, tb, 0)
                ctx = layer.mma.context_at(u, enc.values[m_idx], attend)
                x = x + Tensor(ctx[:, None, :])
                m_idx += 1
            x = x + layer.ffn(layer.ln2(x))
        logits = model.out(model.dec_norm(x))
        lp = log_softmax(logits).data[:, 0].astype(np.float64)
    per_hyp = [[(kv[0][k], kv[1][k]) for kv in new_layer_caches] for k in range(n_hyp)]
    return StepOutput(lp, t_new, kinds, high, per_hyp)


# -- hypotheses and pruning -----------------------------------------------

@dataclass
class Hypothesis:
    tokens: list[int]
    log_prob_mma: float = 0.0
    lm_score: float = 0.0
    score: float = 0.0
    boundaries: np.ndarray | None = None      # [L, H] 1-based
    decoder_cache: list | None = None
    finished: bool = False
    boundary_log: list = field(default_factory=list)

    @property
    def length(self) -> int:
        """Emitted tokens, excluding sos (eos included once emitted)."""
        return len(self.tokens) - 1

    def sort_key(self):
        return (-self.score, len(self.tokens), tuple(self.tokens))


def prune(candidates: list[Hypothesis], finished: list[Hypothesis], beam: int):
    """Split scored candidates into the next beam and the finished set.

    eos-terminated candidates ranking within the overall top ``beam`` join the
    finished set (capped at ``beam``); the next beam is the top ``beam``
    candidates that did not end in eos. Ties break on shorter length, then
    lexicographic token order.
    """
    if not candidates:
        raise DecodeError("prune() received no candidates")
    ranked = sorted(candidates, key=Hypothesis.sort_key)
    ended = [c for c in ranked[:beam] if c.tokens[-1] == EOS]
    for c in ended:
        c.finished = True
    new_beam = [c for c in ranked if c.tokens[-1] != EOS][:beam]
    finished = sorted(finished + ended, key=Hypothesis.sort_key)[:beam]
    return new_beam, finished


# -- search ---------------------------------------------------------------

@dataclass
class DecodeResult:
    hypotheses: list[Hypothesis]
    beam_log: list[dict]
    n_frames: int
    total_heads: int
    unfinished: bool = False

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]


def _log_entry(step: int, boundaries: np.ndarray, kinds: np.ndarray, high: int, n_frames: int) -> dict:
    frames = np.where(kinds == NONE, n_frames + 1, boundaries)
    return {"step": step, "frames": frames.tolist(), "kinds": [[KIND_NAMES[k] for k in row] for row in kinds],
            "read": int(high)}


def beam_search(model: MMATransformer, h: np.ndarray, cfg: BeamConfig, lm: LanguageModel | None = None,
                sync: bool = True) -> DecodeResult:
    """Decode one utterance from encoder output ``h`` [T, d_model]."""
    h = np.asarray(h)
    if h.ndim != 2 or len(h) == 0:
        raise ValueError("h must be a non-empty [T, d_model] array")
    lm = lm or NullLM(model.cfg.vocab_size)
    eps_wait = cfg.eps_wait if sync else None
    enc = encoder_cache(model, h)
    n_frames = len(h)
    n_mma = len(model.mma_layers)
    n_heads = model.cfg.n_heads_ma
    start = Hypothesis([SOS], boundaries=np.ones((n_mma, n_heads), dtype=np.int64))
    beam, finished, beam_log = [start], [], []
    for i in range(1, cfg.max_len + 1):
        out = decoder_step(model, enc, np.array([b.tokens[-1] for b in beam]), i - 1,
                           [b.decoder_cache for b in beam] if beam[0].decoder_cache is not None else [None],
                           np.stack([b.boundaries for b in beam]), eps_wait)
        failed = np.isin(out.kinds, (NONE, EXHAUSTED)).reshape(len(beam), -1).any(axis=1)
        beam_log.append({"step": i, "candidates": len(beam), "failures": int(failed.sum())})
        candidates = []
        for k, hyp in enumerate(beam):
            lm_lp = np.asarray(lm.score_next(hyp.tokens), dtype=np.float64)
            fused = out.log_probs[k] + cfg.alpha_lm * lm_lp
            top = np.argsort(-fused, kind="stable")[: cfg.beam]
            entry = _log_entry(i, out.boundaries[k], out.kinds[k], out.high_water[k], n_frames)
            for tok in top:
                tok = int(tok)
                c = Hypothesis(hyp.tokens + [tok],
                               log_prob_mma=hyp.log_prob_mma + float(out.log_probs[k, tok]),
                               lm_score=hyp.lm_score + float(lm_lp[tok]),
                               boundaries=out.boundaries[k],
                               decoder_cache=out.caches[k],
                               boundary_log=hyp.boundary_log + [entry])
                c.score = c.log_prob_mma + cfg.alpha_lm * c.lm_score + cfg.beta_len * c.length
                candidates.append(c)
        beam, finished = prune(candidates, finished, cfg.beam)
        if len(finished) >= cfg.beam or not beam:
            break
    unfinished = not finished
    if unfinished:
        log.warning("no hypothesis emitted eos within %d steps; returning best partial", cfg.max_len)
        finished = sorted(beam, key=Hypothesis.sort_key)[:1]
    for hyp in finished:
        hyp.decoder_cache = None
    return DecodeResult(finished, beam_log, n_frames, n_mma * n_heads, unfinished)


def head_sync_decode(model, h, cfg: BeamConfig, lm=None) -> DecodeResult:
    return beam_search(model, h, cfg, lm, sync=True)


def standard_decode(model, h, cfg: BeamConfig, lm=None) -> DecodeResult:
    return beam_search(model, h, cfg, lm, sync=False)


# -- reference path -------------------------------------------------------

def teacher_forced_hard(model: MMATransformer, h: np.ndarray, y_in: Sequence[int], eps_wait: int | None = None):
    """Hard-attention decoder over a full prefix without caching.

    Runs layer by layer (all positions at once through the causal SAN) and
    scans boundaries step by step inside each MMA layer. Returns
    (log_probs [U, V], boundaries [U, L, H], kinds [U, L, H]).
    """
    enc = encoder_cache(model, np.asarray(h))
    y = np.asarray(y_in)[None]
    n_u = y.shape[1]
    n_mma = len(model.mma_layers)
    bnds = np.zeros((n_u, n_mma, model.cfg.n_heads_ma), dtype=np.int64)
    kinds = np.zeros_like(bnds)
    causal = np.tril(np.ones((n_u, n_u), dtype=bool))[None, None]
    with no_grad():
        x = model.embed_tokens(y)
        m_idx = 0
        for layer in model.dec_layers:
            x = x + layer.attn(layer.ln1(x), causal)
            if layer.mma is not None:
                z = layer.ln_mma(x).data[0]
                p = step_probs(layer.mma, z, enc.mono_keys[m_idx])
                t_prev = np.ones((1, model.cfg.n_heads_ma), dtype=np.int64)
                for i in range(n_u):
                    tb, kd, _ = scan_layer(p[i:i + 1], t_prev, eps_wait)
                    bnds[i, m_idx], kinds[i, m_idx] = tb[0], kd[0]
                    t_prev = tb
                u = step_chunk_energy(layer.mma, z, enc.chunk_keys[m_idx])
                attend = np.where(kinds[:, m_idx] != NONE, bnds[:, m_idx], 0)
                ctx = layer.mma.context_at(u, enc.values[m_idx], attend)
                x = x + Tensor(ctx[None])
                m_idx += 1
            x = x + layer.ffn(layer.ln2(x))
        lp = log_softmax(model.out(model.dec_norm(x))).data[0]
    return lp, bnds, kinds


# -- output records -------------------------------------------------------

def to_record(result: DecodeResult, utt_id: str) -> dict:
    """JSON-serialisable summary of one decode; tokens are task symbols without specials."""
    from .model import N_SPECIAL
    best = result.best
    emitted = [t for t in best.tokens[1:] if t != EOS]
    forced = sum(k in ("forced", "exhausted") for e in best.boundary_log for row in e["kinds"] for k in row)
    streamable = all(e["failures"] == 0 for e in result.beam_log[: len(emitted)])
    return {
        "id": utt_id,
        "tokens": [t - N_SPECIAL for t in emitted],
        "score": best.score,
        "log_prob_mma": best.log_prob_mma,
        "lm_score": best.lm_score,
        "n_frames": result.n_frames,
        "total_heads": result.total_heads,
        "boundary_log": best.boundary_log,
        "beam_log": result.beam_log,
        "forced_count": int(forced),
        "streamable": bool(streamable),
        "unfinished": result.unfinished,
    }
