"""scikit-learn style wrapper: ``fit(X, y)`` on frame sequences and token lists."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .decoding import BeamConfig, beam_search, to_record
from .metrics import corpus_wer
from .model import N_SPECIAL, ModelConfig, load_model, save_model
from .synthdata import SyntheticSample
from .training import TrainConfig, fit_model
from .validation import check_frames, check_targets

DECODE_MODES = ("head-sync", "standard")


class MMATransducer(BaseEstimator):
    """Transformer encoder-decoder with monotonic multihead attention.

    ``X`` is a sequence of [T_raw, d_in] frame arrays; ``y`` a sequence of
    token lists over symbols ``0 .. n_symbols - 1``.
    """

    def __init__(self, n_symbols=None, d_model=64, d_ff=256, n_heads=4, n_heads_ma=4, n_heads_ca=1,
                 chunk_width=4, n_enc_layers=4, n_dec_layers=4, d_lm=3, p_hd=0.5, frame_stack_factor=4,
                 label_smoothing=0.1, dropout=0.1, noise_std=1.0, steps=3000, batch_size=32, warmup=400,
                 lr_constant=1.0, beam=10, eps_wait=8, alpha_lm=0.5, beta_len=2.0, max_len=200,
                 decode_mode="head-sync", random_state=0):
        self.n_symbols = n_symbols
        self.d_model = d_model
        self.d_ff = d_ff
        self.n_heads = n_heads
        self.n_heads_ma = n_heads_ma
        self.n_heads_ca = n_heads_ca
        self.chunk_width = chunk_width
        self.n_enc_layers = n_enc_layers
        self.n_dec_layers = n_dec_layers
        self.d_lm = d_lm
        self.p_hd = p_hd
        self.frame_stack_factor = frame_stack_factor
        self.label_smoothing = label_smoothing
        self.dropout = dropout
        self.noise_std = noise_std
        self.steps = steps
        self.batch_size = batch_size
        self.warmup = warmup
        self.lr_constant = lr_constant
        self.beam = beam
        self.eps_wait = eps_wait
        self.alpha_lm = alpha_lm
        self.beta_len = beta_len
        self.max_len = max_len
        self.decode_mode = decode_mode
        self.random_state = random_state

    # -- configuration ---------------------------------------------------
    def _model_config(self, d_in: int, n_symbols: int) -> ModelConfig:
        return ModelConfig(d_in=d_in, vocab_size=n_symbols + N_SPECIAL, d_model=self.d_model, d_ff=self.d_ff,
                           n_heads=self.n_heads, n_heads_ma=self.n_heads_ma, n_heads_ca=self.n_heads_ca,
                           chunk_width=self.chunk_width, n_enc_layers=self.n_enc_layers,
                           n_dec_layers=self.n_dec_layers, d_lm=self.d_lm, p_hd=self.p_hd,
                           frame_stack_factor=self.frame_stack_factor, label_smoothing=self.label_smoothing,
                           dropout=self.dropout, noise_std=self.noise_std)

    def beam_config(self) -> BeamConfig:
        return BeamConfig(beam=self.beam, eps_wait=self.eps_wait, alpha_lm=self.alpha_lm,
                          beta_len=self.beta_len, max_len=self.max_len)

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this MMATransducer is not fitted yet; call fit() first")

    # -- estimator API ---------------------------------------------------
    def fit(self, X, y, callback=None):
        frames = check_frames(X, min_len=self.frame_stack_factor)
        targets = check_targets(y, len(frames), self.n_symbols)
        n_symbols = self.n_symbols or max(max(t) for t in targets) + 1
        if self.decode_mode not in DECODE_MODES:
            raise ValueError(f"decode_mode must be one of {DECODE_MODES}")
        cfg = self._model_config(frames[0].shape[1], n_symbols)
        samples = [SyntheticSample(str(i), f, t, []) for i, (f, t) in enumerate(zip(frames, targets))]
        train = TrainConfig(steps=self.steps, batch_size=self.batch_size, warmup=self.warmup,
                            lr_constant=self.lr_constant, seed=self.random_state, log_every=0)
        state = fit_model(cfg, samples, train, callback)
        self.model_ = state.model
        self.n_symbols_ = n_symbols
        self.n_features_in_ = cfg.d_in
        self.loss_curve_ = [loss for _, loss, _ in state.history]
        return self

    def encode(self, X) -> list[np.ndarray]:
        self._check_fitted()
        frames = check_frames(X, self.n_features_in_, self.frame_stack_factor)
        out = []
        for f in frames:
            h, _ = self.model_.encode([f])
            out.append(h.data[0])
        return out

    def decode(self, X, ids=None, mode=None, lm=None) -> list[dict]:
        """Beam-search every utterance; returns decode records (see :func:`decoding.to_record`)."""
        mode = mode or self.decode_mode
        if mode not in DECODE_MODES:
            raise ValueError(f"mode must be one of {DECODE_MODES}")
        cfg = self.beam_config()
        hs = self.encode(X)
        ids = ids if ids is not None else [str(i) for i in range(len(hs))]
        return [to_record(beam_search(self.model_, h, cfg, lm, sync=mode == "head-sync"), uid)
                for h, uid in zip(hs, ids)]

    def predict(self, X) -> list[list[int]]:
        return [r["tokens"] for r in self.decode(X)]

    def score(self, X, y) -> float:
        """Token accuracy ``1 - WER / 100`` (higher is better, may be negative)."""
        hyps = self.predict(X)
        refs = check_targets(y, len(hyps))
        return 1.0 - corpus_wer(zip(hyps, refs)) / 100.0

    # -- persistence -----------------------------------------------------
    def save(self, path) -> None:
        self._check_fitted()
        save_model(self.model_, path, {"estimator": self.get_params()})

    @classmethod
    def load(cls, path) -> "MMATransducer":
        model, config = load_model(path)
        params = dict(config.get("estimator", {}))
        own = cls().get_params()
        params.update({k: v for k, v in model.cfg.to_dict().items() if k in own})
        est = cls(**params)
        est.model_ = model
        est.n_symbols_ = model.cfg.vocab_size - N_SPECIAL
        est.n_features_in_ = model.cfg.d_in
        return est
