"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np


def check_frames(X, d_in: int | None = None, min_len: int = 1) -> list[np.ndarray]:
    """Validate a list of [T_raw, d_in] float arrays; returns float32 copies."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError("X must be a sequence of [T, d_in] arrays, got a single 2-D array")
    out = []
    for i, x in enumerate(X):
        arr = np.asarray(x, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"X[{i}] must be 2-D [T, d_in], got shape {arr.shape}")
        if len(arr) < min_len:
            raise ValueError(f"X[{i}] has {len(arr)} frames, need at least {min_len}")
        if d_in is not None and arr.shape[1] != d_in:
            raise ValueError(f"X[{i}] has {arr.shape[1]} features, expected {d_in}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"X[{i}] contains NaN or Inf")
        out.append(arr)
    if not out:
        raise ValueError("X is empty")
    if d_in is None and len({a.shape[1] for a in out}) > 1:
        raise ValueError("utterances disagree on the feature dimension")
    return out


def check_targets(y, n_samples: int, n_symbols: int | None = None) -> list[list[int]]:
    """Validate token sequences of non-negative symbol ids."""
    seqs = [list(map(int, t)) for t in y]
    if len(seqs) != n_samples:
        raise ValueError(f"got {len(seqs)} targets for {n_samples} inputs")
    for i, t in enumerate(seqs):
        if not t:
            raise ValueError(f"y[{i}] is empty")
        if min(t) < 0:
            raise ValueError(f"y[{i}] has a negative symbol")
        if n_symbols is not None and max(t) >= n_symbols:
            raise ValueError(f"y[{i}] has symbol {max(t)} outside [0, {n_symbols})")
    return seqs
