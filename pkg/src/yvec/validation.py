"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np


def check_waveform_list(X) -> list[np.ndarray]:
    """Coerce X into a list of finite, nonempty 1-d float32 waveforms."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = list(X)
    try:
        n = len(X)
    except TypeError as exc:
        raise TypeError("X must be a sequence of 1-d waveforms") from exc
    if n == 0:
        raise ValueError("X is empty")
    waves = []
    for i, w in enumerate(X):
        arr = np.asarray(w, dtype=np.float32)
        if arr.ndim != 1:
            raise ValueError(f"waveform {i} has shape {arr.shape}; expected 1-d samples")
        if arr.size == 0:
            raise ValueError(f"waveform {i} is empty")
        if not np.isfinite(arr).all():
            raise ValueError(f"waveform {i} contains NaN or Inf")
        waves.append(arr)
    return waves


def check_labels(y, n_samples: int) -> np.ndarray:
    if y is None:
        raise ValueError("fitting requires speaker labels y")
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError(f"y must be 1-d with {n_samples} entries, got shape {y.shape}")
    return y
