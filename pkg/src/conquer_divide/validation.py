"""Input validation helpers for the array-facing entry points."""

from __future__ import annotations

import numpy as np

from .data import LABEL_NEGATIVE, LABEL_POSITIVE, LABEL_UNOBSERVED


def check_images(X) -> np.ndarray:
    """Coerce to (N, H, W) float32 in [0, 1] with sides divisible by 8."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"expected images of shape (N, H, W), got {arr.shape}")
    if arr.shape[1] % 8 or arr.shape[2] % 8:
        raise ValueError(f"image sides must be multiples of 8, got {arr.shape[1:]}")
    if not np.isfinite(arr).all():
        raise ValueError("images contain non-finite values")
    if arr.size and (arr.min() < -1e-6 or arr.max() > 1 + 1e-6):
        raise ValueError("image values must lie in [0, 1]")
    return arr


def check_ternary_labels(y, num_classes: int | None = None) -> np.ndarray:
    """Coerce to (N, c) integer labels from {0 negative, 1 positive, 2 unobserved}."""
    arr = np.asarray(y)
    if arr.ndim != 2:
        raise ValueError(f"expected labels of shape (N, c), got {arr.shape}")
    arr = arr.astype(np.int64)
    valid = np.isin(arr, (LABEL_NEGATIVE, LABEL_POSITIVE, LABEL_UNOBSERVED))
    if not valid.all():
        raise ValueError("labels must be 0 (negative), 1 (positive) or 2 (unobserved)")
    if num_classes is not None and arr.shape[1] != num_classes:
        raise ValueError(f"expected {num_classes} label columns, got {arr.shape[1]}")
    return arr


def check_source_ids(source_ids, n_samples: int) -> np.ndarray:
    arr = np.asarray(source_ids, dtype=np.int64).ravel()
    if arr.shape[0] != n_samples:
        raise ValueError(f"expected {n_samples} source ids, got {arr.shape[0]}")
    if arr.size and arr.min() < 0:
        raise ValueError("source ids must be non-negative")
    return arr


def check_token_lists(tokens, n_samples: int, vocab_size: int) -> list[list[int]]:
    if len(tokens) != n_samples:
        raise ValueError(f"expected {n_samples} token sequences, got {len(tokens)}")
    out = []
    for i, seq in enumerate(tokens):
        seq = [int(t) for t in seq]
        if not seq:
            raise ValueError(f"token sequence {i} is empty")
        if any(not 0 <= t < vocab_size for t in seq):
            raise ValueError(f"token sequence {i} has ids outside the vocabulary")
        out.append(seq)
    return out
