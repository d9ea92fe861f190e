"""Input validation helpers for the estimator facade.

Checks are deliberately strict: silently coercing a ragged feature list
or an empty transcript would surface later as a confusing shape error
deep inside the LM.
"""

from __future__ import annotations

import numpy as np

from .data import normalize_text


class NotFittedError(RuntimeError):
    """Estimator method needs fit() to have run first."""


def check_feature_list(X, expected_dim=None) -> list:
    """Validate a list of [T, d] feature matrices; returns float64 copies.

    All items must share one feature dimension; each needs at least one
    frame. expected_dim pins d (e.g. to the dimension seen during fit).
    """
    if not isinstance(X, (list, tuple)):
        raise TypeError(f"X must be a list of 2d arrays, got {type(X).__name__}")
    if len(X) == 0:
        raise ValueError("X is empty")
    out = []
    dim = expected_dim
    for i, item in enumerate(X):
        arr = np.asarray(item, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"X[{i}]: expected a 2d [T, d] array, got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError(f"X[{i}]: needs at least one frame")
        if not np.isfinite(arr).all():
            raise ValueError(f"X[{i}]: contains non-finite values")
        if dim is None:
            dim = arr.shape[1]
        elif arr.shape[1] != dim:
            raise ValueError(
                f"X[{i}]: feature dim {arr.shape[1]} != {dim} seen earlier"
            )
        out.append(arr)
    return out


def check_transcripts(y, n: int) -> list:
    """Validate transcripts against n utterances; returns normalized text."""
    if not isinstance(y, (list, tuple)):
        raise TypeError(f"y must be a list of strings, got {type(y).__name__}")
    if len(y) != n:
        raise ValueError(f"X has {n} utterances but y has {len(y)} transcripts")
    out = []
    for i, t in enumerate(y):
        if not isinstance(t, str):
            raise TypeError(f"y[{i}]: expected str, got {type(t).__name__}")
        norm = normalize_text(t)
        if not norm:
            raise ValueError(f"y[{i}]: transcript is empty")
        out.append(norm)
    return out


def check_is_fitted(estimator, attributes=("projector_",)) -> None:
    missing = [a for a in attributes if not hasattr(estimator, a)]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first "
            f"(missing {', '.join(missing)})"
        )
