"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError


def check_windows(x, window_len: int | None = None) -> np.ndarray:
    """Coerce window inputs to a float32 (n, 1, L) array.

    Accepts (n, L) or (n, 1, L); rejects anything else with an error naming
    the offending axis.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 2:
        x = x[:, None, :]
    if x.ndim != 3 or x.shape[1] != 1:
        raise ShapeError("channels", f"expected (n, L) or (n, 1, L) windows, got {x.shape}")
    if window_len is not None and x.shape[2] != window_len:
        raise ShapeError("length", f"window length {x.shape[2]}, expected {window_len}")
    if not np.isfinite(x).all():
        raise ValueError("window values must be finite")
    return x


def check_state_labels(y, n_windows: int, window_len: int | None = None) -> np.ndarray:
    """Coerce labels to a uint8 (n, I, L) array of {0, 1}."""
    y = np.asarray(y)
    if y.ndim != 3:
        raise ShapeError("batch", f"expected (n, I, L) labels, got shape {y.shape}")
    if y.shape[0] != n_windows:
        raise ShapeError("batch", f"{y.shape[0]} label rows for {n_windows} windows")
    if window_len is not None and y.shape[2] != window_len:
        raise ShapeError("length", f"label length {y.shape[2]}, expected {window_len}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("state labels must be binary")
    return y.astype(np.uint8)


def check_fitted(estimator, attribute: str = "model_") -> None:
    if not hasattr(estimator, attribute):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )
