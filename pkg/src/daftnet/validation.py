"""Input checks shared by the estimators and the harness."""
from __future__ import annotations

import numpy as np

from .metrics import as_survival_arrays


def check_multimodal(X, tabular_dim: int | None = None, need_image: bool = True):
    """Split ``X`` into (images, tabular) arrays.

    ``X`` is an ``(images, tabular)`` pair or a mapping with ``image`` and
    ``tabular`` keys. Images are ``N x C x S x S x S`` (a missing channel axis
    is added); tabular is ``N x P`` and must be finite.
    """
    if isinstance(X, dict):
        images, tabular = X.get("image"), X.get("tabular")
    elif isinstance(X, (tuple, list)) and len(X) == 2:
        images, tabular = X
    else:
        raise TypeError("X must be an (images, tabular) pair or a dict with 'image' and 'tabular'")
    tabular = np.asarray(tabular, dtype=np.float32)
    if tabular.ndim != 2:
        raise ValueError(f"tabular must be 2-D (N x P), got shape {tabular.shape}")
    if tabular_dim is not None and tabular.shape[1] != tabular_dim:
        raise ValueError(f"expected {tabular_dim} tabular features, got {tabular.shape[1]}")
    if not np.isfinite(tabular).all():
        raise ValueError("tabular input contains NaN or Inf; encode missing values first")
    if images is None:
        if need_image:
            raise ValueError("this variant needs image input")
        return None, tabular
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 4:
        images = images[:, None]
    if images.ndim != 5:
        raise ValueError(f"images must be N x C x D x H x W, got shape {images.shape}")
    if len(images) != len(tabular):
        raise ValueError(f"{len(images)} images but {len(tabular)} tabular rows")
    if not np.isfinite(images).all():
        raise ValueError("image input contains NaN or Inf")
    return images, tabular


def check_diagnosis_target(y, n: int, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("diagnosis labels must be integers")
        y = y.astype(int)
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"diagnosis labels must lie in [0, {num_classes})")
    return y


def check_survival_target(y, n: int) -> tuple[np.ndarray, np.ndarray]:
    time, event = as_survival_arrays(y)
    if time.shape != (n,):
        raise ValueError(f"expected {n} survival labels, got {time.size}")
    if not (np.isfinite(time).all() and (time > 0).all()):
        raise ValueError("survival times must be finite and positive")
    return time, event
