"""Input checks for the estimator layer."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from sklearn.utils.validation import check_consistent_length, check_is_fitted

from .corpus import GLYPH_WIDTH, IMAGE_CHANNELS, IMAGE_HEIGHT, TextImage

__all__ = ["check_images", "check_texts", "check_consistent_length", "check_is_fitted", "check_aligned"]


def _as_pixels(img, i: int) -> np.ndarray:
    if isinstance(img, TextImage):
        img = img.pixels
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"image {i}: expected (H, W) or (H, W, C), got shape {arr.shape}")
    h, w, c = arr.shape
    if h != IMAGE_HEIGHT or c != IMAGE_CHANNELS:
        raise ValueError(f"image {i}: must be {IMAGE_HEIGHT} px high with {IMAGE_CHANNELS} channel, got {arr.shape}")
    if w == 0 or w % GLYPH_WIDTH:
        raise ValueError(f"image {i}: width {w} must be a positive multiple of {GLYPH_WIDTH}")
    if not np.isfinite(arr).all():
        raise ValueError(f"image {i}: contains NaN or infinity")
    return np.ascontiguousarray(arr)


def check_images(X) -> list[np.ndarray]:
    """Images as a list of float32 ``(32, W, 1)`` arrays.

    Accepts a 3-D / 4-D array of equally wide images, or any sequence of 2-D /
    3-D arrays or ``TextImage`` objects of varying width.
    """
    if isinstance(X, np.ndarray) and X.ndim in (3, 4):
        X = list(X)
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise ValueError("expected a sequence of images")
    if len(X) == 0:
        raise ValueError("no images given")
    return [_as_pixels(img, i) for i, img in enumerate(X)]


def check_texts(texts, alphabet: Iterable[str] | None = None, name: str = "texts") -> list[str]:
    if isinstance(texts, str) or not hasattr(texts, "__len__"):
        raise ValueError(f"{name}: expected a sequence of strings")
    out = list(texts)
    if not out:
        raise ValueError(f"{name}: empty")
    allowed = set(alphabet) if alphabet is not None else None
    for i, t in enumerate(out):
        if not isinstance(t, str) or not t:
            raise ValueError(f"{name}[{i}]: expected a non-empty string, got {t!r}")
        if allowed is not None:
            bad = sorted(set(t) - allowed)
            if bad:
                raise ValueError(f"{name}[{i}]: characters {bad} not in the alphabet")
    return out


def check_aligned(images: Sequence[np.ndarray], texts: Sequence[str]) -> None:
    """Each image must be exactly one glyph column per source character."""
    for i, (img, t) in enumerate(zip(images, texts)):
        if img.shape[1] != GLYPH_WIDTH * len(t):
            raise ValueError(
                f"sample {i}: image width {img.shape[1]} != {GLYPH_WIDTH} x {len(t)} characters of {t!r}"
            )
