"""High-frequency masks: Laplacian edge magnitude, then exact top-k selection."""
from __future__ import annotations

import math

import numpy as np

from .image import to_luminance
from .tensor import conv2d

LAPLACIAN_4 = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
LAPLACIAN_8 = np.array([[1.0, 1.0, 1.0], [1.0, -8.0, 1.0], [1.0, 1.0, 1.0]])


def laplacian_edge(img: np.ndarray, neighbors: int = 4) -> np.ndarray:
    """|Laplacian| of a single-channel [H, W, 1] (or [H, W]) image, replicate padding."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise ValueError(f"laplacian_edge needs a single-channel image, got {img.shape}")
        img = img[..., 0]
    if neighbors == 4:
        kernel = LAPLACIAN_4
    elif neighbors == 8:
        kernel = LAPLACIAN_8
    else:
        raise ValueError("neighbors must be 4 or 8")
    resp = conv2d(img[None], kernel[None, None], padding="replicate").data[0]
    return np.abs(resp)


def mask_count(ratio: float, h: int, w: int) -> int:
    # guard against 0.03 * 1024 = 30.720000000000002 style float noise
    return int(math.ceil(round(ratio * h * w, 9)))


def threshold_for_ratio(edges: np.ndarray, ratio: float) -> np.ndarray:
    """Select exactly ceil(ratio*H*W) pixels with the largest magnitude.

    Ties are broken by row-major index, smaller index first.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    edges = np.asarray(edges, dtype=np.float64)
    h, w = edges.shape
    k = mask_count(ratio, h, w)
    flat = edges.ravel()
    # lexsort: last key is primary -> descending magnitude, then ascending index
    order = np.lexsort((np.arange(flat.size), -flat))
    mask = np.zeros(flat.size, dtype=np.uint8)
    mask[order[:k]] = 1
    return mask.reshape(h, w)


def build_mask(img: np.ndarray, ratio: float, neighbors: int = 4) -> np.ndarray:
    return threshold_for_ratio(laplacian_edge(to_luminance(img), neighbors), ratio)
