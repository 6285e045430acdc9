"""Perturbation removal: Gaussian blur, bilateral filter, and diffuse-then-denoise."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import correlate1d

from .diffusion import DiffusionSchedule, SurrogateModel, diffuse_and_denoise
from .image import LUMA_WEIGHTS

KINDS = ("identity", "gaussian", "bilateral", "diffpure")


@dataclass(frozen=True)
class PurifierSpec:
    kind: str = "identity"
    sigma: float = 1.0
    radius: int = 2
    sigma_s: float = 2.0
    sigma_r: float = 0.1
    bilateral_radius: int = 3
    t_star: int = 10
    seed: int = 0
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown purifier kind {self.kind!r}; expected one of {KINDS}")
        if min(self.sigma, self.sigma_s, self.sigma_r) <= 0:
            raise ValueError("purifier sigmas must be positive")
        if self.radius < 1 or self.bilateral_radius < 1 or self.t_star < 1:
            raise ValueError("purifier radii and t* must be >= 1")

    @property
    def label(self) -> str:
        return self.name or self.kind

    def to_dict(self) -> dict:
        return asdict(self)


def gaussian_kernel1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float = 1.0, radius: int = 2) -> np.ndarray:
    """Separable Gaussian on each channel of an [H, W, C] image, replicate borders."""
    if sigma <= 0 or radius < 1:
        raise ValueError("gaussian_blur needs sigma > 0 and radius >= 1")
    k = gaussian_kernel1d(sigma, radius)
    out = correlate1d(np.asarray(img, dtype=np.float64), k, axis=0, mode="nearest")
    out = correlate1d(out, k, axis=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def bilateral_filter(img: np.ndarray, sigma_s: float = 2.0, sigma_r: float = 0.1, radius: int = 3) -> np.ndarray:
    """Bilateral filter with range weights on luminance, shared by all channels."""
    if sigma_s <= 0 or sigma_r <= 0:
        raise ValueError("bilateral_filter needs positive sigmas")
    img = np.asarray(img, dtype=np.float64)
    lum = img @ LUMA_WEIGHTS if img.shape[2] == 3 else img[..., 0]
    size = 2 * radius + 1
    pad2 = ((radius, radius), (radius, radius))
    lum_win = sliding_window_view(np.pad(lum, pad2, mode="edge"), (size, size))  # H,W,k,k
    img_win = sliding_window_view(np.pad(img, pad2 + ((0, 0),), mode="edge"), (size, size), axis=(0, 1))  # H,W,C,k,k

    d = np.arange(-radius, radius + 1, dtype=np.float64)
    spatial = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * sigma_s ** 2))
    rng_w = np.exp(-((lum_win - lum[..., None, None]) ** 2) / (2 * sigma_r ** 2))
    w = spatial * rng_w
    out = np.einsum("hwij,hwcij->hwc", w, img_win) / w.sum(axis=(2, 3))[..., None]
    return np.clip(out, 0.0, 1.0)


def diffpure(model: SurrogateModel, sched: DiffusionSchedule, img: np.ndarray, t_star: int = 10,
             seed: int = 0) -> np.ndarray:
    return diffuse_and_denoise(model, sched, img[None], t_star, seed)[0]


def apply_purifier(spec: PurifierSpec, img: np.ndarray, model: SurrogateModel | None = None,
                   sched: DiffusionSchedule | None = None, seed_offset: int = 0) -> np.ndarray:
    """Apply ``spec`` to one [H, W, C] image; output clipped to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if spec.kind == "identity":
        return img.copy()
    if spec.kind == "gaussian":
        return gaussian_blur(img, spec.sigma, spec.radius)
    if spec.kind == "bilateral":
        return bilateral_filter(img, spec.sigma_s, spec.sigma_r, spec.bilateral_radius)
    if model is None or sched is None:
        raise ValueError("diffpure needs a base model and its schedule")
    return diffpure(model, sched, img, spec.t_star, spec.seed + seed_offset)
