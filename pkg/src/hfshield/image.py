"""Images as float64 [H, W, C] arrays in [0, 1], PNG I/O, and the synthetic face corpus."""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
IMAGES_PER_IDENTITY = 8
N_ORIGINALS = 4
SUPERSAMPLE = 4


class ImageError(ValueError):
    pass


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ImageError(f"expected an [H, W, C] image with C in (1, 3), got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ImageError("image values must be finite and lie in [0, 1]")
    return img


def to_luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageError(f"to_luminance needs a 3-channel image, got shape {img.shape}")
    return (img @ LUMA_WEIGHTS)[..., None]


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(img) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    """Value the image would have after a PNG round trip."""
    return to_bytes(img).astype(np.float64) / 255.0


def png_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ImageError(f"cannot encode image of shape {img.shape}")
    data = to_bytes(img)
    mode = "L" if data.shape[2] == 1 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(data[..., 0] if mode == "L" else data, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def save_png(img: np.ndarray, path) -> None:
    Path(path).write_bytes(png_bytes(img))


def decode_png(data: bytes, source: str = "<bytes>") -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ImageError(f"cannot read PNG {source}: {exc}") from exc
    return arr / 255.0


def load_png(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ImageError(f"cannot read PNG {path}: {exc}") from exc
    return decode_png(data, str(path))


def mask_png_bytes(mask: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def save_mask_png(mask: np.ndarray, path) -> None:
    Path(path).write_bytes(mask_png_bytes(mask))


def load_mask_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (OSError, ValueError) as exc:
        raise ImageError(f"cannot read mask PNG {path}: {exc}") from exc
    return (arr > 127).astype(np.uint8)


# ---- synthetic identities ------------------------------------------------

@dataclass(frozen=True)
class IdentitySpec:
    seed: int
    skin: tuple[float, float, float]
    hair: tuple[float, float, float]
    background: tuple[float, float, float]
    background2: tuple[float, float, float]
    eye_color: tuple[float, float, float]
    mouth_color: tuple[float, float, float]
    head_rx: float
    head_ry: float
    eye_dx: float
    eye_y: float
    eye_r: float
    mouth_y: float
    mouth_w: float
    texture_freq: float
    texture_angle: float

    @classmethod
    def from_seed(cls, seed: int) -> "IdentitySpec":
        rng = np.random.default_rng(seed)

        def color(lo, hi):
            return tuple(float(v) for v in rng.uniform(lo, hi, size=3))

        return cls(
            seed=int(seed),
            skin=(float(rng.uniform(0.7, 0.97)), float(rng.uniform(0.5, 0.8)), float(rng.uniform(0.4, 0.7))),
            hair=color(0.05, 0.45),
            background=color(0.15, 0.85),
            background2=color(0.15, 0.85),
            eye_color=color(0.0, 0.2),
            mouth_color=(float(rng.uniform(0.45, 0.8)), float(rng.uniform(0.05, 0.25)), float(rng.uniform(0.1, 0.3))),
            head_rx=float(rng.uniform(0.26, 0.34)),
            head_ry=float(rng.uniform(0.33, 0.41)),
            eye_dx=float(rng.uniform(0.09, 0.14)),
            eye_y=float(rng.uniform(-0.1, -0.03)),
            eye_r=float(rng.uniform(0.035, 0.055)),
            mouth_y=float(rng.uniform(0.12, 0.2)),
            mouth_w=float(rng.uniform(0.07, 0.13)),
            texture_freq=float(rng.uniform(1.0, 2.5)),
            texture_angle=float(rng.uniform(0.0, np.pi)),
        )


def _ellipse(u, v, cx, cy, rx, ry):
    return ((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2 <= 1.0


def render_face(spec: IdentitySpec, size: int = 32, jitter_seed: int | None = None) -> np.ndarray:
    """Render one face image; ``jitter_seed`` adds small pose/colour variation."""
    jr = np.random.default_rng(jitter_seed) if jitter_seed is not None else None

    def jit(scale):
        return float(jr.uniform(-scale, scale)) if jr is not None else 0.0

    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n - 0.5
    u, v = np.meshgrid(coords, coords)  # u: x (columns), v: y (rows)

    cx, cy = jit(0.04), jit(0.04)
    scale = 1.0 + jit(0.05)
    brightness = jit(0.04)

    ang = spec.texture_angle
    ramp = (np.cos(ang) * u + np.sin(ang) * v) + 0.5
    wave = 0.04 * np.sin(2 * np.pi * spec.texture_freq * (np.sin(ang) * u - np.cos(ang) * v) + jit(np.pi))
    bg = np.asarray(spec.background)[None, None, :] * (1 - ramp[..., None]) + np.asarray(spec.background2)[None, None, :] * ramp[..., None]
    img = bg + wave[..., None]

    rx, ry = spec.head_rx * scale, spec.head_ry * scale
    hair = _ellipse(u, v, cx, cy - 0.04 * scale, rx * 1.08, ry * 1.02) & (v < cy - 0.02)
    img[hair] = spec.hair
    head = _ellipse(u, v, cx, cy + 0.02 * scale, rx, ry * 0.92)
    shade = 1.0 - 0.15 * ((v - cy) / ry)
    img[head] = np.asarray(spec.skin)[None, :] * np.clip(shade[head], 0.8, 1.2)[:, None]

    er = spec.eye_r * scale
    for side in (-1, 1):
        ex = cx + side * spec.eye_dx * scale
        ey = cy + spec.eye_y * scale
        white = _ellipse(u, v, ex, ey, er * 1.6, er)
        img[white] = (0.95, 0.95, 0.92)
        img[_ellipse(u, v, ex, ey, er * 0.8, er * 0.8)] = spec.eye_color

    my = cy + spec.mouth_y * scale
    mouth = _ellipse(u, v, cx, my, spec.mouth_w * scale, 0.03 * scale)
    img[mouth] = spec.mouth_color

    img = img + brightness
    pooled = img.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE, 3).mean(axis=(1, 3))
    return np.clip(pooled, 0.0, 1.0)


@dataclass
class Identity:
    spec: IdentitySpec
    images: np.ndarray  # [8, H, W, 3]

    @property
    def originals(self) -> np.ndarray:
        return self.images[:N_ORIGINALS]

    @property
    def references(self) -> np.ndarray:
        return self.images[N_ORIGINALS:]


def identity_seeds(n_identities: int, seed: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(child.generate_state(1)[0]) for child in ss.spawn(n_identities)]


def generate_dataset(n_identities: int, seed: int, size: int = 32) -> list[Identity]:
    if n_identities < 1:
        raise ValueError("n_identities must be at least 1")
    out = []
    for ident_seed in identity_seeds(n_identities, seed):
        spec = IdentitySpec.from_seed(ident_seed)
        imgs = np.stack(
            [render_face(spec, size, jitter_seed=ident_seed * 16 + k + 1) for k in range(IMAGES_PER_IDENTITY)]
        )
        out.append(Identity(spec, imgs))
    return out


def write_dataset(identities: list[Identity], root) -> dict:
    """Write PNGs plus a manifest; returns the manifest dict."""
    root = Path(root)
    entries = []
    for i, ident in enumerate(identities):
        d = root / f"id{i:03d}"
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for k, img in enumerate(ident.images):
            role = "orig" if k < N_ORIGINALS else "ref"
            p = d / f"{role}_{k % N_ORIGINALS}.png"
            save_png(img, p)
            files.append(str(p.relative_to(root)))
        entries.append({"index": i, "seed": ident.spec.seed, "spec": asdict(ident.spec), "files": files})
    manifest = {"identities": entries}
    (root / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
