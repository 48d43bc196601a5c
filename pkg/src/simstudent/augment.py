"""Stochastic patch augmentations.

Per patch, in order: geometric (horizontal flip, resize-and-crop, rotation,
translation, composed into a single affine warp with reflect padding and
bilinear resampling), then photometric (contrast about the per-patch
per-channel mean, additive brightness, hue/saturation through an HSV round
trip). Outputs are clamped to [0, 1].

A batch draws its per-item parameters from the caller's generator in a fixed
order (flip, resize, rotation, translation row/col, contrast, brightness,
hue, saturation), one array per parameter, so results are reproducible from
the generator state. Stages whose configured ranges are exactly neutral are
skipped, which makes the all-neutral config a bit-exact identity.
"""

from dataclasses import dataclass, replace

import numpy as np

_MULTIPLICATIVE = ("contrast_range", "saturation_range", "resize_range")
_ADDITIVE = ("brightness_range", "hue_range", "translation_range")


@dataclass(frozen=True)
class AugConfig:
    contrast_range: tuple = (0.75, 1.25)
    brightness_range: tuple = (-0.2, 0.2)
    hue_range: tuple = (-0.05, 0.05)
    saturation_range: tuple = (0.8, 1.2)
    flip_probability: float = 0.5
    resize_range: tuple = (0.9, 1.1)
    crop_size: int = 32
    rotation_range: tuple = (-180.0, 180.0)
    translation_range: tuple = (-0.05, 0.05)
    dropout_rate: float = 0.2

    def __post_init__(self):
        for name in _MULTIPLICATIVE + _ADDITIVE + ("rotation_range",):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered (lo <= hi)")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must be in [0, 1]")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError("dropout_rate must be in [0, 1]")

    @classmethod
    def identity(cls) -> "AugConfig":
        """All ranges collapsed to their neutral points; exact no-op."""
        return cls(
            contrast_range=(1.0, 1.0),
            brightness_range=(0.0, 0.0),
            hue_range=(0.0, 0.0),
            saturation_range=(1.0, 1.0),
            flip_probability=0.0,
            resize_range=(1.0, 1.0),
            rotation_range=(0.0, 0.0),
            translation_range=(0.0, 0.0),
            dropout_rate=0.0,
        )


def scale_noisy(cfg: AugConfig, aug_factor: float = 1.5,
                dropout_factor: float = 2.5) -> AugConfig:
    """Widen ranges about their neutral points for the noisy-student setting.

    Multiplicative ranges (contrast, saturation, resize) become
    (lo/f, hi*f); additive deltas (brightness, hue, translation) scale by f.
    Flip, crop, and rotation are shared between normal and noisy settings and
    stay untouched. Dropout scales by dropout_factor, capped at 0.95.
    """
    updates = {}
    for name in _MULTIPLICATIVE:
        lo, hi = getattr(cfg, name)
        updates[name] = (lo / aug_factor, hi * aug_factor)
    for name in _ADDITIVE:
        lo, hi = getattr(cfg, name)
        updates[name] = (lo * aug_factor, hi * aug_factor)
    updates["dropout_rate"] = min(cfg.dropout_rate * dropout_factor, 0.95)
    return replace(cfg, **updates)


_GRIDS: dict = {}


def _grid(h: int, w: int):
    if (h, w) not in _GRIDS:
        _GRIDS[(h, w)] = np.meshgrid(
            np.arange(h, dtype=np.float64),
            np.arange(w, dtype=np.float64),
            indexing="ij",
        )
    return _GRIDS[(h, w)]


def _reflect(coords, n):
    """Fold continuous coordinates into [0, n-1] by symmetric reflection."""
    if n == 1:
        return np.zeros_like(coords)
    period = 2.0 * (n - 1)
    m = np.mod(coords, period)
    return np.minimum(m, period - m)


def _warp(pixels, flips, scales, angles, t_rows, t_cols):
    """Inverse-map affine warp of (B, H, W, 3) with bilinear sampling."""
    b, h, w = pixels.shape[:3]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = _grid(h, w)
    wy = rows[None] - (cy + t_rows)[:, None, None]
    wx = cols[None] - (cx + t_cols)[:, None, None]
    inv_s = 1.0 / scales
    cos = (np.cos(angles) * inv_s)[:, None, None]
    sin = (np.sin(angles) * inv_s)[:, None, None]
    # inverse rotation and scale, then inverse flip
    ry = cos * wy + sin * wx
    rx = cos * wx - sin * wy
    rx *= np.where(flips, -1.0, 1.0)[:, None, None]
    sy = _reflect(ry + cy, h)
    sx = _reflect(rx + cx, w)

    y0 = sy.astype(np.intp)
    x0 = sx.astype(np.intp)
    fy = (sy - y0)[..., None]
    fx = (sx - x0)[..., None]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    flat = pixels.reshape(b * h * w, 3)
    base = (np.arange(b, dtype=np.intp) * (h * w))[:, None, None]
    tl = flat.take((base + y0 * w + x0).ravel(), axis=0).reshape(b, h, w, 3)
    tr = flat.take((base + y0 * w + x1).ravel(), axis=0).reshape(b, h, w, 3)
    bl = flat.take((base + y1 * w + x0).ravel(), axis=0).reshape(b, h, w, 3)
    br = flat.take((base + y1 * w + x1).ravel(), axis=0).reshape(b, h, w, 3)
    top = tl + (tr - tl) * fx
    bottom = bl + (br - bl) * fx
    return top + (bottom - top) * fy


def _rgb_to_hsv(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    safe = np.where(delta == 0, 1.0, delta)
    h = np.where(
        maxc == r, np.mod((g - b) / safe, 6.0),
        np.where(maxc == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(delta == 0, 0.0, h / 6.0)
    s = np.where(maxc == 0, 0.0, delta / np.where(maxc == 0, 1.0, maxc))
    return h, s, maxc


def _hsv_to_rgb(h, s, v):
    # channel = v - v*s*clip(min(k, 4-k), 0, 1) with k = (n + 6h) mod 6;
    # arithmetic form of the usual sector formula, n = 5, 3, 1 for r, g, b
    h6 = np.mod(h, 1.0) * 6.0
    vs = v * s
    out = np.empty(h.shape + (3,), dtype=np.float64)
    for ch, n in enumerate((5.0, 3.0, 1.0)):
        k = np.mod(n + h6, 6.0)
        out[..., ch] = v - vs * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
    return out


def _draw_params(cfg: AugConfig, rng: np.random.Generator, b: int) -> dict:
    """Fixed draw order; one array of shape (b,) per parameter."""
    return {
        "flip": rng.random(b) < cfg.flip_probability,
        "scale": rng.uniform(*cfg.resize_range, size=b),
        "angle": np.deg2rad(rng.uniform(*cfg.rotation_range, size=b)),
        "t_row": rng.uniform(*cfg.translation_range, size=b) * cfg.crop_size,
        "t_col": rng.uniform(*cfg.translation_range, size=b) * cfg.crop_size,
        "contrast": rng.uniform(*cfg.contrast_range, size=b),
        "brightness": rng.uniform(*cfg.brightness_range, size=b),
        "hue": rng.uniform(*cfg.hue_range, size=b),
        "saturation": rng.uniform(*cfg.saturation_range, size=b),
    }


def _geometry_neutral(cfg: AugConfig) -> bool:
    return (
        cfg.flip_probability == 0.0
        and cfg.resize_range == (1.0, 1.0)
        and cfg.rotation_range == (0.0, 0.0)
        and cfg.translation_range == (0.0, 0.0)
    )


def apply_batch(pixels, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    """Augment a (B, 32, 32, 3) batch; returns float64 in [0, 1]."""
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError("apply_batch expects a (B, H, W, 3) array")
    params = _draw_params(cfg, rng, x.shape[0])

    if not _geometry_neutral(cfg):
        x = _warp(x, params["flip"], params["scale"], params["angle"],
                  params["t_row"], params["t_col"])

    if cfg.contrast_range != (1.0, 1.0):
        factor = params["contrast"][:, None, None, None]
        mean = x.mean(axis=(1, 2), keepdims=True)
        x = mean + factor * (x - mean)
    if cfg.brightness_range != (0.0, 0.0):
        x = x + params["brightness"][:, None, None, None]
    if cfg.hue_range != (0.0, 0.0) or cfg.saturation_range != (1.0, 1.0):
        h, s, v = _rgb_to_hsv(np.clip(x, 0.0, 1.0))
        h = np.mod(h + params["hue"][:, None, None], 1.0)
        s = np.clip(s * params["saturation"][:, None, None], 0.0, 1.0)
        x = _hsv_to_rgb(h, s, v)
    return np.clip(x, 0.0, 1.0)


def apply(pixels, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    """Augment a single (32, 32, 3) patch."""
    return apply_batch(np.asarray(pixels)[None], cfg, rng)[0]
