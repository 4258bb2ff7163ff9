"""Training-time augmentation with per-sample deterministic random streams."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage
from skimage.color import hsv2rgb, rgb2hsv

from .data import SamplePair

REFERENCE_SIZE = 352


class RngStream:
    """A root seed plus a derivation path, e.g. ``RngStream(0).child(epoch, index, "aug")``.

    The generator depends only on the seed and the path, never on how many
    other streams were drawn before it.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)

    def child(self, *keys) -> "RngStream":
        return RngStream(self.seed, self.path + keys)

    def _entropy(self) -> list[int]:
        out = [self.seed]
        for k in self.path:
            out.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
        return out

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(self._entropy())

    def __repr__(self) -> str:
        return f"RngStream({self.seed}, {self.path})"


@dataclass(frozen=True)
class AugmentConfig:
    """Ranges of every random augmentation; translation is in pixels at 352x352."""

    blur_kernel: int = 25
    blur_sigma: tuple[float, float] = (0.001, 2.0)
    brightness: tuple[float, float] = (0.6, 1.4)
    contrast: tuple[float, float] = (0.5, 1.5)
    saturation: tuple[float, float] = (0.75, 1.25)
    hue: tuple[float, float] = (0.99, 1.01)
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotation: tuple[float, float] = (-180.0, 180.0)
    translate_px: float = 44.0
    scale: tuple[float, float] = (0.5, 1.5)
    shear: tuple[float, float] = (-22.5, 22.0)

    def __post_init__(self):
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError("blur kernel size must be a positive odd number")
        for name in ("blur_sigma", "brightness", "contrast", "saturation", "hue", "rotation",
                     "scale", "shear"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: {(lo, hi)}")
        if not (0 <= self.hflip_p <= 1 and 0 <= self.vflip_p <= 1):
            raise ValueError("flip probabilities must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(blur_sigma=(0.0, 0.0), brightness=(1.0, 1.0), contrast=(1.0, 1.0),
                   saturation=(1.0, 1.0), hue=(1.0, 1.0), hflip_p=0.0, vflip_p=0.0,
                   rotation=(0.0, 0.0), translate_px=0.0, scale=(1.0, 1.0), shear=(0.0, 0.0))

    def with_(self, **kw) -> "AugmentConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class AugmentParams:
    sigma: float
    brightness: float
    contrast: float
    saturation: float
    hue: float
    hflip: bool
    vflip: bool
    angle: float
    tx: float
    ty: float
    scale: float
    shear: float


def sample_augment(cfg: AugmentConfig, rng: np.random.Generator, hw: tuple[int, int]) -> AugmentParams:
    """Draw one parameter set; the number of draws is fixed regardless of config."""
    h, w = hw
    u = rng.uniform
    sigma = u(*cfg.blur_sigma)
    b, c, s, hue = u(*cfg.brightness), u(*cfg.contrast), u(*cfg.saturation), u(*cfg.hue)
    hflip = bool(rng.random() < cfg.hflip_p)
    vflip = bool(rng.random() < cfg.vflip_p)
    angle = u(*cfg.rotation)
    max_tx = cfg.translate_px * w / REFERENCE_SIZE
    max_ty = cfg.translate_px * h / REFERENCE_SIZE
    tx, ty = u(-max_tx, max_tx), u(-max_ty, max_ty)
    scale = u(*cfg.scale)
    shear = u(*cfg.shear)
    return AugmentParams(sigma, b, c, s, hue, hflip, vflip, angle, tx, ty, scale, shear)


# --------------------------------------------------------------------------
# photometric (image only)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - size // 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float, size: int = 25) -> np.ndarray:
    """Separable blur of (C, H, W) with reflect padding; ``sigma <= 0`` is a no-op."""
    if sigma <= 0:
        return img
    k = gaussian_kernel(size, sigma)
    out = ndimage.correlate1d(img, k, axis=1, mode="reflect")
    return ndimage.correlate1d(out, k, axis=2, mode="reflect")


def _gray(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def adjust_brightness(img: np.ndarray, f: float) -> np.ndarray:
    return np.clip(img * f, 0, 1)


def adjust_contrast(img: np.ndarray, f: float) -> np.ndarray:
    m = _gray(img).mean()
    return np.clip((img - m) * f + m, 0, 1)


def adjust_saturation(img: np.ndarray, f: float) -> np.ndarray:
    g = _gray(img)[None]
    return np.clip((img - g) * f + g, 0, 1)


def adjust_hue(img: np.ndarray, f: float) -> np.ndarray:
    """Scale the HSV hue channel by ``f``, wrapping around the colour circle."""
    if f == 1.0:
        return img
    hsv = rgb2hsv(img.transpose(1, 2, 0))
    hsv[..., 0] = np.mod(hsv[..., 0] * f, 1.0)
    return hsv2rgb(hsv).transpose(2, 0, 1)


def color_jitter(img: np.ndarray, p: AugmentParams) -> np.ndarray:
    out = img
    if p.brightness != 1.0:
        out = adjust_brightness(out, p.brightness)
    if p.contrast != 1.0:
        out = adjust_contrast(out, p.contrast)
    if p.saturation != 1.0:
        out = adjust_saturation(out, p.saturation)
    return adjust_hue(out, p.hue)


# --------------------------------------------------------------------------
# geometric (image and mask)


def affine_matrix(p: AugmentParams, hw: tuple[int, int]) -> np.ndarray:
    """3x3 forward map in (x, y) pixel coordinates about the image centre."""
    h, w = hw
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    a = math.radians(p.angle)
    sh = math.radians(p.shear)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    shear = np.array([[1.0, math.tan(sh)], [0.0, 1.0]])
    lin = rot @ shear * p.scale
    m = np.eye(3)
    m[:2, :2] = lin
    m[:2, 2] = np.array([cx + p.tx, cy + p.ty]) - lin @ np.array([cx, cy])
    return m


def is_identity_affine(p: AugmentParams) -> bool:
    return p.angle == 0 and p.tx == 0 and p.ty == 0 and p.scale == 1 and p.shear == 0


def warp(arr: np.ndarray, forward: np.ndarray) -> np.ndarray:
    """Bilinearly resample (C, H, W) under a forward (x, y) affine map, zero outside."""
    inv = np.linalg.inv(forward)
    # ndimage works in (row, col) = (y, x)
    swap = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
    inv_rc = swap @ inv @ swap
    out = np.empty_like(arr)
    for c in range(arr.shape[0]):
        out[c] = ndimage.affine_transform(arr[c], inv_rc[:2, :2], offset=inv_rc[:2, 2], order=1,
                                          mode="constant", cval=0.0, prefilter=False)
    return out


def apply_augment(s: SamplePair, p: AugmentParams, cfg: AugmentConfig) -> SamplePair:
    """Blur, jitter, flips, affine, in that order; the first two leave the mask alone."""
    image = gaussian_blur(s.image, p.sigma, cfg.blur_kernel)
    image = color_jitter(image, p)
    mask = s.mask
    if p.hflip:
        image, mask = image[:, :, ::-1], mask[:, :, ::-1]
    if p.vflip:
        image, mask = image[:, ::-1, :], mask[:, ::-1, :]
    if not is_identity_affine(p):
        m = affine_matrix(p, s.hw)
        image = warp(np.ascontiguousarray(image), m)
        mask = warp(np.ascontiguousarray(mask), m)
    image = np.clip(image, 0, 1).astype(np.float32)
    mask = np.clip(mask, 0, 1).astype(np.float32)
    return SamplePair(np.ascontiguousarray(image), np.ascontiguousarray(mask), s.id)


def augment_pair(s: SamplePair, cfg: AugmentConfig, rng: RngStream) -> SamplePair:
    return apply_augment(s, sample_augment(cfg, rng.generator(), s.hw), cfg)
