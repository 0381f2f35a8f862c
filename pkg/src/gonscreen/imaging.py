"""Image decoding, preprocessing (pad to square, bilinear resize, ImageNet normalization) and augmentation.

Images are ``uint8`` arrays of shape (height, width, 3), row-major.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates

SIDE = 392
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])


def read_image(path):
    """Read a PNG or binary PPM (P6) file as an RGB ``uint8`` array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path, img):
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise ValueError(f"write_png expects uint8, got {arr.dtype}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def read_mask(path):
    with Image.open(path) as im:
        m = np.asarray(im.convert("L"), dtype=np.uint8).copy()
    bad = np.setdiff1d(np.unique(m), [0, 1, 2])
    if bad.size:
        raise ValueError(f"{path}: mask values must be 0/1/2, found {bad.tolist()}")
    return m


def _check_rgb(img):
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {a.shape}")
    return a


def pad_to_square(img):
    """Center the image on a black S x S canvas, S = max(width, height).

    An odd remainder puts the extra row/column on the bottom/right.
    """
    a = _check_rgb(img)
    h, w, _ = a.shape
    s = max(h, w)
    top = (s - h) // 2
    left = (s - w) // 2
    out = np.zeros((s, s, 3), dtype=a.dtype)
    out[top:top + h, left:left + w] = a
    return out


def _axis_taps(n_in, n_out):
    # pixel centers at (i + 0.5) * scale, no corner alignment
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img, side=SIDE):
    a = _check_rgb(img)
    h, w, _ = a.shape
    if h != w:
        raise ValueError(f"resize_bilinear needs a square image, got {w}x{h}; pad first")
    if h == side:
        return a.copy()
    i0, i1, t = _axis_taps(h, side)
    f = a.astype(np.float64)
    rows = f[i0] * (1.0 - t)[:, None, None] + f[i1] * t[:, None, None]
    out = rows[:, i0] * (1.0 - t)[None, :, None] + rows[:, i1] * t[None, :, None]
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def normalize(img):
    a = _check_rgb(img)
    return (a.astype(np.float64) / 255.0 - IMAGENET_MEAN) / IMAGENET_STD


def denormalize(pre):
    """Inverse of :func:`normalize`, returning values in [0, 1]."""
    return np.asarray(pre) * IMAGENET_STD + IMAGENET_MEAN


@dataclass(frozen=True)
class AugmentPolicy:
    brightness_range: tuple = (0.8, 1.2)
    zoom_range: tuple = (0.9, 1.1)
    rotation_range: tuple = (-15.0, 15.0)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5

    def __post_init__(self):
        for name, ident in (("brightness_range", 1.0), ("zoom_range", 1.0), ("rotation_range", 0.0)):
            lo, hi = getattr(self, name)
            if not lo <= ident <= hi:
                raise ValueError(f"{name} {lo, hi} must contain {ident}")
        for name in ("hflip_prob", "vflip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if min(self.zoom_range) <= 0:
            raise ValueError("zoom factors must be positive")

    @classmethod
    def identity(cls):
        return cls((1.0, 1.0), (1.0, 1.0), (0.0, 0.0), 0.0, 0.0)

    def to_dict(self):
        return {
            "brightness_range": list(self.brightness_range),
            "zoom_range": list(self.zoom_range),
            "rotation_range": list(self.rotation_range),
            "hflip_prob": self.hflip_prob,
            "vflip_prob": self.vflip_prob,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            tuple(d["brightness_range"]),
            tuple(d["zoom_range"]),
            tuple(d["rotation_range"]),
            float(d["hflip_prob"]),
            float(d["vflip_prob"]),
        )


def _warp(a, inverse, offset):
    """Resample with ``src = inverse @ dst + offset`` (row, col), black outside."""
    h, w, _ = a.shape
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    src_r = inverse[0, 0] * rr + inverse[0, 1] * cc + offset[0]
    src_c = inverse[1, 0] * rr + inverse[1, 1] * cc + offset[1]
    out = np.empty(a.shape, dtype=np.float64)
    for ch in range(3):
        out[..., ch] = map_coordinates(a[..., ch].astype(np.float64), [src_r, src_c],
                                       order=1, mode="constant", cval=0.0)
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def _center(a):
    h, w, _ = a.shape
    return np.array([(h - 1) / 2.0, (w - 1) / 2.0])


def adjust_brightness(img, factor):
    a = _check_rgb(img)
    if factor == 1.0:
        return a.copy()
    return np.clip(np.floor(a.astype(np.float64) * factor + 0.5), 0, 255).astype(np.uint8)


def zoom(img, factor):
    """Scale about the image center; ``factor > 1`` magnifies."""
    a = _check_rgb(img)
    if factor == 1.0:
        return a.copy()
    c = _center(a)
    inv = np.eye(2) / factor
    return _warp(a, inv, c - inv @ c)


def rotate(img, degrees):
    """Rotate counter-clockwise about the center, filling exposed corners with black."""
    a = _check_rgb(img)
    if degrees == 0.0:
        return a.copy()
    t = math.radians(degrees)
    # (row, col) with rows pointing down: counter-clockwise on screen
    inv = np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]])
    c = _center(a)
    return _warp(a, inv, c - inv @ c)


def hflip(img):
    return _check_rgb(img)[:, ::-1].copy()


def vflip(img):
    return _check_rgb(img)[::-1].copy()


def sample_augmentation(policy, seed):
    """Draw one parameter per transform, in application order."""
    rng = np.random.default_rng(seed)
    return {
        "brightness": float(rng.uniform(*policy.brightness_range)),
        "zoom": float(rng.uniform(*policy.zoom_range)),
        "rotation": float(rng.uniform(*policy.rotation_range)),
        "hflip": bool(rng.random() < policy.hflip_prob),
        "vflip": bool(rng.random() < policy.vflip_prob),
    }


def augment(img, policy, seed):
    """Brightness, then zoom, then rotation, then horizontal and vertical flips."""
    p = sample_augmentation(policy, seed)
    out = adjust_brightness(img, p["brightness"])
    out = zoom(out, p["zoom"])
    out = rotate(out, p["rotation"])
    if p["hflip"]:
        out = hflip(out)
    if p["vflip"]:
        out = vflip(out)
    return out


def preprocess(img, policy=None, seed=None, side=SIDE):
    """Pad to square, optionally augment, resize to ``side`` and normalize."""
    sq = pad_to_square(img)
    if policy is not None:
        sq = augment(sq, policy, seed)
    return normalize(resize_bilinear(sq, side))
