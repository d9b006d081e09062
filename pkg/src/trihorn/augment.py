"""Training-time augmentation of normalized depth crops.

Geometric transforms (in-plane rotation, 3D scaling, 3D translation) run
first, then PixDropout on the surviving hand pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .camera import BACKGROUND, NormalizedCrop


@dataclass(frozen=True)
class AugmentConfig:
    alpha: float = 0.15
    rot_deg: tuple = (-180.0, 180.0)
    scale: tuple = (0.9, 1.1)
    trans_mm: tuple = (-8.0, 8.0)
    rng_seed: int = 0
    geometric: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("rot_deg", "scale", "trans_mm"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is not ordered: {lo} > {hi}")


@dataclass(frozen=True)
class GeometricParams:
    rot_deg: float = 0.0
    scale: float = 1.0
    trans_mm: tuple = (0.0, 0.0, 0.0)


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for (seed, keys...), e.g. (seed, epoch, sample index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def pixdropout(crop: NormalizedCrop, alpha: float, rng: np.random.Generator,
               gamma: float | None = None) -> NormalizedCrop:
    """Replace a random fraction of hand pixels with the background value.

    The drop probability is drawn from U[0, alpha] unless ``gamma`` is given.
    """
    if gamma is None:
        gamma = rng.uniform(0.0, alpha) if alpha > 0 else 0.0
    image = crop.image
    hand = image != BACKGROUND
    if gamma <= 0 or not hand.any():
        return replace(crop, image=image.copy())
    drop = hand & (rng.random(image.shape) < gamma)
    out = image.copy()
    out[drop] = BACKGROUND
    return replace(crop, image=out)


def sample_geometric(cfg: AugmentConfig, rng: np.random.Generator) -> GeometricParams:
    return GeometricParams(
        rot_deg=rng.uniform(*cfg.rot_deg),
        scale=rng.uniform(*cfg.scale),
        trans_mm=tuple(rng.uniform(*cfg.trans_mm, size=3)),
    )


def transform_uv(uv, params: GeometricParams, out_size: int, cube_mm: float) -> np.ndarray:
    """Apply rotation/scale about the crop center, then translation, to crop UVs."""
    uv = np.asarray(uv, dtype=np.float64)
    c = (out_size - 1) / 2
    th = np.deg2rad(params.rot_deg)
    a = params.scale * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shift = np.asarray(params.trans_mm[:2], dtype=np.float64) * out_size / (2 * cube_mm)
    # written as uv + (A - I)(uv - c) + t so identity parameters are exact
    return uv + (uv - c) @ (a - np.eye(2)).T + shift


def geometric_transform(crop: NormalizedCrop, params: GeometricParams) -> NormalizedCrop:
    n = crop.image.shape[0]
    cube = crop.crop.cube_mm
    c = (n - 1) / 2
    th = np.deg2rad(params.rot_deg)
    s = params.scale
    shift = np.asarray(params.trans_mm[:2], dtype=np.float64) * n / (2 * cube)
    dz = params.trans_mm[2] / cube

    # inverse map: source = R(-th) (p - c - shift) / s + c
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
    du = (xs - c - shift[0]) / s
    dv = (ys - c - shift[1]) / s
    cos, sin = np.cos(th), np.sin(th)
    su = cos * du + sin * dv + c
    sv = -sin * du + cos * dv + c
    iu = np.floor(su + 0.5).astype(np.int64)
    iv = np.floor(sv + 0.5).astype(np.int64)
    inside = (iu >= 0) & (iu < n) & (iv >= 0) & (iv < n)
    src = np.full((n, n), BACKGROUND, dtype=crop.image.dtype)
    src[inside] = crop.image[iv[inside], iu[inside]]

    hand = src != BACKGROUND
    vals = src[hand].astype(np.float64) * s + dz
    keep = (vals >= -1.0) & (vals < 1.0)
    out = np.full_like(src, BACKGROUND)
    hv = np.flatnonzero(hand.ravel())
    out.ravel()[hv[keep]] = vals[keep].astype(out.dtype)

    joints = np.array(crop.joints_uvd_norm, dtype=np.float64)
    joints[:, :2] = transform_uv(joints[:, :2], params, n, cube)
    joints[:, 2] = np.clip(joints[:, 2] * s + dz, -1.0, 1.0)
    return NormalizedCrop(image=out, crop=crop.crop, joints_uvd_norm=joints)


def geometric_augment(crop: NormalizedCrop, cfg: AugmentConfig,
                      rng: np.random.Generator) -> NormalizedCrop:
    return geometric_transform(crop, sample_geometric(cfg, rng))


def augment(crop: NormalizedCrop, cfg: AugmentConfig, rng: np.random.Generator,
            pixdrop: bool = True) -> NormalizedCrop:
    """Geometric transform (if enabled) followed by PixDropout (if enabled)."""
    if cfg.geometric:
        crop = geometric_augment(crop, cfg, rng)
    if pixdrop and cfg.alpha > 0:
        crop = pixdropout(crop, cfg.alpha, rng)
    return crop
