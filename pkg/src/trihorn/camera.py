"""Pinhole projection and the crop-and-normalize pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BACKGROUND = 1.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")


@dataclass(frozen=True)
class CropSpec:
    center_xyz: tuple
    cube_mm: float = 150.0
    out_size: int = 128

    def __post_init__(self):
        if self.cube_mm <= 0:
            raise ValueError("cube_mm must be positive")
        if self.out_size < 16:
            raise ValueError("out_size must be at least 16")


@dataclass
class DepthFrame:
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    joints_xyz: np.ndarray
    joints_uvd: np.ndarray = None
    id: str = ""
    subject: str | None = None

    def __post_init__(self):
        self.joints_xyz = np.asarray(self.joints_xyz, dtype=np.float64)
        if self.joints_uvd is None:
            self.joints_uvd = xyz_to_uvd(self.joints_xyz, self.intrinsics)
        if np.any(self.depth < 0):
            raise ValueError(f"frame {self.id!r}: negative depth values")


@dataclass
class NormalizedCrop:
    image: np.ndarray
    crop: CropSpec
    joints_uvd_norm: np.ndarray = field(default=None)


def xyz_to_uvd(p, K: CameraIntrinsics) -> np.ndarray:
    """Project camera-space points (mm) to (u px, v px, depth mm). Works on [..., 3]."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise ValueError("cannot project points with non-positive depth")
    return np.stack([K.fx * p[..., 0] / z + K.cx, K.fy * p[..., 1] / z + K.cy, z], axis=-1)


def uvd_to_xyz(q, K: CameraIntrinsics) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    d = q[..., 2]
    if np.any(d <= 0):
        raise ValueError("cannot back-project points with non-positive depth")
    return np.stack([(q[..., 0] - K.cx) * d / K.fx, (q[..., 1] - K.cy) * d / K.fy, d], axis=-1)


def _crop_affine(crop: CropSpec, K: CameraIntrinsics):
    """Scale (crop px per image px) and image-space center for u and v."""
    center = xyz_to_uvd(crop.center_xyz, K)
    z = center[2]
    su = crop.out_size / (2 * K.fx * crop.cube_mm / z)
    sv = crop.out_size / (2 * K.fy * crop.cube_mm / z)
    return center, su, sv


def image_to_crop_uv(uv, crop: CropSpec, K: CameraIntrinsics) -> np.ndarray:
    center, su, sv = _crop_affine(crop, K)
    uv = np.asarray(uv, dtype=np.float64)
    mid = (crop.out_size - 1) / 2
    return np.stack([(uv[..., 0] - center[0]) * su + mid, (uv[..., 1] - center[1]) * sv + mid], axis=-1)


def crop_to_image_uv(uv, crop: CropSpec, K: CameraIntrinsics) -> np.ndarray:
    center, su, sv = _crop_affine(crop, K)
    uv = np.asarray(uv, dtype=np.float64)
    mid = (crop.out_size - 1) / 2
    return np.stack([(uv[..., 0] - mid) / su + center[0], (uv[..., 1] - mid) / sv + center[1]], axis=-1)


def crop_and_normalize(frame: DepthFrame, crop: CropSpec) -> NormalizedCrop:
    """Resample the cube around ``crop.center_xyz`` to a square crop in [-1, 1].

    Pixels outside the depth range of the cube, and missing pixels, become the
    background value +1. Joint UVs are expressed in crop pixels and joint depth
    as (d - center_z) / cube_mm, clamped to [-1, 1].
    """
    K = frame.intrinsics
    cz = float(crop.center_xyz[2])
    if cz <= 0:
        raise ValueError("crop center must have positive depth")
    n = crop.out_size
    idx = np.arange(n, dtype=np.float64)
    src = crop_to_image_uv(np.stack([idx, idx], axis=-1), crop, K)
    cols = np.floor(src[:, 0] + 0.5).astype(np.int64)
    rows = np.floor(src[:, 1] + 0.5).astype(np.int64)
    H, W = frame.depth.shape
    col_ok = (cols >= 0) & (cols < W)
    row_ok = (rows >= 0) & (rows < H)
    if not col_ok.any() or not row_ok.any():
        raise ValueError(f"frame {frame.id!r}: crop window lies entirely outside the depth image")

    depth = np.zeros((n, n), dtype=np.float64)
    sub = frame.depth[np.clip(rows, 0, H - 1)][:, np.clip(cols, 0, W - 1)]
    valid = row_ok[:, None] & col_ok[None, :]
    depth[valid] = sub[valid]

    image = np.full((n, n), BACKGROUND, dtype=np.float32)
    hand = (depth > 0) & (np.abs(depth - cz) <= crop.cube_mm)
    image[hand] = ((depth[hand] - cz) / crop.cube_mm).astype(np.float32)

    uvd = np.asarray(frame.joints_uvd, dtype=np.float64)
    joints = np.empty_like(uvd)
    joints[:, :2] = image_to_crop_uv(uvd[:, :2], crop, K)
    joints[:, 2] = np.clip((uvd[:, 2] - cz) / crop.cube_mm, -1.0, 1.0)
    return NormalizedCrop(image=image, crop=crop, joints_uvd_norm=joints)


def uncrop_pose(pose_norm, crop: CropSpec, K: CameraIntrinsics) -> np.ndarray:
    """Map crop-space (u, v, normalized depth) back to camera-space mm."""
    pose_norm = np.asarray(pose_norm, dtype=np.float64)
    uv = crop_to_image_uv(pose_norm[..., :2], crop, K)
    d = pose_norm[..., 2] * crop.cube_mm + float(crop.center_xyz[2])
    return uvd_to_xyz(np.concatenate([uv, d[..., None]], axis=-1), K)


def centroid_crop(frame: DepthFrame, cube_mm: float = 150.0, out_size: int = 128) -> CropSpec:
    """Crop spec centered on the ground-truth joint centroid."""
    return CropSpec(tuple(np.mean(frame.joints_xyz, axis=0)), cube_mm, out_size)
