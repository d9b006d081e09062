"""Synthetic depth hands and the on-disk dataset format.

A dataset directory holds ``manifest.jsonl`` (one JSON record per frame) and
raw little-endian float32 depth rasters. Record fields::

    {"id", "depth_file", "H", "W", "fx", "fy", "cx", "cy", "joints_xyz", "subject"}

``depth_file`` is relative to the manifest's directory; depth is in mm with 0
marking missing pixels.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .camera import CameraIntrinsics, DepthFrame, xyz_to_uvd
from .config import ConfigError, read_kv

MANIFEST_NAME = "manifest.jsonl"


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# skeleton
# ---------------------------------------------------------------------------

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
# 21 joints: wrist, then per finger (mcp, pip, dip, tip)
JOINT_NAMES = ("wrist",) + tuple(f"{f}_{p}" for f in FINGERS for p in ("mcp", "pip", "dip", "tip"))
# joints kept when fewer than 21 are requested, most informative first
JOINT_PRIORITY = (
    ["wrist"] + [f"{f}_tip" for f in FINGERS] + [f"{f}_pip" for f in FINGERS]
    + [f"{f}_mcp" for f in FINGERS] + [f"{f}_dip" for f in FINGERS]
)

# hand frame: x to the thumb side, y toward the fingertips, z out of the palm
# (the final flip about x turns +z toward the camera)
_MCP = {"thumb": (-28.0, 22.0), "index": (-24.0, 78.0), "middle": (-6.0, 82.0),
        "ring": (12.0, 78.0), "pinky": (28.0, 70.0)}
_BONES = {"thumb": (32.0, 28.0, 24.0), "index": (40.0, 24.0, 20.0), "middle": (44.0, 28.0, 22.0),
          "ring": (40.0, 26.0, 20.0), "pinky": (32.0, 20.0, 18.0)}
_RADIUS = {"thumb": 9.0, "index": 8.0, "middle": 8.0, "ring": 7.5, "pinky": 6.5}
_SPLAY = {"thumb": 50.0, "index": 8.0, "middle": 0.0, "ring": -8.0, "pinky": -16.0}
_PALM_CENTER = (0.0, 45.0)
_PALM_RADIUS = 40.0
_WRIST_RADIUS = 12.0


@dataclass(frozen=True)
class SynthSpec:
    n_joints: int = 14
    n_frames: int = 100
    width: int = 320
    height: int = 240
    fx: float = 475.0
    fy: float = 475.0
    cx: float = 160.0
    cy: float = 120.0
    rng_seed: int = 0
    n_subjects: int = 9
    depth_range: tuple = (330.0, 450.0)
    roll_deg: float = 60.0          # in-plane rotation range, +/-
    tilt_deg: float = 25.0          # out-of-plane rotation range, +/-
    flex_deg: tuple = (0.0, 80.0)   # per-joint finger flexion
    spread_deg: float = 8.0         # finger abduction jitter, +/-
    jitter_mm: float = 0.0          # optional uniform depth noise

    def __post_init__(self):
        if not 1 <= self.n_joints <= len(JOINT_NAMES):
            raise ValueError(f"n_joints must be in 1..{len(JOINT_NAMES)}")
        if self.n_frames < 0 or self.n_subjects < 1:
            raise ValueError("n_frames must be >= 0 and n_subjects >= 1")
        if self.width < 64 or self.height < 64:
            raise ValueError("image must be at least 64x64")
        if not 0 < self.depth_range[0] <= self.depth_range[1]:
            raise ValueError("depth_range must be positive and ordered")
        if self.jitter_mm < 0:
            raise ValueError("jitter_mm must be non-negative")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)

    @property
    def joint_names(self) -> tuple:
        keep = set(JOINT_PRIORITY[: self.n_joints])
        return tuple(n for n in JOINT_NAMES if n in keep)


def load_synth_spec(path, **overrides) -> SynthSpec:
    types = {f.name: f.type for f in fields(SynthSpec)}
    values = {}
    for no, key, value, raw in read_kv(path):
        if key not in types:
            raise ConfigError(f"unknown key {key!r}", no, raw)
        try:
            t = types[key]
            if t == "tuple":
                parts = value.replace(",", " ").split()
                if len(parts) != 2:
                    raise ValueError(f"expected two numbers, got {value!r}")
                values[key] = (float(parts[0]), float(parts[1]))
            elif t == "int":
                values[key] = int(value)
            else:
                values[key] = float(value)
        except ValueError as e:
            raise ConfigError(str(e), no, raw) from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return SynthSpec(**values)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _rot(axis: str, deg: float) -> np.ndarray:
    c, s = np.cos(np.deg2rad(deg)), np.sin(np.deg2rad(deg))
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _skeleton(rng: np.random.Generator, spec: SynthSpec, hand_scale: float):
    """21 joints in the hand frame (mm) plus (bone, radius) capsules."""
    joints = {"wrist": np.zeros(3)}
    capsules = []
    lo, hi = spec.flex_deg
    for f in FINGERS:
        mx, my = _MCP[f]
        base = np.array([mx, my, 0.0]) * hand_scale
        splay = _SPLAY[f] + rng.uniform(-spec.spread_deg, spec.spread_deg)
        # finger direction starts along +y; thumb also rolls toward the palm
        frame = _rot("z", splay)
        if f == "thumb":
            frame = frame @ _rot("y", -40.0)
        p = base
        joints[f"{f}_mcp"] = p
        capsules.append((np.zeros(3), p, _RADIUS[f] * hand_scale))
        for seg, name in zip(_BONES[f], ("pip", "dip", "tip")):
            # flexion curls the finger out of the palm plane, toward the camera
            frame = frame @ _rot("x", rng.uniform(lo, hi))
            q = p + frame @ np.array([0.0, seg * hand_scale, 0.0])
            joints[f"{f}_{name}"] = q
            capsules.append((p, q, _RADIUS[f] * hand_scale))
            p = q
    return joints, capsules


def _palm_spheres(hand_scale: float):
    pts = []
    r = _PALM_RADIUS * hand_scale
    cx, cy = (v * hand_scale for v in _PALM_CENTER)
    step = 7.0 * hand_scale
    for gx in np.arange(-r, r + 1e-9, step):
        for gy in np.arange(-r, r + 1e-9, step):
            if gx * gx + gy * gy <= r * r:
                pts.append((np.array([cx + gx, cy + gy, 0.0]), 9.0 * hand_scale))
    pts.append((np.zeros(3), _WRIST_RADIUS * hand_scale))
    return pts


def _render(spheres, K: CameraIntrinsics, H: int, W: int):
    """Z-buffer of sphere front surfaces. Returns (depth, owner index)."""
    depth = np.full((H, W), np.inf)
    owner = np.full((H, W), -1, dtype=np.int64)
    for idx, (c, r) in enumerate(spheres):
        z = c[2]
        u0 = K.fx * c[0] / z + K.cx
        v0 = K.fy * c[1] / z + K.cy
        # the silhouette of a near sphere is slightly wider than r / z; pad the window
        ru, rv = 1.2 * K.fx * r / z + 1, 1.2 * K.fy * r / z + 1
        u_lo, u_hi = max(int(np.floor(u0 - ru)), 0), min(int(np.ceil(u0 + ru)), W - 1)
        v_lo, v_hi = max(int(np.floor(v0 - rv)), 0), min(int(np.ceil(v0 + rv)), H - 1)
        if u_lo > u_hi or v_lo > v_hi:
            continue
        # pixel rays (a, b, 1) hit the sphere at depth z solving |z*ray - c| = r
        a = ((np.arange(u_lo, u_hi + 1) - K.cx) / K.fx)[None, :]
        b = ((np.arange(v_lo, v_hi + 1) - K.cy) / K.fy)[:, None]
        dd = a * a + b * b + 1.0
        dc = a * c[0] + b * c[1] + c[2]
        disc = dc * dc - dd * (c @ c - r * r)
        inside = disc > 0
        d = (dc - np.sqrt(np.where(inside, disc, 0.0))) / dd
        win = depth[v_lo:v_hi + 1, u_lo:u_hi + 1]
        closer = inside & (d < win)
        win[closer] = d[closer]
        owner[v_lo:v_hi + 1, u_lo:u_hi + 1][closer] = idx
    depth[~np.isfinite(depth)] = 0.0
    return depth, owner


@dataclass
class SynthFrame:
    """A generated frame plus the bookkeeping used by geometric checks."""
    frame: DepthFrame
    owner: np.ndarray
    joint_sphere: np.ndarray    # sphere index centered on each selected joint
    joint_radius: np.ndarray


def _frame_rng(spec: SynthSpec, index: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.rng_seed, index, attempt]))


def generate_frame_detailed(spec: SynthSpec, index: int) -> SynthFrame:
    K = spec.intrinsics
    names = spec.joint_names
    subject = index % spec.n_subjects
    # subject-specific hand size, shared by all frames of that subject
    hand_scale = np.random.default_rng([spec.rng_seed, 7919, subject]).uniform(0.9, 1.1)
    for attempt in range(100):
        rng = _frame_rng(spec, index, attempt)
        joints, capsules = _skeleton(rng, spec, hand_scale)
        rot = (_rot("z", rng.uniform(-spec.roll_deg, spec.roll_deg))
               @ _rot("x", rng.uniform(-spec.tilt_deg, spec.tilt_deg))
               @ _rot("y", rng.uniform(-spec.tilt_deg, spec.tilt_deg))
               @ _rot("x", 180.0))  # fingers up in the image, palm facing the camera
        sel = np.array([joints[n] for n in names])
        center_local = sel.mean(axis=0)
        zc = rng.uniform(*spec.depth_range)
        # place the selected-joint centroid near the image center
        u_c = spec.cx + rng.uniform(-0.15, 0.15) * spec.width
        v_c = spec.cy + rng.uniform(-0.15, 0.15) * spec.height
        t = np.array([(u_c - K.cx) * zc / K.fx, (v_c - K.cy) * zc / K.fy, zc])

        def to_cam(p):
            return rot @ (np.asarray(p) - center_local) + t

        joints_cam = {n: to_cam(p) for n, p in joints.items()}
        xyz = np.array([joints_cam[n] for n in names])
        if np.any(xyz[:, 2] <= 50):
            continue
        uvd = xyz_to_uvd(xyz, K)
        centroid = xyz.mean(axis=0)
        ok = (np.all((uvd[:, 0] >= 0) & (uvd[:, 0] <= spec.width - 1))
              and np.all((uvd[:, 1] >= 0) & (uvd[:, 1] <= spec.height - 1))
              and np.all(np.abs(xyz - centroid) < 0.8 * 150.0))
        if ok:
            break
    else:  # pragma: no cover - ranges are generous
        raise RuntimeError(f"could not place hand for frame {index}")

    spheres = [(to_cam(c), r) for c, r in _palm_spheres(hand_scale)]
    joint_sphere = {}
    for a, b, r in capsules:
        a_c, b_c = to_cam(a), to_cam(b)
        n_steps = max(int(np.ceil(np.linalg.norm(b_c - a_c) / (0.4 * r))), 1)
        for k in range(1, n_steps):
            spheres.append((a_c + (b_c - a_c) * k / n_steps, r))
    radius = {"wrist": _WRIST_RADIUS * hand_scale}
    for f in FINGERS:
        for p in ("mcp", "pip", "dip", "tip"):
            radius[f"{f}_{p}"] = _RADIUS[f] * hand_scale
    for n in JOINT_NAMES:
        joint_sphere[n] = len(spheres)
        spheres.append((joints_cam[n], radius[n]))

    depth, owner = _render(spheres, K, spec.height, spec.width)
    if spec.jitter_mm > 0:
        noise = rng.uniform(-spec.jitter_mm, spec.jitter_mm, size=depth.shape)
        depth = np.where(depth > 0, depth + noise, 0.0)
    frame = DepthFrame(depth=depth.astype(np.float32), intrinsics=K, joints_xyz=xyz,
                       id=f"f{index:06d}", subject=f"s{subject}")
    return SynthFrame(frame, owner, np.array([joint_sphere[n] for n in names]),
                      np.array([radius[n] for n in names]))


def generate_frame(spec: SynthSpec, index: int) -> DepthFrame:
    """Render frame ``index``; identical (spec, index) gives identical output."""
    return generate_frame_detailed(spec, index).frame


def generate_frames(spec: SynthSpec, start: int = 0, count: int | None = None) -> Iterator[DepthFrame]:
    count = spec.n_frames - start if count is None else count
    for i in range(start, start + count):
        yield generate_frame(spec, i)


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------

def _record(frame: DepthFrame, depth_file: str) -> dict:
    K = frame.intrinsics
    H, W = frame.depth.shape
    return {
        "id": frame.id, "depth_file": depth_file, "H": H, "W": W,
        "fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy,
        "joints_xyz": np.asarray(frame.joints_xyz, dtype=np.float64).tolist(),
        "subject": frame.subject,
    }


def write_dataset(frames, out_dir, depth_subdir: str = "depth") -> Path:
    """Write frames as a manifest plus one ``.f32`` file each; returns the manifest path."""
    out = Path(out_dir)
    (out / depth_subdir).mkdir(parents=True, exist_ok=True)
    manifest = out / MANIFEST_NAME
    seen = set()
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        for i, frame in enumerate(frames):
            fid = frame.id or f"f{i:06d}"
            if fid in seen:
                raise DatasetError(f"duplicate frame id {fid!r}")
            seen.add(fid)
            rel = f"{depth_subdir}/{fid}.f32"
            np.ascontiguousarray(frame.depth, dtype="<f4").tofile(out / rel)
            rec = _record(frame, rel)
            rec["id"] = fid
            fh.write(json.dumps(rec) + "\n")
    return manifest


_REQUIRED = ("id", "depth_file", "H", "W", "fx", "fy", "cx", "cy", "joints_xyz")


def read_manifest(manifest_path) -> list[dict]:
    """Parse and validate every record (cheap: no depth data is read)."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    records = []
    n_joints = None
    with open(path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{no}: malformed JSON record ({e.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetError(f"{path}:{no}: record is not an object")
            missing = [k for k in _REQUIRED if k not in rec]
            if missing:
                raise DatasetError(f"{path}:{no}: record missing fields {missing}")
            try:
                joints = np.asarray(rec["joints_xyz"], dtype=np.float64)
                H, W = int(rec["H"]), int(rec["W"])
            except (TypeError, ValueError):
                raise DatasetError(f"{path}:{no}: non-numeric H/W/joints") from None
            if joints.ndim != 2 or joints.shape[1] != 3 or H < 1 or W < 1:
                raise DatasetError(f"{path}:{no}: joints_xyz must be Jx3 and H, W positive")
            if n_joints is None:
                n_joints = joints.shape[0]
            elif joints.shape[0] != n_joints:
                raise DatasetError(f"{path}:{no}: frame {rec['id']!r} has {joints.shape[0]} joints, "
                                   f"earlier frames have {n_joints}")
            rec["_line"] = no
            rec["_path"] = path.parent / rec["depth_file"]
            records.append(rec)
    return records


def _load_record(rec: dict) -> DepthFrame:
    fp = rec["_path"]
    H, W = int(rec["H"]), int(rec["W"])
    if not fp.is_file():
        raise DatasetError(f"frame {rec['id']!r}: depth file missing: {fp}")
    size = fp.stat().st_size
    if size != H * W * 4:
        raise DatasetError(f"frame {rec['id']!r}: depth file {fp.name} has {size} bytes, "
                           f"expected {H * W * 4} (truncated or wrong size)")
    depth = np.fromfile(fp, dtype="<f4").reshape(H, W).astype(np.float32)
    K = CameraIntrinsics(float(rec["fx"]), float(rec["fy"]), float(rec["cx"]), float(rec["cy"]))
    try:
        return DepthFrame(depth=depth, intrinsics=K, joints_xyz=rec["joints_xyz"],
                          id=str(rec["id"]), subject=rec.get("subject"))
    except ValueError as e:
        raise DatasetError(f"line {rec['_line']}: {e}") from None


class Dataset:
    """Lazily loaded frames; records are validated up front, rasters on access."""

    def __init__(self, manifest_path):
        self.records = read_manifest(manifest_path)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i) -> DepthFrame:
        return _load_record(self.records[i])

    def __iter__(self) -> Iterator[DepthFrame]:
        for rec in self.records:
            yield _load_record(rec)

    @property
    def n_joints(self) -> int:
        return len(self.records[0]["joints_xyz"]) if self.records else 0


def load_dataset(manifest_path) -> Dataset:
    return Dataset(manifest_path)


def split_by_subject(frames, held_out_subject) -> tuple[list, list]:
    train, test = [], []
    for f in frames:
        if f.subject is None:
            raise DatasetError(f"frame {f.id!r} has no subject label; subject splits need one on every frame")
        (test if f.subject == held_out_subject else train).append(f)
    return train, test


def frames_equal(a: DepthFrame, b: DepthFrame) -> bool:
    return (a.id == b.id and a.subject == b.subject and a.intrinsics == b.intrinsics
            and np.array_equal(a.depth, b.depth) and np.array_equal(a.joints_xyz, b.joints_xyz))


def dir_is_nonempty(path) -> bool:
    return os.path.isdir(path) and any(os.scandir(path))
