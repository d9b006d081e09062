"""Optimizer, training loop, evaluation metrics and the ablation harness."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import augment, sample_rng
from .camera import NormalizedCrop, centroid_crop, crop_and_normalize, uncrop_pose
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, load_train_config
from .model import build_model, compute_losses

log = logging.getLogger(__name__)

CONFIG_NAME = "config.txt"
CHECKPOINT_NAME = "model.thn"
STATE_NAME = "train_state.npz"
LOSS_CSV = "loss.csv"
DEFAULT_THRESHOLDS = tuple(float(t) for t in range(0, 81, 2))


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite loss at step {step}{': ' + detail if detail else ''}")
        self.step = step


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Single cosine anneal from lr0 at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    step = min(max(step, 0), total_steps)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0):
    """In-place Adam update of the arrays in ``params``.

    Weight decay is decoupled: p <- p - lr*wd*p before the moment update.
    ``None`` gradients count as zeros.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and optimizer state differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is not None and np.shape(g) != p.shape:
            raise T.ShapeError(f"gradient {i} has shape {np.shape(g)}, parameter has {p.shape}")
        if state.m[i].shape != p.shape:
            raise T.ShapeError(f"optimizer state {i} has shape {state.m[i].shape}, parameter has {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            p -= (lr * weight_decay) * p
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------

@dataclass
class Samples:
    crops: list              # NormalizedCrop per frame
    intrinsics: list
    joints_xyz: np.ndarray   # (N, J, 3) mm

    def __len__(self):
        return len(self.crops)

    def images(self, idx=None) -> np.ndarray:
        idx = range(len(self.crops)) if idx is None else idx
        return np.stack([self.crops[i].image for i in idx])[:, None]

    def labels(self, idx=None) -> np.ndarray:
        idx = range(len(self.crops)) if idx is None else idx
        return np.stack([self.crops[i].joints_uvd_norm for i in idx])


def prepare_samples(frames, cube_mm: float = 150.0, out_size: int = 128) -> Samples:
    """Crop every frame around its ground-truth joint centroid."""
    crops, Ks, xyz = [], [], []
    for f in frames:
        crops.append(crop_and_normalize(f, centroid_crop(f, cube_mm, out_size)))
        Ks.append(f.intrinsics)
        xyz.append(np.asarray(f.joints_xyz, dtype=np.float64))
    return Samples(crops, Ks, np.array(xyz))


def _batch(samples: Samples, idx, cfg: TrainConfig, epoch: int, dtype):
    aug = cfg.augment_config()
    imgs, labels = [], []
    for i in idx:
        c: NormalizedCrop = samples.crops[i]
        if aug.geometric or aug.alpha > 0:
            c = augment(c, aug, sample_rng(cfg.seed, epoch, 1, i))
        imgs.append(c.image)
        labels.append(c.joints_uvd_norm)
    return np.stack(imgs)[:, None].astype(dtype), np.stack(labels)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)     # per-epoch dicts
    step_losses: list = field(default_factory=list)
    checkpoint: Path | None = None
    completed: bool = True


def _save_state(out: Path, cfg, model, opt: AdamState, epoch, step, history, step_losses):
    params = model.parameters()
    arrays = {f"p{i}": p.data for i, p in enumerate(params)}
    arrays.update({f"m{i}": m for i, m in enumerate(opt.m)})
    arrays.update({f"v{i}": v for i, v in enumerate(opt.v)})
    hist = np.array([[h["epoch"], h["step"], h["lr"], h["loss"], h["l_uv"], h["l_d"]] for h in history],
                    dtype=np.float64).reshape(-1, 6)
    tmp = out / (STATE_NAME + ".tmp.npz")
    np.savez(tmp, t=opt.t, epoch=epoch, step=step, config_hash=cfg.hash(), history=hist,
             step_losses=np.asarray(step_losses, dtype=np.float64), **arrays)
    tmp.replace(out / STATE_NAME)


def _load_state(out: Path, cfg, model, opt: AdamState):
    path = out / STATE_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no resumable training state in {out}")
    with np.load(path) as z:
        if str(z["config_hash"]) != cfg.hash():
            raise ValueError("training state was written by a different configuration")
        for i, p in enumerate(model.parameters()):
            p.data = z[f"p{i}"].astype(p.dtype)
            opt.m[i] = z[f"m{i}"].copy()
            opt.v[i] = z[f"v{i}"].copy()
        opt.t = int(z["t"])
        history = [dict(zip(("epoch", "step", "lr", "loss", "l_uv", "l_d"), row)) for row in z["history"]]
        for h in history:
            h["epoch"], h["step"] = int(h["epoch"]), int(h["step"])
        return int(z["epoch"]), int(z["step"]), history, list(z["step_losses"])


def write_loss_csv(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "lr", "loss", "l_uv", "l_d"])
        for h in history:
            w.writerow([h["epoch"], h["step"], repr(float(h["lr"])), repr(float(h["loss"])),
                        repr(float(h["l_uv"])), repr(float(h["l_d"]))])


def read_loss_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _step(model, images, labels, cfg, opt, lr, step) -> tuple:
    """One optimizer step; the graph is released when this returns."""
    try:
        _, losses = compute_losses(model, images, labels, cfg.lam)
    except FloatingPointError as e:
        raise NonFiniteLoss(step, str(e)) from None
    values = tuple(float(losses[k].item()) for k in ("loss", "l_uv", "l_d"))
    if not math.isfinite(values[0]):
        raise NonFiniteLoss(step)
    losses["loss"].backward()
    params = model.parameters()
    adam_step([p.data for p in params], [p.grad for p in params], opt, lr, cfg.weight_decay)
    model.zero_grad()
    return values


def train(cfg: TrainConfig, frames=None, out_dir=None, samples: Samples | None = None,
          resume: bool = False, stop_after_epochs: int | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Train a model on ``frames`` (or pre-cropped ``samples``).

    With ``out_dir`` set, writes the config, a THN1 checkpoint, a resumable
    full-precision state file and the per-epoch loss CSV after each epoch.
    ``stop_after_epochs`` ends the run early (the state stays resumable).
    """
    if samples is None:
        samples = prepare_samples(frames, cfg.cube_mm, cfg.out_size)
    n = len(samples)
    if n == 0:
        raise ValueError("no training frames")
    if samples.labels([0]).shape[1] != cfg.n_joints:
        raise ValueError(f"data has {samples.labels([0]).shape[1]} joints, config expects {cfg.n_joints}")
    dtype = np.float64 if cfg.dtype == "float64" else np.float32
    model = build_model(cfg.model_spec(), seed=cfg.seed, dtype=dtype)
    params = model.parameters()
    opt = AdamState.zeros_like([p.data for p in params])
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    if max_steps is not None:
        total = min(total, max_steps)

    out = Path(out_dir) if out_dir is not None else None
    epoch0, step, history, step_losses = 0, 0, [], []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume:
            epoch0, step, history, step_losses = _load_state(out, cfg, model, opt)
            log.info("resumed at epoch %d, step %d", epoch0, step)
        (out / CONFIG_NAME).write_text(cfg.to_text(), encoding="utf-8")
    elif resume:
        raise ValueError("resume needs an output directory")

    result = TrainResult(model, history, step_losses)
    for epoch in range(epoch0, cfg.epochs):
        if step >= total:
            break
        order = sample_rng(cfg.seed, epoch, 0).permutation(n)
        sums = np.zeros(3)
        count = 0
        lr = cosine_lr(step, total, cfg.lr0)
        for b in range(steps_per_epoch):
            if step >= total:
                break
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            images, labels = _batch(samples, idx, cfg, epoch, dtype)
            lr = cosine_lr(step, total, cfg.lr0)
            values = _step(model, images, labels, cfg, opt, lr, step)
            sums += values
            loss = values[0]
            count += 1
            step_losses.append(loss)
            step += 1
        mean = sums / max(count, 1)
        history.append({"epoch": epoch, "step": step, "lr": lr, "loss": mean[0], "l_uv": mean[1],
                        "l_d": mean[2]})
        log.info("epoch %d step %d loss %.6f (uv %.6f, d %.6f)", epoch, step, *mean)
        last = epoch + 1 == cfg.epochs or step >= total
        if out is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or last):
            result.checkpoint = save_checkpoint(out / CHECKPOINT_NAME, model.state_dict())
            _save_state(out, cfg, model, opt, epoch + 1, step, history, step_losses)
            write_loss_csv(out / LOSS_CSV, history)
        if stop_after_epochs is not None and epoch + 1 - epoch0 >= stop_after_epochs and not last:
            result.completed = False
            break
    return result


def load_trained(ckpt_path, cfg: TrainConfig | None = None):
    """Rebuild a model from a THN1 file and the config saved next to it."""
    ckpt_path = Path(ckpt_path)
    if cfg is None:
        cfg_path = ckpt_path.parent / CONFIG_NAME
        if not cfg_path.is_file():
            raise FileNotFoundError(f"no {CONFIG_NAME} next to {ckpt_path}; pass a config explicitly")
        cfg = load_train_config(cfg_path)
    dtype = np.float64 if cfg.dtype == "float64" else np.float32
    model = build_model(cfg.model_spec(), seed=cfg.seed, dtype=dtype)
    model.load_state_dict(load_checkpoint(ckpt_path))
    return model, cfg


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_uvd(model, samples: Samples, batch_size: int = 32) -> np.ndarray:
    """Network pose in crop space (u px, v px, normalized depth), (N, J, 3)."""
    outs = []
    with T.no_grad():
        for s in range(0, len(samples), batch_size):
            idx = range(s, min(s + batch_size, len(samples)))
            outs.append(model(samples.images(idx).astype(model.dtype))["pose"])
    return np.concatenate(outs).astype(np.float64)


def predict_xyz(model, samples: Samples, batch_size: int = 32) -> np.ndarray:
    uvd = predict_uvd(model, samples, batch_size)
    return np.stack([uncrop_pose(p, c.crop, K) for p, c, K in zip(uvd, samples.crops, samples.intrinsics)])


def joint_errors(pred, gt) -> np.ndarray:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise T.ShapeError(f"pose arrays must match and end in 3, got {pred.shape} and {gt.shape}")
    return np.linalg.norm(pred - gt, axis=-1)


def mean_distance_error(pred, gt) -> float:
    """Mean Euclidean joint error over all joints and frames."""
    return float(joint_errors(pred, gt).mean())


def success_rate(pred, gt, thresholds) -> list[tuple[float, float]]:
    """Fraction of frames whose mean joint error is strictly below each threshold."""
    e = joint_errors(pred, gt)
    per_frame = e.reshape(-1, e.shape[-1]).mean(axis=1) if e.ndim > 1 else e[None].mean(axis=1)
    n = len(per_frame)
    return [(float(t), float(np.count_nonzero(per_frame < t)) / n) for t in thresholds]


@dataclass
class EvalReport:
    mean_error_mm: float
    per_joint_error_mm: list
    success_curve: list
    n_frames: int = 0
    extras: dict = field(default_factory=dict)

    @classmethod
    def from_poses(cls, pred, gt, thresholds=DEFAULT_THRESHOLDS, **extras) -> "EvalReport":
        e = joint_errors(pred, gt)
        return cls(float(e.mean()), e.mean(axis=0).tolist(), success_rate(pred, gt, thresholds),
                   int(e.shape[0]), dict(extras))

    def rows(self):
        yield ("summary", "mean_error_mm", repr(self.mean_error_mm))
        yield ("summary", "n_frames", str(self.n_frames))
        for k, v in self.extras.items():
            yield ("summary", k, str(v))
        for j, v in enumerate(self.per_joint_error_mm):
            yield ("joint", str(j), repr(float(v)))
        for t, f in self.success_curve:
            yield ("success", repr(float(t)), repr(float(f)))

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "name", "value"])
            w.writerows(self.rows())

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        mean, n, joints, curve, extras = None, 0, [], [], {}
        with open(path, encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                kind, name, value = row["kind"], row["name"], row["value"]
                if kind == "summary" and name == "mean_error_mm":
                    mean = float(value)
                elif kind == "summary" and name == "n_frames":
                    n = int(value)
                elif kind == "summary":
                    extras[name] = value
                elif kind == "joint":
                    joints.append(float(value))
                elif kind == "success":
                    curve.append((float(name), float(value)))
        return cls(mean, joints, curve, n, extras)


def evaluate(model, samples: Samples, cfg: TrainConfig | None = None,
             thresholds=DEFAULT_THRESHOLDS, batch_size: int = 32) -> tuple[EvalReport, np.ndarray]:
    pred = predict_xyz(model, samples, batch_size)
    extras = {}
    if cfg is not None:
        extras = {"config_hash": cfg.hash(), "batch_size": cfg.batch_size}
    return EvalReport.from_poses(pred, samples.joints_xyz, thresholds, **extras), pred


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def fusion_grid():
    from .model import MODES
    return [(f"mode={m}", {"mode": m}) for m in MODES]


def encoder_grid():
    from .model import ENCODERS
    return [(f"encoder={e}", {"encoder": e}) for e in ENCODERS]


def pixdropout_grid():
    return [(f"arch={a},pixdropout={'on' if on else 'off'}", {"arch": a, "pixdropout": on})
            for a in ("trihorn", "regression") for on in (True, False)]


GRIDS = {"fusion": fusion_grid, "encoder": encoder_grid, "pixdropout": pixdropout_grid}
ABLATION_FIELDS = ["name", "arch", "mode", "encoder", "pixdropout", "epochs", "batch_size", "seed",
                   "final_loss", "mean_error_mm", "config_hash"]


def run_ablation_suite(base: TrainConfig, grid, train_samples: Samples, test_samples: Samples,
                       csv_path=None) -> list[dict]:
    """Train every configuration of ``grid`` with the same seed and data."""
    rows = []
    for name, overrides in grid:
        cfg = base.replace(**overrides)
        res = train(cfg, samples=train_samples)
        report, _ = evaluate(res.model, test_samples, cfg)
        rows.append({
            "name": name, "arch": cfg.arch, "mode": cfg.mode, "encoder": cfg.encoder,
            "pixdropout": "on" if cfg.pixdropout else "off", "epochs": cfg.epochs,
            "batch_size": cfg.batch_size, "seed": cfg.seed,
            "final_loss": float(res.history[-1]["loss"]), "mean_error_mm": float(report.mean_error_mm),
            "config_hash": cfg.hash(),
        })
        log.info("ablation %s: loss %.5f, error %.2f mm", name, rows[-1]["final_loss"],
                 report.mean_error_mm)
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return rows
