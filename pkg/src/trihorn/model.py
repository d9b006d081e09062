"""TriHorn-Net: encoder, three branches, attention fusion, depth pooling and losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

ENCODERS = ("hourglass", "downsample_deconv")
MODES = ("fused", "uv_only", "enh_only", "fuse_sum", "fuse_concat")
ARCHS = ("trihorn", "regression")


@dataclass
class EncoderSpec:
    variant: str = "hourglass"
    base_channels: int = 32
    out_channels: int = 64
    levels: int = 3

    def __post_init__(self):
        if self.variant not in ENCODERS:
            raise ValueError(f"unknown encoder variant {self.variant!r}; expected one of {ENCODERS}")
        if self.base_channels < 1 or self.out_channels < 1 or self.levels < 1:
            raise ValueError("encoder widths and levels must be positive")


@dataclass
class ModelSpec:
    n_joints: int = 14
    depth_features: int = 64
    head_channels: int = 32
    encoder: EncoderSpec = None
    mode: str = "fused"
    arch: str = "trihorn"
    regression_hidden: int = 128

    def __post_init__(self):
        if self.encoder is None:
            self.encoder = EncoderSpec()
        if self.mode not in MODES:
            raise ValueError(f"unknown ablation mode {self.mode!r}; expected one of {MODES}")
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

class Module:
    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: stored shape {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


class Conv(Module):
    def __init__(self, rng, cin, cout, k=3, stride=1, dtype=np.float32):
        self.weight = _uniform(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, rng, fin, fout, dtype=np.float32):
        self.weight = _uniform(rng, (fout, fin), fin, dtype)
        self.bias = Tensor(np.zeros(fout, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

class _HourglassLevel(Module):
    def __init__(self, rng, ch, depth, dtype):
        self.skip = Conv(rng, ch, ch, dtype=dtype)
        self.down = Conv(rng, ch, ch, dtype=dtype)
        self.inner = _HourglassLevel(rng, ch, depth - 1, dtype) if depth > 1 else Conv(rng, ch, ch, dtype=dtype)
        self.up = Conv(rng, ch, ch, dtype=dtype)

    def __call__(self, x):
        skip = T.relu(self.skip(x))
        low = T.relu(self.down(T.maxpool2(x)))
        low = self.inner(low)
        if isinstance(self.inner, Conv):
            low = T.relu(low)
        low = T.relu(self.up(low))
        return T.add(skip, T.upsample_nearest2(low))


class HourglassEncoder(Module):
    """Single-stack hourglass producing a half-resolution feature volume."""

    def __init__(self, rng, spec: EncoderSpec, dtype=np.float32):
        b = spec.base_channels
        self.stem = Conv(rng, 1, b, stride=2, dtype=dtype)
        self.hourglass = _HourglassLevel(rng, b, spec.levels, dtype)
        self.out = Conv(rng, b, spec.out_channels, k=1, dtype=dtype)
        self.levels = spec.levels

    def __call__(self, x):
        x = T.relu(self.stem(x))
        x = self.hourglass(x)
        return T.relu(self.out(x))


class DownsampleDeconvEncoder(Module):
    """Three stride-2 convolutions, then two upsample+conv stages."""

    def __init__(self, rng, spec: EncoderSpec, dtype=np.float32):
        b = spec.base_channels
        self.down1 = Conv(rng, 1, b, stride=2, dtype=dtype)
        self.down2 = Conv(rng, b, 2 * b, stride=2, dtype=dtype)
        self.down3 = Conv(rng, 2 * b, 4 * b, stride=2, dtype=dtype)
        self.up1 = Conv(rng, 4 * b, 2 * b, dtype=dtype)
        self.up2 = Conv(rng, 2 * b, spec.out_channels, dtype=dtype)
        self.levels = 2

    def __call__(self, x):
        x = T.relu(self.down1(x))
        x = T.relu(self.down2(x))
        x = T.relu(self.down3(x))
        x = T.relu(self.up1(T.upsample_nearest2(x)))
        return T.relu(self.up2(T.upsample_nearest2(x)))


def build_encoder(rng, spec: EncoderSpec, dtype=np.float32):
    if spec.variant == "hourglass":
        return HourglassEncoder(rng, spec, dtype)
    return DownsampleDeconvEncoder(rng, spec, dtype)


class Branch(Module):
    """Two 3x3 conv+relu layers and a 1x1 projection."""

    def __init__(self, rng, cin, width, cout, dtype=np.float32):
        self.conv1 = Conv(rng, cin, width, dtype=dtype)
        self.conv2 = Conv(rng, width, width, dtype=dtype)
        self.proj = Conv(rng, width, cout, k=1, dtype=dtype)

    def __call__(self, x):
        return self.proj(T.relu(self.conv2(T.relu(self.conv1(x)))))


# ---------------------------------------------------------------------------
# closed-form building blocks
# ---------------------------------------------------------------------------

def integrate_uv(heatmaps: Tensor, tol: float = 1e-4) -> Tensor:
    """Expected (u, v) = (column, row) index under each normalized heatmap."""
    sums = heatmaps.data.reshape(heatmaps.shape[:-2] + (-1,)).sum(axis=-1)
    if np.any(np.abs(sums - 1) > tol) or np.any(heatmaps.data < 0):
        raise ValueError("integrate_uv expects non-negative maps that sum to 1")
    return T.spatial_expectation(heatmaps)


def loss_uv(pred: Tensor, gt) -> Tensor:
    """Mean L1 distance over u and v of every joint (and batch item)."""
    gt = T.as_tensor(np.asarray(gt, dtype=pred.dtype))
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise T.ShapeError(f"loss_uv: pred {pred.shape} vs gt {gt.shape}")
    return T.mean(T.abs_(T.sub(pred, gt)))


def loss_depth(pred: Tensor, gt) -> Tensor:
    gt = T.as_tensor(np.asarray(gt, dtype=pred.dtype))
    if pred.shape != gt.shape:
        raise T.ShapeError(f"loss_depth: pred {pred.shape} vs gt {gt.shape}")
    return T.mean(T.abs_(T.sub(pred, gt)))


def total_loss(l_uv: Tensor, l_d: Tensor, lam: float = 1.0) -> Tensor:
    return T.add(l_uv, T.mul_scalar(l_d, lam))


def fuse_attention(att_uv: Tensor, att_enh: Tensor, beta: Tensor) -> Tensor:
    return T.spatial_softmax(T.lerp_channels(att_uv, att_enh, beta))


def pool_depth_features(att_fused: Tensor, dmap: Tensor) -> Tensor:
    return T.attention_pool(att_fused, dmap)


def estimate_depth(features: Tensor, head: Linear) -> Tensor:
    """One shared linear head applied to every joint's pooled feature."""
    z = head(features)
    return T.reshape(z, z.shape[:-1])


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class TriHornNet(Module):
    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.spec = spec
        J, D = spec.n_joints, spec.depth_features
        c, w = spec.encoder.out_channels, spec.head_channels
        self.encoder = build_encoder(rng, spec.encoder, dtype)
        self.uv_head = Branch(rng, c, w, J, dtype)
        if spec.mode != "uv_only":
            self.enh_head = Branch(rng, c, w, J, dtype)
        self.depth_branch = Branch(rng, c, w, D, dtype)
        if spec.mode == "fused":
            self.beta_raw = Tensor(np.zeros(J, dtype=dtype), requires_grad=True)
        if spec.mode == "fuse_concat":
            self.fuse_conv1 = Conv(rng, 2 * J, w, dtype=dtype)
            self.fuse_conv2 = Conv(rng, w, J, k=1, dtype=dtype)
        self.depth_head = Linear(rng, D, 1, dtype)
        # final projections start with zero bias already; zero the depth head bias too
        self.depth_head.bias.data[...] = 0

    @property
    def dtype(self):
        return self.depth_head.weight.dtype

    def beta(self) -> Tensor:
        return T.sigmoid(self.beta_raw)

    def pooling_weights(self, att_uv: Tensor, att_enh: Tensor | None) -> Tensor:
        mode = self.spec.mode
        if mode == "uv_only":
            return T.spatial_softmax(att_uv)
        if mode == "enh_only":
            return T.spatial_softmax(att_enh)
        if mode == "fuse_sum":
            return T.spatial_softmax(T.add(att_uv, att_enh))
        if mode == "fuse_concat":
            h = T.relu(self.fuse_conv1(T.concat_channels([att_uv, att_enh])))
            return T.spatial_softmax(self.fuse_conv2(h))
        return fuse_attention(att_uv, att_enh, self.beta())

    def __call__(self, images) -> dict:
        """Run the network on [N,1,H,W] (or [1,H,W]) normalized crops.

        Returns a dict with ``uv_grid`` (feature-grid coordinates), ``uv``
        (crop pixels), ``z`` (normalized depth), ``pose`` arrays and the
        attention tensors.
        """
        x = T.as_tensor(images)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad) if x._node is None else x
        _check_input(x, 2 ** (self.encoder.levels + 1))
        feats = self.encoder(x)
        att_uv = self.uv_head(feats)
        att_enh = self.enh_head(feats) if self.spec.mode != "uv_only" else None
        heatmaps = T.spatial_softmax(att_uv)
        uv_grid = T.spatial_expectation(heatmaps)
        weights = self.pooling_weights(att_uv, att_enh)
        dmap = self.depth_branch(feats)
        z = estimate_depth(pool_depth_features(weights, dmap), self.depth_head)
        out = {
            "uv_grid": uv_grid, "z": z, "heatmaps": heatmaps, "att_uv": att_uv,
            "att_enh": att_enh, "att_fused": weights, "features": feats,
        }
        _finish(out)
        return out


class RegressionBaseline(Module):
    """Encoder, global average pooling and two fully connected layers."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.spec = spec
        c = spec.encoder.out_channels
        self.encoder = build_encoder(rng, spec.encoder, dtype)
        self.fc1 = Linear(rng, c, spec.regression_hidden, dtype)
        self.fc2 = Linear(rng, spec.regression_hidden, 3 * spec.n_joints, dtype)

    @property
    def dtype(self):
        return self.fc2.weight.dtype

    def __call__(self, images) -> dict:
        x = T.as_tensor(images)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        _check_input(x, 2 ** (self.encoder.levels + 1))
        feats = self.encoder(x)
        h = T.relu(self.fc1(T.global_avg_pool(feats)))
        o = self.fc2(h)
        o = T.reshape(o, o.shape[:-1] + (self.spec.n_joints, 3))
        grid = feats.shape[-1]
        uv_grid = T.add_scalar(T.mul_scalar(o[..., 0:2], grid / 2), (grid - 1) / 2)
        out = {"uv_grid": uv_grid, "z": o[..., 2], "features": feats}
        _finish(out)
        return out


def _check_input(x: Tensor, multiple: int):
    if x.ndim == 3:
        return
    if x.ndim != 4 or x.shape[1] != 1:
        raise T.ShapeError(f"expected [N,1,H,W] or [1,H,W] input, got {x.shape}")
    H, W = x.shape[-2:]
    if H != W or H % multiple:
        raise T.ShapeError(f"input must be square with size divisible by {multiple}, got {H}x{W}")


def _finish(out: dict):
    uv = out["uv_grid"].data * 2
    z = out["z"].data
    if not (np.all(np.isfinite(uv)) and np.all(np.isfinite(z))):
        bad = [k for k, v in out.items() if v is not None and not np.all(np.isfinite(v.data))]
        raise FloatingPointError(f"non-finite network outputs in: {bad}")
    out["uv"] = uv
    out["pose"] = np.concatenate([uv, z[..., None]], axis=-1)


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32):
    cls = TriHornNet if spec.arch == "trihorn" else RegressionBaseline
    return cls(spec, seed=seed, dtype=dtype)


def compute_losses(model, images, gt_uvd, lam: float = 1.0) -> tuple[dict, dict]:
    """Forward pass plus the three loss terms.

    ``gt_uvd`` holds crop-pixel UV and normalized depth; UV targets are halved
    onto the feature grid before the L1 loss.
    """
    out = model(images)
    gt = np.asarray(gt_uvd, dtype=model.dtype)
    l_uv = loss_uv(out["uv_grid"], gt[..., :2] / 2)
    l_d = loss_depth(out["z"], gt[..., 2])
    loss = total_loss(l_uv, l_d, lam)
    return out, {"loss": loss, "l_uv": l_uv, "l_d": l_d}
