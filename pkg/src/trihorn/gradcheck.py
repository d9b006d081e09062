"""Finite-difference verification of every differentiable operator and of
whole networks (64-bit)."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import preset_config
from .model import build_model, compute_losses
from .tensor import Tensor

TOLERANCE = 1e-4


def _weighted(y: Tensor, rng) -> Tensor:
    # a random linear functional so that every output coordinate matters
    w = Tensor(rng.standard_normal(y.shape))
    return T.sum_(T.mul(y, w))


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _op_cases(rng):
    """(name, closure over parameters, parameters) for every operator."""
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    yield "add", lambda: _weighted(T.add(a, b), rng_fixed(1)), [a, b]
    yield "sub", lambda: _weighted(T.sub(a, b), rng_fixed(2)), [a, b]
    yield "mul", lambda: _weighted(T.mul(a, b), rng_fixed(3)), [a, b]
    yield "mul_scalar", lambda: _weighted(T.mul_scalar(a, -1.7), rng_fixed(4)), [a]
    yield "add_scalar", lambda: _weighted(T.add_scalar(a, 0.3), rng_fixed(5)), [a]
    yield "relu", lambda: _weighted(T.relu(a), rng_fixed(6)), [a]
    yield "abs", lambda: _weighted(T.abs_(a), rng_fixed(7)), [a]
    yield "sigmoid", lambda: _weighted(T.sigmoid(a), rng_fixed(8)), [a]
    yield "sum", lambda: T.mul(T.sum_(a), T.sum_(a)), [a]
    yield "mean", lambda: T.mul(T.mean(a), T.mean(a)), [a]
    yield "reshape", lambda: _weighted(T.reshape(a, (2, 6)), rng_fixed(9)), [a]
    yield "index", lambda: _weighted(T.index(a, (slice(1, 3), slice(None, None, 2))), rng_fixed(10)), [a]
    yield "concat", lambda: _weighted(T.concat([a, b], axis=1), rng_fixed(11)), [a, b]
    s1, s2 = _param(rng, 2, 3, 4), _param(rng, 2, 3, 4)
    yield "batch_stack", lambda: _weighted(T.batch_stack([s1, s2]), rng_fixed(12)), [s1, s2]
    x, w, bias = _param(rng, 5, 4), _param(rng, 3, 4), _param(rng, 3)
    yield "linear", lambda: _weighted(T.linear(x, w, bias), rng_fixed(13)), [x, w, bias]
    img, k3, cb = _param(rng, 2, 3, 6, 6), _param(rng, 4, 3, 3, 3, scale=0.5), _param(rng, 4)
    yield "conv2d", lambda: _weighted(T.conv2d(img, k3, cb, 1, 1), rng_fixed(14)), [img, k3, cb]
    yield "conv2d_stride2", lambda: _weighted(T.conv2d(img, k3, cb, 2, 1), rng_fixed(15)), [img, k3, cb]
    k1 = _param(rng, 2, 3, 1, 1)
    yield "conv2d_1x1", lambda: _weighted(T.conv2d(img, k1, None), rng_fixed(16)), [img, k1]
    single = _param(rng, 3, 6, 6)
    yield "conv2d_single", lambda: _weighted(T.conv2d(single, k3, cb, 1, 1), rng_fixed(17)), [single, k3, cb]
    yield "maxpool2", lambda: _weighted(T.maxpool2(img), rng_fixed(18)), [img]
    m = _param(rng, 2, 3, 3)
    yield "upsample_nearest2", lambda: _weighted(T.upsample_nearest2(m), rng_fixed(19)), [m]
    yield "global_avg_pool", lambda: _weighted(T.global_avg_pool(img), rng_fixed(20)), [img]
    att = _param(rng, 2, 3, 4, 5)
    yield "spatial_softmax", lambda: _weighted(T.spatial_softmax(att), rng_fixed(21)), [att]
    p, q, beta = _param(rng, 3, 4, 4), _param(rng, 3, 4, 4), Tensor(rng.uniform(0.1, 0.9, 3), requires_grad=True)
    yield "lerp_channels", lambda: _weighted(T.lerp_channels(p, q, beta), rng_fixed(22)), [p, q, beta]
    pa, pf = _param(rng, 2, 3, 4, 4), _param(rng, 2, 5, 4, 4)
    yield "attention_pool", lambda: _weighted(T.attention_pool(pa, pf), rng_fixed(23)), [pa, pf]
    yield "spatial_expectation", lambda: _weighted(T.spatial_expectation(pa), rng_fixed(24)), [pa]


def rng_fixed(k: int):
    return np.random.default_rng(1000 + k)


@dataclass
class GradcheckReport:
    per_op: dict = field(default_factory=dict)     # name -> worst relative error
    network: float = 0.0
    network_checked: int = 0
    network_excluded: int = 0
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def worst(self) -> float:
        return max([self.network, *self.per_op.values()])

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst < self.tolerance)

    def lines(self):
        for name, err in self.per_op.items():
            yield f"{name:24s} {err:.3e} {'ok' if err < self.tolerance else 'FAIL'}"
        yield (f"{'network':24s} {self.network:.3e} {'ok' if self.network < self.tolerance else 'FAIL'}"
               f" ({self.network_checked} coords, {self.network_excluded} at kinks)")
        yield (f"max relative error {self.worst:.3e} (tolerance {self.tolerance:g}): "
               f"{'PASS' if self.passed else 'FAIL'}")


def check_operators(seed: int = 0, step: float = 1e-5) -> dict:
    rng = np.random.default_rng(seed)
    out = {}
    for name, fn, params in _op_cases(rng):
        worst, _, _ = T.grad_check_params(fn, params, step)
        out[name] = worst
    return out


SIZES = {
    "toy": dict(preset="toy", frames=2, max_coords=None),
    "small": dict(preset="toy", frames=2, max_coords=24,
                  overrides=dict(n_joints=3, out_size=32, base_channels=6, out_channels=6,
                                 head_channels=6, depth_features=12)),
}


def network_case(size: str = "toy", seed: int = 0):
    """A 64-bit model, input batch and labels for the whole-network check."""
    conf = SIZES[size]
    cfg = preset_config(conf["preset"], dtype="float64", seed=seed, **conf.get("overrides", {}))
    model = build_model(cfg.model_spec(), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    n, s, J = conf["frames"], cfg.out_size, cfg.n_joints
    images = Tensor(rng.uniform(-1, 1, (n, 1, s, s)), requires_grad=True)
    labels = np.concatenate([rng.uniform(0, s - 1, (n, J, 2)), rng.uniform(-1, 1, (n, J, 1))], axis=-1)
    return model, images, labels, cfg


def check_network(size: str = "toy", seed: int = 0, step: float = 1e-5):
    model, images, labels, cfg = network_case(size, seed)

    def loss():
        return compute_losses(model, images, labels, cfg.lam)[1]["loss"]

    return T.grad_check_params(loss, model.parameters() + [images], step,
                               max_coords=SIZES[size]["max_coords"], seed=seed)


def run_gradcheck(size: str = "toy", seed: int = 0, step: float = 1e-5,
                  tolerance: float = TOLERANCE) -> GradcheckReport:
    if size not in SIZES:
        raise ValueError(f"unknown gradcheck size {size!r}; expected one of {sorted(SIZES)}")
    t0 = time.perf_counter()
    rep = GradcheckReport(tolerance=tolerance)
    rep.per_op = check_operators(seed, step)
    rep.network, rep.network_excluded, rep.network_checked = check_network(size, seed, step)
    rep.seconds = time.perf_counter() - t0
    return rep
