"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op records a node on a global, monotonically numbered
tape. ``Tensor.backward`` collects the nodes reachable from the loss and
replays their backward rules in reverse recording order, so gradient
accumulation order (and therefore the floating point result) is fixed.

Shapes are aligned explicitly: binary ops require identical shapes, and the
only broadcast is scalar-times-tensor. Ops that work per image accept an
optional leading batch axis created with :func:`batch_stack`.
"""

from __future__ import annotations

import contextlib
import itertools
import weakref
from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


_tape_counter = itertools.count()
_grad_enabled = True
# Set by the gradient checker to record relu/maxpool branch decisions.
_kink_log: list | None = None


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class _Node:
    __slots__ = ("seq", "op", "inputs", "_output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.seq = next(_tape_counter)
        self.op = op
        self.inputs = inputs
        # weak, so a graph is freed by refcounting as soon as its loss is dropped
        self._output = weakref.ref(output)
        self.backward = backward

    @property
    def output(self):
        return self._output()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic sugar ----------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul_scalar(self, 1.0 / other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)

    # -- backward --------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable tensor
        with ``requires_grad``. Calling twice without resetting adds up."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq, reverse=True)

        grads = {id(self): np.ones_like(self.data)}
        for node in nodes:
            out = node.output
            g = grads.pop(id(out), None)
            if g is None:
                continue
            if out.requires_grad and out is not self:
                # gradient arrays are never mutated in place, so sharing is safe
                out.grad = g if out.grad is None else out.grad + g
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        _assign_leaf_grads(nodes, grads, self)


def _raise_item(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _assign_leaf_grads(nodes, grads, root):
    leaves = {}
    for node in nodes:
        for inp in node.inputs:
            if inp._node is None and inp.requires_grad:
                leaves[id(inp)] = inp
    if root.requires_grad:
        leaves[id(root)] = root
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            backward: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, tuple(inputs), out, backward)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _check_finite(x: Tensor, op: str):
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError(f"{op}: non-finite input")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("mul_scalar", a.data * a.dtype.type(s), (a,),
                   lambda g: (g * g.dtype.type(s),))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _record("add_scalar", a.data + a.dtype.type(s), (a,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(mask)
    return _record("relu", np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    if _kink_log is not None:
        _kink_log.append(sign)
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * sign,))


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def sum_(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _record("sum", np.asarray(x.data.sum(), dtype=dtype), (x,),
                   lambda g: (np.full(shape, g, dtype=dtype),))


def mean(x: Tensor) -> Tensor:
    return mul_scalar(sum_(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def index(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing."""
    shape, dtype = x.shape, x.dtype

    def back(g):
        out = np.zeros(shape, dtype=dtype)
        out[key] = g
        return (out,)

    return _record("index", np.ascontiguousarray(x.data[key]), (x,), back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors,
                   lambda g: tuple(np.split(g, sizes, axis=ax)))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis of [C,H,W] or [N,C,H,W] tensors."""
    return concat(tensors, axis=-3)


def batch_stack(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "batch_stack")
    n = len(tensors)
    return _record("batch_stack", np.stack([t.data for t in tensors]), tensors,
                   lambda g: tuple(g[i] for i in range(n)))


def batch_split(x: Tensor) -> list[Tensor]:
    return [index(x, i) for i in range(x.shape[0])]


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y[..., o] = sum_i x[..., i] * weight[o, i] + bias[o]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    if bias is not None:
        y = y + bias.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gb = g2.sum(axis=0) if bias is not None else None
        return (g @ wd, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("linear", y, inputs, back)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding over [C,H,W] or [N,C,H,W]."""
    single = x.ndim == 3
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    xd = x.data[None] if single else x.data
    N, C, H, W = xd.shape
    Cout, Cin, k, k2 = kernel.shape
    if Cin != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Cin}")
    if k != k2:
        raise ShapeError("conv2d: only square kernels are supported")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if k > H + 2 * padding or k > W + 2 * padding or Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: degenerate output for input {H}x{W}, k={k}, pad={padding}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs {Cout} output channels")

    # channels-last columns: rows are output pixels, columns (ki, kj, c)
    wt = np.ascontiguousarray(kernel.data.transpose(0, 2, 3, 1)).reshape(Cout, k * k * C)
    xh = np.ascontiguousarray(xd.transpose(0, 2, 3, 1))
    pointwise = k == 1 and stride == 1 and padding == 0
    cols = xh.reshape(N * H * W, C) if pointwise else kernels.im2col(xh, k, stride, padding)
    y = cols @ wt.T
    if bias is not None:
        y += bias.data
    y = np.ascontiguousarray(y.reshape(N, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    def back(g):
        gh = np.ascontiguousarray(g.reshape(N, Cout, Ho, Wo).transpose(0, 2, 3, 1)).reshape(-1, Cout)
        gw = (gh.T @ cols).reshape(Cout, k, k, C).transpose(0, 3, 1, 2)
        gcols = gh @ wt
        if pointwise:
            gx = gcols.reshape(N, H, W, C)
        else:
            gx = kernels.col2im(gcols, (N, H, W, C), k, stride, padding)
        gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        gb = gh.sum(axis=0) if bias is not None else None
        return (gx[0] if single else gx, np.ascontiguousarray(gw), gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("conv2d", y[0] if single else y, inputs, back)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over the last two axes (even extents)."""
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {H}x{W}")
    out, arg = kernels.maxpool2(x.data)
    if _kink_log is not None:
        _kink_log.append(arg)
    return _record("maxpool2", out, (x,), lambda g: (kernels.maxpool2_backward(g, arg),))


def upsample_nearest2(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def back(g):
        s = g.shape[:-2] + (g.shape[-2] // 2, 2, g.shape[-1] // 2, 2)
        return (g.reshape(s).sum(axis=(-3, -1)),)

    return _record("upsample_nearest2", out, (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the last two (spatial) axes."""
    H, W = x.shape[-2:]
    shape = x.shape

    def back(g):
        return (np.broadcast_to(g[..., None, None] / (H * W), shape).astype(g.dtype),)

    return _record("global_avg_pool", x.data.mean(axis=(-2, -1)), (x,), back)


def spatial_softmax(x: Tensor) -> Tensor:
    """Softmax jointly over the last two axes of each map."""
    _check_finite(x, "spatial_softmax")
    shape = x.shape
    flat = x.data.reshape(shape[:-2] + (-1,))
    e = np.exp(flat - flat.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        g = g.reshape(p.shape)
        return (((g - (g * p).sum(axis=-1, keepdims=True)) * p).reshape(shape),)

    return _record("spatial_softmax", p.reshape(shape), (x,), back)


def lerp_channels(a: Tensor, b: Tensor, beta: Tensor) -> Tensor:
    """Per-channel convex mix: beta[j]*a[..., j, :, :] + (1-beta[j])*b[..., j, :, :]."""
    _same_shape(a, b, "lerp_channels")
    J = a.shape[-3]
    if beta.shape != (J,):
        raise ShapeError(f"lerp_channels: beta {beta.shape} vs {J} channels")
    bt = beta.data[:, None, None]
    ad, bd = a.data, b.data

    def back(g):
        gbeta = (g * (ad - bd)).sum(axis=(-2, -1))
        gbeta = gbeta.reshape(-1, J).sum(axis=0)
        return (g * bt, g * (1 - bt), gbeta)

    return _record("lerp_channels", bt * ad + (1 - bt) * bd, (a, b, beta), back)


def attention_pool(att: Tensor, feat: Tensor) -> Tensor:
    """out[..., j, d] = sum_{y,x} att[..., j, y, x] * feat[..., d, y, x]."""
    if att.shape[:-3] != feat.shape[:-3] or att.shape[-2:] != feat.shape[-2:]:
        raise ShapeError(f"attention_pool: att {att.shape} vs features {feat.shape}")
    lead = att.shape[:-3]
    J, D = att.shape[-3], feat.shape[-3]
    A = att.data.reshape(lead + (J, -1))
    F = feat.data.reshape(lead + (D, -1))
    out = np.matmul(A, np.swapaxes(F, -1, -2))

    def back(g):
        ga = np.matmul(g, F).reshape(att.shape)
        gf = np.matmul(np.swapaxes(g, -1, -2), A).reshape(feat.shape)
        return (ga, gf)

    return _record("attention_pool", out, (att, feat), back)


def spatial_expectation(p: Tensor) -> Tensor:
    """Expected (x, y) pixel index under each map: [..., J, h, w] -> [..., J, 2].

    Coordinates are 0-based column (x) and row (y) indices.
    """
    h, w = p.shape[-2:]
    xs = np.arange(w, dtype=p.dtype)
    ys = np.arange(h, dtype=p.dtype)
    pd = p.data
    ex = (pd.sum(axis=-2) * xs).sum(axis=-1)
    ey = (pd.sum(axis=-1) * ys).sum(axis=-1)

    def back(g):
        gx = g[..., 0][..., None, None] * xs[None, :]
        gy = g[..., 1][..., None, None] * ys[:, None]
        return ((gx + gy).astype(pd.dtype, copy=False),)

    return _record("spatial_expectation", np.stack([ex, ey], axis=-1), (p,), back)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _eval_with_kinks(f, *args):
    global _kink_log
    _kink_log = []
    try:
        val = float(f(*args).data)
        log = _kink_log
    finally:
        _kink_log = None
    return val, log


def _same_branches(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5,
               return_excluded: bool = False):
    """Max relative error between autodiff and central differences.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    Coordinates where the +/- step changes a relu, abs or maxpool branch
    decision sit on a non-differentiable kink and are excluded.
    """
    x = Tensor(np.array(point.data, dtype=np.float64), requires_grad=True)
    errs, excluded = _compare(lambda: f(x), [x], step)
    return (errs, excluded) if return_excluded else errs


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                      step: float = 1e-5, max_coords: int | None = None, seed: int = 0):
    """grad_check over parameters that ``loss_fn`` closes over.

    Returns (max relative error, number of excluded kink coordinates, number
    of coordinates checked). ``max_coords`` subsamples coordinates per tensor.
    """
    return _compare(loss_fn, list(params), step, max_coords, seed, count=True)


def _compare(loss_fn, params, step, max_coords=None, seed=0, count=False):
    for p in params:
        p.grad = None
    loss, base = _eval_with_kinks(loss_fn)
    loss_t = loss_fn()
    loss_t.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    excluded = 0
    checked = 0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp, kp = _eval_with_kinks(loss_fn)
            flat[i] = orig - step
            fm, km = _eval_with_kinks(loss_fn)
            flat[i] = orig
            if not (_same_branches(base, kp) and _same_branches(base, km)):
                excluded += 1
                continue
            num = (fp - fm) / (2 * step)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
            checked += 1
    if count:
        return worst, excluded, checked
    return worst, excluded
