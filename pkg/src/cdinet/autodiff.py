"""Minimal reverse-mode differentiation over numpy arrays.

Only the handful of ops the CDI-Net models need are provided. Every op
records its inputs and a closure computing the vector-Jacobian product; a
call to :meth:`Tensor.backward` walks the recorded graph once in reverse
topological order and then releases it.

Activations are 4-D ``[batch, channel, height, width]`` arrays; fully
connected layers act on ``[batch, features]``.
"""
from __future__ import annotations

import contextlib

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""

    def __init__(self, op, message, shapes=()):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        dims = ", ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: {message}" + (f" (got {dims})" if dims else ""))


class GraphError(RuntimeError):
    pass


def _check_finite(arr, where):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values at {where}")


class Tensor:
    """An array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op", "_released")

    def __init__(self, data, requires_grad=False, *, _parents=(), _vjp=None, op="leaf"):
        arr = np.asarray(data, dtype=DTYPE) if op == "leaf" else data
        if op == "leaf":
            _check_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp
        self.op = op
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self.op == "leaf"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item", "tensor is not scalar", [self.shape])
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tracked leaf.

        ``grad`` seeds the output gradient; it defaults to ones for a
        scalar output. The graph is freed afterwards, so a second call on
        the same output raises :class:`GraphError`.
        """
        if self._released:
            raise GraphError("graph already released by an earlier backward(); rebuild it with a new forward pass")
        if not self.requires_grad:
            raise GraphError("backward() called on a tensor that was not produced by a tracked forward pass")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward", "seed gradient required for non-scalar output", [self.shape])
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad, dtype=DTYPE)
            if seed.shape != self.shape:
                raise ShapeError("backward", "seed gradient shape differs from output", [seed.shape, self.shape])
            _check_finite(seed, "backward seed")

        order = _topological_order(self)
        grads = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if not node.is_leaf:
                node._vjp = None
                node._parents = ()
                node._released = True


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(data, parents, vjp, op):
    tracked = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(data, op=op)
    return Tensor(data, True, _parents=tuple(parents), _vjp=vjp, op=op)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, "operand shapes differ", [a.shape, b.shape])


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c):
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid(z):
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def total(x):
    """Sum of all elements, as a 0-d tensor."""
    x = as_tensor(x)
    shape = x.shape
    return _make(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x):
    x = as_tensor(x)
    shape, n = x.shape, x.data.size
    return _make(np.mean(x.data), (x,), lambda g: (np.full(shape, g / n),), "mean")


def l1_loss(pred, target):
    """Mean absolute error. The subgradient at zero difference is 0."""
    pred, target = as_tensor(pred), as_tensor(target)
    _same_shape("l1_loss", pred, target)
    diff = pred.data - target.data
    n = diff.size
    sgn = np.sign(diff)

    def vjp(g):
        gx = sgn * (g / n)
        return gx, -gx

    return _make(np.mean(np.abs(diff)), (pred, target), vjp, "l1_loss")


# -------------------------------------------------------------------- shaping

def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", "nothing to concatenate")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError("concat", f"non-concat dims differ along axis {axis}", [t.shape for t in tensors])
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    if len(tensors) == 1:
        return tensors[0]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def _require_4d(op, x):
    if x.data.ndim != 4:
        raise ShapeError(op, "expected a [batch, channel, height, width] tensor", [x.shape])


def avg_pool2(x):
    """2x2 average pooling with stride 2."""
    x = as_tensor(x)
    _require_4d("avg_pool2", x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2", "spatial dims must be even", [x.shape])
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
        return (up * 0.25,)

    return _make(out, (x,), vjp, "avg_pool2")


def upsample2(x):
    """Nearest-neighbour upsampling by 2 in both spatial dims."""
    x = as_tensor(x)
    _require_4d("upsample2", x)
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), vjp, "upsample2")


def global_avg_pool(x):
    """[B, C, H, W] -> [B, C] spatial mean."""
    x = as_tensor(x)
    _require_4d("global_avg_pool", x)
    b, c, h, w = x.shape

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), vjp, "global_avg_pool")


def scale_channels(x, a):
    """Multiply channel ``c`` of sample ``b`` by ``a[b, c]``."""
    x, a = as_tensor(x), as_tensor(a)
    _require_4d("scale_channels", x)
    if a.shape != x.shape[:2]:
        raise ShapeError("scale_channels", "channel weights must be [batch, channel]", [x.shape, a.shape])
    xd, ad = x.data, a.data

    def vjp(g):
        return g * ad[:, :, None, None], np.einsum("bchw,bchw->bc", g, xd)

    return _make(xd * ad[:, :, None, None], (x, a), vjp, "scale_channels")


# ------------------------------------------------------------------ learnable

def linear(x, w, b=None):
    """Fully connected layer: ``x @ w.T + b`` with x [B, in], w [out, in]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError("linear", "need x [B, in] and w [out, in]", [x.shape, w.shape])
    out = x.data @ w.data.T
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError("linear", "bias must be [out]", [b.shape, w.shape])
        out = out + b.data
        parents.append(b)
    xd, wd = x.data, w.data

    def vjp(g):
        grads = [g @ wd, g.T @ xd]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, vjp, "linear")


def _im2col(xp, k, h, w):
    # padded [B, C, H+k-1, W+k-1] -> [B, C*k*k, H*W], built from k*k slice copies
    bsz, c = xp.shape[:2]
    cols = np.empty((bsz, c, k, k, h, w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(bsz, c * k * k, h * w)


def _col2im(cols, c, k, h, w):
    # adjoint of _im2col followed by cropping the padding
    bsz, p = cols.shape[0], k // 2
    cols = cols.reshape(bsz, c, k, k, h, w)
    out = np.zeros((bsz, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + h, j:j + w] += cols[:, :, i, j]
    return out[:, :, p:p + h, p:p + w]


def conv2d(x, w, b=None):
    """Stride-1 'same' convolution (cross-correlation) with zero padding.

    x: [B, C, H, W]; w: [O, C, k, k] with odd k; b: [O].
    """
    x, w = as_tensor(x), as_tensor(w)
    _require_4d("conv2d", x)
    if w.data.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError("conv2d", "kernel must be [out, in, k, k] with odd k", [w.shape])
    if x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}", [x.shape, w.shape])
    bsz, c, h, wd = x.shape
    o, k = w.shape[0], w.shape[2]
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, k, h, wd) if k > 1 else x.data.reshape(bsz, c, h * wd)
    wmat = w.data.reshape(o, c * k * k)
    out = np.matmul(wmat, cols)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError("conv2d", "bias must be [out]", [b.shape, w.shape])
        out += b.data[:, None]
    parents = [x, w] + ([b] if b is not None else [])

    def vjp(g):
        g2 = g.reshape(bsz, o, h * wd)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        grads = [None, gw]
        if x.requires_grad:
            if k == 1:
                grads[0] = np.matmul(wmat.T, g2).reshape(x.shape)
            elif 2 * c <= o:
                grads[0] = _col2im(np.matmul(wmat.T, g2), c, k, h, wd)
            else:
                # full correlation with the flipped, channel-swapped kernel
                wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * k * k)
                gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p)))
                grads[0] = np.matmul(wflip, _im2col(gp, k, h, wd)).reshape(x.shape)
        if b is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return grads

    return _make(out.reshape(bsz, o, h, wd), parents, vjp, "conv2d")


def linear_map(x, forward, adjoint, name="linear_map"):
    """Apply a fixed linear operator with a known adjoint.

    ``forward`` and ``adjoint`` act on plain arrays; the backward pass is
    exactly ``adjoint(g)``.
    """
    x = as_tensor(x)
    out = np.asarray(forward(x.data), dtype=DTYPE)
    in_shape = x.shape

    def vjp(g):
        gx = np.asarray(adjoint(g), dtype=DTYPE)
        if gx.shape != in_shape:
            raise ShapeError(name, "adjoint returned wrong shape", [gx.shape, in_shape])
        return (gx,)

    return _make(out, (x,), vjp, name)


# -------------------------------------------------------------------- oracle

def finite_diff_grad(f, x, h=1e-5, indices=None):
    """Central-difference gradient of a scalar function ``f`` at ``x``.

    ``f`` maps a :class:`Tensor` (or array) to a scalar Tensor or float.
    ``indices`` restricts the estimate to selected flat coordinates; the
    others are left at zero.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)

    def evaluate(arr):
        val = f(Tensor(arr))
        val = val.data if isinstance(val, Tensor) else np.asarray(val)
        if val.size != 1:
            raise ShapeError("finite_diff_grad", "f must return a scalar", [val.shape])
        return float(val.reshape(()))

    coords = range(flat.size) if indices is None else indices
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(base)
        flat[i] = orig - h
        fm = evaluate(base)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(base.shape)


# ------------------------------------------------------------------- modules

class Module:
    """Base class giving recursive, deterministic parameter naming."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, k, rng):
        fan_in = in_ch * k * k
        self.weight = Tensor(rng.standard_normal((out_ch, in_ch, k, k)) * np.sqrt(2.0 / fan_in), True)
        self.bias = Tensor(np.zeros(out_ch), True)

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, in_f, out_f, rng):
        self.weight = Tensor(rng.standard_normal((out_f, in_f)) * np.sqrt(2.0 / in_f), True)
        self.bias = Tensor(np.zeros(out_f), True)

    def __call__(self, x):
        return linear(x, self.weight, self.bias)
