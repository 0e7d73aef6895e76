"""Small reverse-mode autodiff engine for rank-3 image tensors.

Only the layers needed by the skip network are provided: reflection-padded
convolution (stride 1 or 2), LeakyReLU, 2x bilinear upsampling, channel
concatenation, plus the elementwise arithmetic used by the losses. All data is
stored and accumulated in float64.
"""

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError

__all__ = [
    "Tensor",
    "as_tensor",
    "conv2d",
    "leaky_relu",
    "channel_norm",
    "upsample_bilinear2x",
    "concat_channels",
    "AdamState",
    "adam_step",
    "Adam",
    "no_grad",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array that records the operations producing it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    # elementwise arithmetic -------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        return _make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        return _make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), -_unbroadcast(g, other.shape)),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return _make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)),
        )

    __rmul__ = __mul__

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,))

    def __getitem__(self, index):
        out = self.data[index]

        def backward(g):
            full = np.zeros_like(self.data)
            full[index] += g
            return (full,)

        return _make(np.array(out), (self,), backward)

    def abs(self):
        s = np.sign(self.data)
        return _make(np.abs(self.data), (self,), lambda g: (g * s,))

    def square(self):
        a = self.data
        return _make(a * a, (self,), lambda g: (2.0 * a * g,))

    def sum(self):
        shape = self.shape
        return _make(
            np.array(self.data.sum()), (self,), lambda g: (np.broadcast_to(g, shape).copy(),)
        )

    # graph traversal ----------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tracked leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# convolution --------------------------------------------------------------


def _fold_reflect(g, pad, axis):
    # adjoint of np.pad(mode="reflect") along one axis
    n = g.shape[axis] - 2 * pad
    core = np.take(g, np.arange(pad, pad + n), axis=axis)
    for m in range(1, pad + 1):
        idx = [slice(None)] * g.ndim
        idx[axis] = m
        src = [slice(None)] * g.ndim
        src[axis] = pad - m
        core[tuple(idx)] += g[tuple(src)]
        idx[axis] = n - 1 - m
        src[axis] = pad + n - 1 + m
        core[tuple(idx)] += g[tuple(src)]
    return core


def conv2d(x, weight, bias=None, stride=1):
    """Cross-correlate ``x[C,H,W]`` with ``weight[O,C,k,k]`` using reflection padding.

    Padding is ``(k - 1) // 2`` on every side so a stride-1 convolution keeps
    the spatial size and stride 2 halves it.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects x[C,H,W] and w[O,C,k,k], got {x.shape}, {weight.shape}")
    C, H, W = x.shape
    O, Cw, k, kw = weight.shape
    if Cw != C or k != kw or k % 2 == 0:
        raise ShapeError(f"kernel {weight.shape} incompatible with input {x.shape}")
    if H < k or W < k:
        raise ShapeError(f"input {H}x{W} smaller than kernel {k}x{k}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if stride == 2 and (H % 2 or W % 2):
        raise ShapeError(f"stride 2 needs even spatial dims, got {H}x{W}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeError(f"bias shape {bias.shape} != ({O},)")

    p = (k - 1) // 2
    Ho, Wo = H // stride, W // stride
    if k == 1 and stride == 1:
        cols = x.data.reshape(C, H * W)
    else:
        xp = np.pad(x.data, ((0, 0), (p, p), (p, p)), mode="reflect") if p else x.data
        cols = np.empty((C, k, k, Ho, Wo))
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
        cols = cols.reshape(C * k * k, Ho * Wo)
    wmat = weight.data.reshape(O, C * k * k)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(O, Ho, Wo)

    def backward(g):
        g2 = g.reshape(O, Ho * Wo)
        dw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        db = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = wmat.T @ g2
            if k == 1 and stride == 1:
                dx = dcols.reshape(C, H, W)
            else:
                dcols = dcols.reshape(C, k, k, Ho, Wo)
                dxp = np.zeros((C, H + 2 * p, W + 2 * p))
                for i in range(k):
                    for j in range(k):
                        dxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, i, j]
                dx = _fold_reflect(_fold_reflect(dxp, p, 1), p, 2) if p else dxp
        return (dx, dw, db)

    parents = (x, weight, bias if bias is not None else Tensor(np.zeros(O)))
    return _make(out, parents, backward)


# activations and resampling -------------------------------------------------


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    pos = x.data >= 0
    scale = np.where(pos, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def channel_norm(x, gamma, beta, eps=1e-5):
    """Normalize each channel of ``x[C,H,W]`` over its pixels, then scale and shift.

    This is batch normalization for a batch of one image, always using the
    statistics of the current input (no running averages).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 3 or gamma.shape != (x.shape[0],) or beta.shape != (x.shape[0],):
        raise ShapeError(f"channel_norm needs x[C,H,W] and per-channel gamma, beta; got {x.shape}, {gamma.shape}, {beta.shape}")
    n = x.shape[1] * x.shape[2]
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=(1, 2), keepdims=True) + eps)
    y = xc * inv
    g3 = gamma.data[:, None, None]

    def backward(g):
        dy = g * g3
        dx = inv / n * (n * dy - dy.sum(axis=(1, 2), keepdims=True) - y * (dy * y).sum(axis=(1, 2), keepdims=True))
        return dx, (g * y).sum(axis=(1, 2)), g.sum(axis=(1, 2))

    return _make(y * g3 + beta.data[:, None, None], (x, gamma, beta), backward)


def _up_axis(a, axis):
    n = a.shape[axis]
    shape = list(a.shape)
    shape[axis] = 2 * n
    out = np.empty(shape)
    a = np.moveaxis(a, axis, -1)
    view = np.moveaxis(out, axis, -1)
    even, odd = view[..., 0::2], view[..., 1::2]
    np.multiply(a, 0.75, out=even)
    even[..., 1:] += 0.25 * a[..., :-1]
    even[..., 0] += 0.25 * a[..., 0]
    np.multiply(a, 0.75, out=odd)
    odd[..., :-1] += 0.25 * a[..., 1:]
    odd[..., -1] += 0.25 * a[..., -1]
    return out


def _up_axis_adjoint(g, axis):
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (ge + go)
    # even[i] draws 0.25 from a[i-1] (a[0] at the border), odd[i] from a[i+1]
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 0] += 0.25 * ge[..., 0]
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return np.ascontiguousarray(np.moveaxis(out, -1, axis))


def upsample_bilinear2x(x):
    """Double H and W; output pixel o samples source coordinate (o + 0.5) / 2 - 0.5."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"upsample expects [C,H,W], got {x.shape}")
    out = _up_axis(_up_axis(x.data, 1), 2)
    return _make(out, (x,), lambda g: (_up_axis_adjoint(_up_axis_adjoint(g, 2), 1),))


def concat_channels(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"spatial shapes differ: {a.shape} vs {b.shape}")
    ca = a.shape[0]
    return _make(
        np.concatenate([a.data, b.data], axis=0),
        (a, b),
        lambda g: (g[:ca], g[ca:]),
    )


# optimisation -----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """Apply one bias-corrected Adam update in place; returns ``(params, state)``.

    ``params`` and ``grads`` are parallel lists of arrays. Missing gradients
    (``None``) are treated as zero.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("Adam state does not match the parameter list")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


class Adam:
    """Stateful wrapper around :func:`adam_step` for a list of Tensors."""

    def __init__(self, params, lr=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)
