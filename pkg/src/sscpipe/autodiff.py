"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

A Tensor records the operation that produced it; calling ``backward()`` on a
scalar walks the recorded graph in reverse topological order. Graphs are
dynamic: every forward call builds a fresh tape, and recorded tensors are
never mutated in place. All values are checked for finiteness after every
primitive so NaN/Inf never propagate silently.
"""
from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class DimensionError(ValueError):
    """Raised on incompatible shapes."""


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        raise TypeError("expected raw array-like, got Tensor")
    return np.asarray(x, dtype=np.float64)


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense N-d float64 array, optionally tracked for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=""):
        self.data = _check_finite(np.asarray(data, dtype=np.float64), f"Tensor({name or 'init'})")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    # -- construction -----------------------------------------------------

    @staticmethod
    def _op(data, parents, backward, what):
        out = Tensor.__new__(Tensor)
        out.data = _check_finite(np.asarray(data, dtype=np.float64), what)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out.name = ""
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, grad={self.requires_grad})"

    # -- backward ---------------------------------------------------------

    def backward(self, seed=None):
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)

        order: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    _check_finite(pg, f"gradient of {parent.name or 'op'}")
                    if id(parent) in grads:
                        grads[id(parent)] = grads[id(parent)] + pg
                    else:
                        grads[id(parent)] = pg
            elif node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad = node.grad + g
    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Learnable leaf tensor with a persistent gradient buffer and a name."""

    __slots__ = ()

    def __init__(self, value, name: str):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return Tensor._op(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)))

    return Tensor._op(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return ((a, _unbroadcast(g / b.data, a.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))

    return Tensor._op(out, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

    return Tensor._op(out, (a, b), backward, "matmul")


def exp(x) -> Tensor:
    x = _wrap(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def backward(g):
        return ((x, g * out),)

    return Tensor._op(out, (x,), backward, "exp")


def log(x) -> Tensor:
    x = _wrap(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def backward(g):
        return ((x, g / x.data),)

    return Tensor._op(out, (x,), backward, "log")


def powf(x, p: float) -> Tensor:
    x = _wrap(x)
    out = np.power(x.data, p)

    def backward(g):
        return ((x, g * p * np.power(x.data, p - 1.0)),)

    return Tensor._op(out, (x,), backward, "powf")


def relu(x) -> Tensor:
    x = _wrap(x)
    out = np.maximum(x.data, 0.0)

    def backward(g):
        return ((x, g * (x.data > 0.0)),)

    return Tensor._op(out, (x,), backward, "relu")


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    out = 1.0 / (1.0 + np.exp(-np.abs(x.data)))
    out = np.where(x.data >= 0.0, out, 1.0 - out)

    def backward(g):
        return ((x, g * out * (1.0 - out)),)

    return Tensor._op(out, (x,), backward, "sigmoid")


def tanh(x) -> Tensor:
    x = _wrap(x)
    out = np.tanh(x.data)

    def backward(g):
        return ((x, g * (1.0 - out * out)),)

    return Tensor._op(out, (x,), backward, "tanh")


def tsum(x, axes=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    if axes is not None and not isinstance(axes, tuple):
        axes = (axes,)
    _validate_axes(x, axes)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return ((x, np.broadcast_to(g, x.shape).copy()),)

    return Tensor._op(out, (x,), backward, "sum")


def _validate_axes(x, axes):
    if axes is None:
        return
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise DimensionError(f"axis {ax} not present in shape {x.shape}")


def mean(x, axes=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    if axes is not None and not isinstance(axes, tuple):
        axes = (axes,)
    _validate_axes(x, axes)
    if axes is None:
        n = x.size
    else:
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axes, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    out = x.data.reshape(shape)

    def backward(g):
        return ((x, g.reshape(x.shape)),)

    return Tensor._op(out, (x,), backward, "reshape")


def transpose(x, axes) -> Tensor:
    x = _wrap(x)
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        return ((x, np.transpose(g, inv)),)

    return Tensor._op(out, (x,), backward, "transpose")


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(zip(tensors, parts))

    return Tensor._op(out, tuple(tensors), backward, "concat")


def gather_rows(x, idx) -> Tensor:
    """Select rows of a 2-D tensor; gradient scatter-adds back."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return ((x, gx),)

    return Tensor._op(out, (x,), backward, "gather_rows")


def scatter_add_rows(values, idx, num_rows: int) -> Tensor:
    """Sum rows of `values` [N, C] into a zero [num_rows, C] tensor at `idx`."""
    values = _wrap(values)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((num_rows,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, idx, values.data)

    def backward(g):
        return ((values, g[idx]),)

    return Tensor._op(out, (values,), backward, "scatter_add_rows")


def softmax(x, axis: int) -> Tensor:
    """Shift-invariant softmax along `axis`."""
    x = _wrap(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((x, out * (g - dot)),)

    return Tensor._op(out, (x,), backward, "softmax")


def pow_base(beta, exponent) -> Tensor:
    """beta ** exponent with a scalar-ish base clamped into (0, 1).

    The clamp to [1e-4, 1 - 1e-4] keeps log(beta) finite; gradients are zero
    outside the clamp window.
    """
    beta = _wrap(beta)
    exponent = _wrap(exponent)
    lo, hi = 1e-4, 1.0 - 1e-4
    clipped = np.clip(beta.data, lo, hi)
    logb = np.log(clipped)
    out = np.exp(exponent.data * logb)

    def backward(g):
        active = (beta.data > lo) & (beta.data < hi)
        gb = g * out * exponent.data / clipped * active
        ge = g * out * logb
        return ((beta, _unbroadcast(gb, beta.shape)),
                (exponent, _unbroadcast(ge, exponent.shape)))

    return Tensor._op(out, (beta, exponent), backward, "pow_base")


def layernorm(x, normalized_axis: int, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along one axis, then affine."""
    x = _wrap(x)
    axis = normalized_axis % x.ndim
    gain, bias = _wrap(gain), _wrap(bias)
    n = x.shape[axis]
    if gain.size != n or bias.size != n:
        raise DimensionError(f"layernorm gain/bias size must be {n}")
    bshape = [1] * x.ndim
    bshape[axis] = n
    mu = mean(x, axes=axis, keepdims=True)
    centered = x - mu
    var = mean(mul(centered, centered), axes=axis, keepdims=True)
    inv = powf(var + eps, -0.5)
    xhat = mul(centered, inv)
    return mul(xhat, reshape(gain, bshape)) + reshape(bias, bshape)


def conv3d(x, w, bias) -> Tensor:
    """3-D convolution with 'same' zero padding.

    x: [C, X, Y, Z], w: [C_out, C, k, k, k] with odd k, bias: [C_out].
    """
    x, w, bias = _wrap(x), _wrap(w), _wrap(bias)
    if x.ndim != 4 or w.ndim != 5:
        raise DimensionError(f"conv3d expects x rank 4 and w rank 5, got {x.shape}, {w.shape}")
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise DimensionError(f"conv3d kernel must be cubic with odd extent, got {w.shape[2:]}")
    if ci != x.shape[0]:
        raise DimensionError(f"conv3d channels differ: x has {x.shape[0]}, w expects {ci}")
    if bias.shape != (co,):
        raise DimensionError(f"conv3d bias must have shape ({co},), got {bias.shape}")
    p = (k - 1) // 2

    def _windows(arr):
        padded = np.pad(arr, ((0, 0), (p, p), (p, p), (p, p)))
        return np.lib.stride_tricks.sliding_window_view(padded, (k, k, k), axis=(1, 2, 3))

    win = _windows(x.data)  # [C, X, Y, Z, k, k, k]
    out = np.einsum("cxyzijk,ocijk->oxyz", win, w.data, optimize=True)
    out = out + bias.data[:, None, None, None]

    def backward(g):
        gw = np.einsum("cxyzijk,oxyz->ocijk", win, g, optimize=True)
        gb = g.sum(axis=(1, 2, 3))
        gwin = _windows(g)  # [C_out, X, Y, Z, k, k, k]
        wflip = w.data[:, :, ::-1, ::-1, ::-1]
        gx = np.einsum("oxyzijk,ocijk->cxyz", gwin, wflip, optimize=True)
        return ((x, gx), (w, gw), (bias, gb))

    return Tensor._op(out, (x, w, bias), backward, "conv3d")


def trilinear_sample(volume, coords) -> Tensor:
    """Sample a [C, A, B, E] volume at continuous [N, 3] lattice coordinates.

    Coordinates are clamped to the border; differentiable in both arguments
    (coordinate gradients vanish in fully clamped directions).
    """
    volume, coords = _wrap(volume), _wrap(coords)
    if volume.ndim != 4 or coords.ndim != 2 or coords.shape[1] != 3:
        raise DimensionError(f"trilinear_sample expects [C,A,B,E] and [N,3], got {volume.shape}, {coords.shape}")
    c_dim = volume.shape[0]
    dims = np.array(volume.shape[1:], dtype=np.float64)
    pts = np.clip(coords.data, 0.0, dims - 1.0)
    lo = np.minimum(np.floor(pts), dims - 2.0).astype(np.int64)
    lo = np.maximum(lo, 0)
    frac = pts - lo  # [N, 3] in [0, 1]

    corners = []
    weights = []
    dwdf = []  # d weight / d frac per axis
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix = lo[:, 0] + dx
                iy = lo[:, 1] + dy
                iz = lo[:, 2] + dz
                wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
                wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                corners.append((ix, iy, iz))
                weights.append(wx * wy * wz)
                sx = 1.0 if dx else -1.0
                sy = 1.0 if dy else -1.0
                sz = 1.0 if dz else -1.0
                dwdf.append((sx * wy * wz, wx * sy * wz, wx * wy * sz))

    vals = [volume.data[:, ix, iy, iz] for ix, iy, iz in corners]  # each [C, N]
    out = np.zeros((coords.shape[0], c_dim), dtype=np.float64)
    for wgt, val in zip(weights, vals):
        out += (val * wgt[None, :]).T

    # clamp mask: coordinate gradient is zero where the point was clamped
    active = ((coords.data > 0.0) & (coords.data < dims - 1.0)).astype(np.float64)

    def backward(g):
        gv = np.zeros_like(volume.data)
        gc = np.zeros_like(coords.data)
        gT = g.T  # [C, N]
        for (ix, iy, iz), wgt, val, dw in zip(corners, weights, vals, dwdf):
            np.add.at(gv, (slice(None), ix, iy, iz), gT * wgt[None, :])
            contrib = (gT * val).sum(axis=0)  # [N]
            for ax in range(3):
                gc[:, ax] += contrib * dw[ax]
        gc *= active
        return ((volume, gv), (coords, gc))

    return Tensor._op(out, (volume, coords), backward, "trilinear_sample")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def gradcheck(fn, inputs, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` maps the given tensors to a scalar Tensor. Relative error per element
    is |analytic - cd| / (|analytic| + |cd| + 1e-12).
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"gradcheck step {step} outside [1e-7, 1e-3]")
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    out = fn(*inputs)
    if out.size != 1:
        raise ValueError("gradcheck requires a scalar-valued function")
    out.backward()

    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn(*inputs).item()
            flat[i] = orig - step
            lo = fn(*inputs).item()
            flat[i] = orig
            num[i] = (hi - lo) / (2.0 * step)
        if not np.all(np.isfinite(num)):
            raise NonFiniteError(f"non-finite finite-difference value for input {t.name or '<unnamed>'}")
        a = analytic.reshape(-1)
        rel = np.abs(a - num) / (np.abs(a) + np.abs(num) + 1e-12)
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return worst


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {p.name!r}")
            p.data = p.data - self.lr * g


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {p.name!r}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            mhat = self.m[i] / (1.0 - b1 ** self.t)
            vhat = self.v[i] / (1.0 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
