"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a float64 numpy array. Every differentiable op returns a
new tensor that remembers its parents and a closure computing the
vector-Jacobian product; :func:`backward` walks that graph in reverse
topological order and accumulates gradients into leaves.

Images are NHWC throughout; conv weights are ``(kh, kw, c_in, c_out)``.
"""
from __future__ import annotations

import contextlib
import io
import os
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
LN_EPS = 1e-6

_grad_enabled = True
_debug = bool(os.environ.get("DRVIT_DEBUG"))


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def set_debug(flag: bool) -> None:
    """Toggle non-finite input checks on every op."""
    global _debug
    _debug = bool(flag)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "retain", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.retain = False
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def retain_grad(self) -> "Tensor":
        self.retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def backward(self) -> None:
        backward(self)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _check_finite(op: str, tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{op}: non-finite input of shape {t.shape}")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable, op: str) -> Tensor:
    if _debug:
        _check_finite(op, parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.retain = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), vjp, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), vjp, "div")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(y, (a,), vjp, "gelu")


# -- linear algebra & shape ----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        y = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def vjp(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(y, (a, b), vjp, "matmul")

    try:
        y = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(y, (a, b), vjp, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(y, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)) from None
    ax = axis % y.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g):
        out = []
        for i in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(y, tensors, vjp, "concat")


def pad_last(a: Tensor, width: int) -> Tensor:
    """Append ``width`` zeros along the last axis."""
    if width < 0:
        raise ShapeError(f"pad_last: negative width {width} for shape {a.shape}")
    if width == 0:
        return a
    n = a.shape[-1]
    y = np.concatenate([a.data, np.zeros(a.shape[:-1] + (width,), dtype=DTYPE)], axis=-1)
    return _make(y, (a,), lambda g: (g[..., :n],), "pad")


def slice_(a: Tensor, idx) -> Tensor:
    y = a.data[idx]

    fancy = _has_array_index(idx)

    def vjp(g):
        out = np.zeros_like(a.data)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _make(np.array(y, dtype=DTYPE), (a,), vjp, "slice")


def _has_array_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(y, dtype=DTYPE), (a,), vjp, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def embedding(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table`` (K, d) at integer ``indices`` of any shape."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ShapeError(f"embedding: indices must be integers, got {idx.dtype}")
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table {table.shape}")

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make(table.data[idx], (table,), vjp, "embedding")


def stop_gradient(a: Tensor) -> Tensor:
    """Same value, no path back to ``a``."""
    out = Tensor(a.data)
    out.op = "stop_gradient"
    return out


def straight_through(z_e: Tensor, z_q) -> Tensor:
    """Forward value of ``z_q``; backward copies the incoming gradient to ``z_e``."""
    zq = z_q.data if isinstance(z_q, Tensor) else np.asarray(z_q, dtype=DTYPE)
    if zq.shape != z_e.shape:
        raise ShapeError(f"straight_through: incompatible shapes {z_e.shape} and {zq.shape}")
    return _make(zq.copy(), (z_e,), lambda g: (g,), "straight_through")


# -- normalisation & activations over the last axis ---------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), vjp, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), vjp, "log_softmax")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: input {a.shape} vs scale {gamma.shape} / shift {beta.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def vjp(g):
        gg = gb = gx = None
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gb = g.sum(axis=lead)
        if a.requires_grad:
            gxhat = g * gamma.data
            gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(y, (a, gamma, beta), vjp, "layer_norm")


# -- convolution ----------------------------------------------------------------

def _resolve_padding(size: int, k: int, s: int, padding) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        out = -(-size // s)
        total = max((out - 1) * s + k - size, 0)
        return total // 2, total - total // 2
    if isinstance(padding, int):
        return padding, padding
    lo, hi = padding
    return int(lo), int(hi)


def _conv_out(size: int, k: int, s: int, pads: tuple[int, int]) -> int:
    return (size + pads[0] + pads[1] - k) // s + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B, H', W', C, kh, kw
    win = win[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, kh * kw * xp.shape[3])


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int, s: int,
            ho: int, wo: int) -> np.ndarray:
    b, hp, wp, c = shape
    cols = np.ascontiguousarray(cols.reshape(b, ho, wo, kh, kw, c).transpose(3, 4, 0, 1, 2, 5))
    out = np.zeros(shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += cols[i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding="same") -> Tensor:
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    bsz, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ph = _resolve_padding(h, kh, stride, padding)
    pw = _resolve_padding(wd, kw, stride, padding)
    ho, wo = _conv_out(h, kh, stride, ph), _conv_out(wd, kw, stride, pw)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    xp = np.pad(x.data, ((0, 0), ph, pw, (0, 0)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = w.data.reshape(-1, cout)
    y = (cols @ wm).reshape(bsz, ho, wo, cout)
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gx = gw = None
        if x.requires_grad and stride == 1:
            # full correlation with the flipped kernel avoids the col2im scatter
            wf = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, cin)
            gp = np.pad(g, ((0, 0), (kh - 1 - ph[0], kh - 1 - ph[1]),
                            (kw - 1 - pw[0], kw - 1 - pw[1]), (0, 0)))
            gx = (_im2col(gp, kh, kw, 1, h, wd) @ wf).reshape(x.shape)
        elif x.requires_grad:
            gxp = _col2im(g2 @ wm.T, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, ph[0] : ph[0] + h, pw[0] : pw[0] + wd, :]
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0) if b.requires_grad else None

    return _make(y, parents, vjp, "conv2d")


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding="same") -> Tensor:
    """Adjoint of :func:`conv2d`; ``w`` is ``(kh, kw, c_out, c_in)``.

    With ``padding="same"`` the output is ``stride`` times larger spatially.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[3]:
        raise ShapeError(f"conv2d_transpose: input {x.shape} incompatible with weight {w.shape}")
    bsz, h, wd, cin = x.shape
    kh, kw, cout, _ = w.shape
    if padding == "same":
        oh, ow = h * stride, wd * stride
    else:
        ph0 = _resolve_padding(0, kh, stride, padding)
        pw0 = _resolve_padding(0, kw, stride, padding)
        oh = (h - 1) * stride + kh - sum(ph0)
        ow = (wd - 1) * stride + kw - sum(pw0)
    ph = _resolve_padding(oh, kh, stride, padding)
    pw = _resolve_padding(ow, kw, stride, padding)
    if _conv_out(oh, kh, stride, ph) != h or _conv_out(ow, kw, stride, pw) != wd:
        raise ShapeError(f"conv2d_transpose: cannot invert input {x.shape} with weight {w.shape}")
    padded = (bsz, oh + ph[0] + ph[1], ow + pw[0] + pw[1], cout)
    wm = w.data.reshape(-1, cin)  # (kh*kw*cout, cin)
    x2 = x.data.reshape(-1, cin)
    yp = _col2im(x2 @ wm.T, padded, kh, kw, stride, h, wd)
    y = yp[:, ph[0] : ph[0] + oh, pw[0] : pw[0] + ow, :]
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gp = np.pad(g, ((0, 0), ph, pw, (0, 0)))
        cols = _im2col(gp, kh, kw, stride, h, wd)
        gx = (cols @ wm).reshape(x.shape) if x.requires_grad else None
        gw = (cols.T @ x2).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, cout).sum(axis=0) if b.requires_grad else None

    return _make(np.ascontiguousarray(y), parents, vjp, "conv2d_transpose")


# -- losses ---------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy; ``labels`` are class indices or per-class targets."""
    lab = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    logp = log_softmax(logits, axis=-1)
    if lab.ndim == logits.ndim:
        if lab.shape != logits.shape:
            raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {lab.shape}")
        return scale(sum_(mul(logp, Tensor(lab))), -1.0 / int(np.prod(lab.shape[:-1])))
    if lab.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {lab.shape}")
    onehot = np.zeros(logits.shape, dtype=DTYPE)
    np.put_along_axis(onehot, lab[..., None].astype(np.int64), 1.0, axis=-1)
    return scale(sum_(mul(logp, Tensor(onehot))), -1.0 / max(lab.size, 1))


def mse(a: Tensor, b) -> Tensor:
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: incompatible shapes {a.shape} and {b.shape}")
    d = sub(a, b)
    return mean(mul(d, d))


# -- backward pass ------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None or node.retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- numerical gradient check -------------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Inputs with ``requires_grad=False`` are skipped. The relative error of a
    coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
    backward(out)
    worst = 0.0
    with no_grad():
        for t in inputs:
            if not t.requires_grad:
                continue
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            an = analytic.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*inputs).data)
                flat[i] = orig - eps
                fm = float(f(*inputs).data)
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                if not np.isfinite(num):
                    raise NonFiniteError(f"grad_check: non-finite numeric gradient at index {i}")
                err = abs(an[i] - num) / max(1.0, abs(an[i]), abs(num))
                worst = max(worst, err)
    return worst


# -- serialization --------------------------------------------------------------------

TNSR_MAGIC = b"TNSR"


def write_tensor(fh, arr) -> None:
    """Write one array as ``TNSR | u32 rank | u64 dims | f64 payload`` (little-endian)."""
    a = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
    fh.write(TNSR_MAGIC)
    fh.write(struct.pack("<I", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    fh.write(np.ascontiguousarray(a).tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    start = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated {what} at offset {start}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh) -> np.ndarray:
    off = fh.tell()
    magic = _read_exact(fh, 4, "tensor magic")
    if magic != TNSR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r} at offset {off}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "tensor rank"))
    dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "tensor dims"))
    n = int(np.prod(dims)) if rank else 1
    payload = _read_exact(fh, 8 * n, "tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(dims)


def tensor_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(raw))


def zeros_like_params(params: Iterable[Tensor]) -> list[np.ndarray]:
    return [np.zeros_like(p.data) for p in params]
