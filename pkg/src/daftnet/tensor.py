"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every operation returns a new :class:`Tensor`; when any input requires a
gradient, the output remembers its parents and a closure mapping the output
gradient to one gradient per parent. :meth:`Tensor.backward` walks the graph
once in reverse topological order.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}


class DomainError(ValueError):
    """Raised when an operation is evaluated outside its domain (e.g. log of 0)."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward operation produces NaN or Inf."""


class Tensor:
    """N-dimensional array with an optional gradient.

    Parameters
    ----------
    data : array_like
        Values. Python scalars and lists become float32 unless ``dtype`` is given;
        float32/float64 arrays keep their dtype.
    requires_grad : bool
        Whether :meth:`backward` should populate ``grad`` for this tensor.
    dtype : str or numpy dtype, optional
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = np.float32
        else:
            dtype = DTYPES.get(dtype, dtype)
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, reciprocal(_wrap(other, self.dtype)))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` of every leaf that requires it with d(self)/d(leaf).

        ``self`` must hold a single value (shape ``()`` or ``(1,)``). A leaf that
        already carries a gradient from an earlier pass raises instead of
        accumulating; call ``zero_grad`` first.
        """
        if self.data.size != 1 or self.ndim > 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        order = topological_order(self)
        stale = [t for t in order if t.is_leaf and t.requires_grad and t.grad is not None]
        if stale:
            raise RuntimeError(
                f"{len(stale)} leaf tensor(s) already hold gradients from a previous backward pass; "
                "reset them with zero_grad() before calling backward() again")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
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


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype or np.float32)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by '{op}' (shape {data.shape})")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _wrap(b, a.dtype)
    b = _wrap(b)
    return _wrap(a, b.dtype), b


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise DomainError("reciprocal of zero")
    r = 1.0 / a.data
    return _result(r, (a,), lambda g: (-g * r * r,), "reciprocal")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _result(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError(f"log of non-positive value (min {x.min()!r})")
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def identity(a: Tensor) -> Tensor:
    return a


# -- reductions and shape ----------------------------------------------------

def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)
    if axis is None:
        return _result(np.asarray(out, dtype=a.dtype), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    kept = np.expand_dims(out, axis).shape

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)
    return _result(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T.copy(),), "transpose")


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ValueError(f"concat_lastdim: leading dims differ, {lead} vs {t.shape[:-1]}")
    edges = np.cumsum([0] + [t.shape[-1] for t in tensors])
    data = np.concatenate([t.data for t in tensors], axis=-1)

    def backward(g):
        return tuple(g[..., edges[i]:edges[i + 1]].copy() for i in range(len(tensors)))
    return _result(data, tensors, backward, "concat_lastdim")


def slice_lastdim(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)
    return _result(a.data[..., start:stop].copy(), (a,), backward, "slice_lastdim")


def broadcast_channelwise(values: Tensor, target: Tensor | tuple) -> Tensor:
    """Replicate ``values[n, c]`` over every spatial position of ``target``."""
    tshape = target.shape if isinstance(target, Tensor) else tuple(target)
    if values.ndim != 2 or values.shape != tshape[:2]:
        raise ValueError(f"broadcast_channelwise: values {values.shape} do not match target {tshape}")
    spatial = (1,) * (len(tshape) - 2)
    data = np.broadcast_to(values.data.reshape(values.shape + spatial), tshape).copy()
    axes = tuple(range(2, len(tshape)))
    return _result(data, (values,), lambda g: (g.sum(axis=axes),), "broadcast_channelwise")


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s
    return _result(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


# -- volumetric ops -------------------------------------------------------------

def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation of ``x`` (N, C_in, D, H, W) with ``weight`` (C_out, C_in, k, k, k)."""
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    n, c_in = x.shape[:2]
    c_out, wc, k = weight.shape[:3]
    if wc != c_in:
        raise ValueError(f"conv3d channel mismatch: input {x.shape} has C_in={c_in}, weight {weight.shape} expects {wc}")
    if weight.shape[2:] != (k, k, k):
        raise ValueError(f"conv3d needs a cubic kernel, got {weight.shape}")
    if k < 1 or stride < 1 or padding < 0:
        raise ValueError(f"invalid conv3d arguments k={k}, stride={stride}, padding={padding}")
    if any(s + 2 * padding < k for s in x.shape[2:]):
        raise ValueError(f"conv3d: padded input {x.shape} smaller than kernel {k}")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    padded_shape = xd.shape
    od, oh, ow = (_out_size(s, k, stride, padding) for s in x.shape[2:])
    npos = n * od * oh * ow
    # columns laid out (C_in * k^3, N * D' * H' * W'): cheaper to gather than position-major
    win = sliding_window_view(xd, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride][:, :, :od, :oh, :ow]
    cols = win.transpose(1, 5, 6, 7, 0, 2, 3, 4).reshape(c_in * k ** 3, npos)
    wmat = weight.data.reshape(c_out, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(c_out, n, od, oh, ow).transpose(1, 0, 2, 3, 4))

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3, 4).reshape(c_out, npos)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c_in, k, k, k, n, od, oh, ow)
            gxp = np.zeros((c_in, n) + padded_shape[2:], dtype=g.dtype)
            span = (od - 1) * stride + 1, (oh - 1) * stride + 1, (ow - 1) * stride + 1
            for a in range(k):
                for b in range(k):
                    for c in range(k):
                        gxp[:, :, a:a + span[0]:stride, b:b + span[1]:stride, c:c + span[2]:stride] += gcols[:, a, b, c]
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding, padding:-padding]
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3, 4))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, backward, "conv3d")


def global_avg_pool3d(x: Tensor) -> Tensor:
    if x.ndim != 5:
        raise ValueError(f"global_avg_pool3d expects N x C x D x H x W, got {x.shape}")
    shape = x.shape
    count = shape[2] * shape[3] * shape[4]

    def backward(g):
        return (np.broadcast_to((g / count)[:, :, None, None, None], shape).copy(),)
    return _result(x.data.mean(axis=(2, 3, 4)), (x,), backward, "global_avg_pool3d")


def batch_norm(x: Tensor, weight: Tensor | None, bias: Tensor | None,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the batch and all spatial axes.

    In training mode the running statistics are updated in place with the
    unbiased batch variance; in eval mode only the running statistics are used.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    view = (1, -1) + (1,) * (x.ndim - 2)
    xd = x.data
    count = xd.size // xd.shape[1]
    if training:
        if count < 2:
            raise ValueError(f"batch_norm in training mode needs more than one value per channel, got input {x.shape}")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(view).astype(xd.dtype)) * inv_std.reshape(view)
    out = xhat
    if weight is not None:
        out = out * weight.data.reshape(view) + bias.data.reshape(view)

    def backward(g):
        gw = gb = None
        if weight is not None:
            gw = (g * xhat).sum(axis=axes)
            gb = g.sum(axis=axes)
            gxhat = g * weight.data.reshape(view)
        else:
            gxhat = g
        if training:
            s1 = gxhat.sum(axis=axes).reshape(view)
            s2 = (gxhat * xhat).sum(axis=axes).reshape(view)
            gx = (inv_std.reshape(view) / count) * (count * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv_std.reshape(view)
        return (gx, gw, gb) if weight is not None else (gx,)

    parents = (x, weight, bias) if weight is not None else (x,)
    return _result(np.ascontiguousarray(out), parents, backward, "batch_norm")


# -- gradient checking ----------------------------------------------------------

def grad_check(op_under_test: Callable[..., Tensor], inputs: Sequence[np.ndarray],
               step: float = 1e-6, seed: int = 0) -> float:
    """Compare backward() with central finite differences.

    The (possibly non-scalar) output is reduced to a scalar with fixed random
    weights so every output entry contributes. Returns the maximum over all
    input entries of ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)
    probe = None

    def scalar(arrs, track):
        nonlocal probe
        ts = [Tensor(a, requires_grad=track, dtype=np.float64) for a in arrs]
        out = op_under_test(*ts)
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return ts, tsum(mul(out, Tensor(probe, dtype=np.float64)))

    ts, loss = scalar(arrays, True)
    loss.backward()
    worst = 0.0
    for idx, t in enumerate(ts):
        analytic = t.grad if t.grad is not None else np.zeros_like(arrays[idx])
        flat = arrays[idx].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = scalar(arrays, False)[1].data.item()
            flat[j] = orig - step
            down = scalar(arrays, False)[1].data.item()
            flat[j] = orig
            numeric = (up - down) / (2 * step)
            a = analytic.reshape(-1)[j]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


# -- serialization ------------------------------------------------------------

def meta_path(path) -> Path:
    return Path(path).with_suffix(".meta")


def save_tensor(path, tensor: Tensor | np.ndarray) -> None:
    """Write raw little-endian values to ``path`` and a text descriptor next to it (suffix ``.meta``)."""
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    name = np.dtype(arr.dtype).name
    if name not in DTYPES:
        raise ValueError(f"unsupported dtype {name}")
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    shape = ",".join(str(s) for s in arr.shape)
    meta_path(path).write_text(f"dtype={name}\nshape={shape}\n")


def read_meta(path) -> tuple[str, tuple[int, ...]]:
    fields = dict(line.split("=", 1) for line in meta_path(path).read_text().splitlines() if "=" in line)
    shape = tuple(int(s) for s in fields["shape"].split(",") if s)
    return fields["dtype"], shape


def load_tensor(path) -> Tensor:
    dtype, shape = read_meta(path)
    raw = Path(path).read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {dtype}{list(shape)}, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype).reshape(shape)
    return Tensor(arr, dtype=dtype)
