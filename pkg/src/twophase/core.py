"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Tensors are NHWC for images. Every op records a backward closure only when at
least one input requires a gradient, so frozen sub-networks cost a forward pass
and nothing else.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when an op receives inputs of incompatible shape."""

    def __init__(self, op: str, expected, actual):
        self.op = op
        self.expected = expected
        self.actual = actual
        super().__init__(f"{op}: expected {expected}, got {actual}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: Tensor) -> Tensor:
        return residual_add(self, other)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    # ids are assigned at creation, so descending id is reverse insertion order
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for x of shape (N, D) and weight (D, K)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError("affine", f"(N, {weight.shape[0] if weight.data.ndim == 2 else 'D'})", x.shape)
    if bias.shape != (weight.shape[1],):
        raise ShapeError("affine", (weight.shape[1],), bias.shape)
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data

    def fn(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _record(out, (x, weight, bias), fn)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N, H, W, Cin); weight: (KH, KW, Cin, Cout).

    Implemented as one matmul per kernel offset, which keeps the reduction
    order fixed and avoids materialising an im2col buffer.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 4:
        raise ShapeError("conv2d", "(N, H, W, C)", x.shape)
    if weight.data.ndim != 4 or weight.shape[2] != x.shape[3]:
        raise ShapeError("conv2d", f"(KH, KW, {x.shape[3]}, Cout)", weight.shape)
    kh, kw, cin, cout = weight.shape
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError("conv2d", (cout,), bias.shape)
    n, h, w, _ = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", f"spatial size >= kernel {kh}x{kw}", (h, w))

    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    out = np.zeros((n, ho, wo, cout), dtype=np.result_type(xd, wd))
    for i in range(kh):
        hs = slice(i, i + stride * (ho - 1) + 1, stride)
        for j in range(kw):
            ws = slice(j, j + stride * (wo - 1) + 1, stride)
            out += xp[:, hs, ws, :] @ wd[i, j]
    if bias is not None:
        out += bias.data

    def fn(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(wd) if weight.requires_grad else None
        g2 = g.reshape(-1, cout)
        for i in range(kh):
            hs = slice(i, i + stride * (ho - 1) + 1, stride)
            for j in range(kw):
                ws = slice(j, j + stride * (wo - 1) + 1, stride)
                if gw is not None:
                    gw[i, j] = xp[:, hs, ws, :].reshape(-1, cin).T @ g2
                if gx is not None:
                    gx[:, hs, ws, :] += g @ wd[i, j].T
        if gx is not None and padding:
            gx = gx[:, padding:padding + h, padding:padding + w, :]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, fn)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def fn(g):
        return (g * mask,)

    return _record(out, (x,), fn)


def max_pool2d(x: Tensor, size: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling over (size x size) windows. Ties route the gradient to the first max."""
    x = _as_tensor(x)
    stride = size if stride is None else stride
    if x.data.ndim != 4:
        raise ShapeError("max_pool2d", "(N, H, W, C)", x.shape)
    n, h, w, c = x.shape
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("max_pool2d", f"spatial size >= {size}", (h, w))
    xd = x.data
    out = None
    arg = np.zeros((n, ho, wo, c), dtype=np.int32)
    for k, (i, j) in enumerate(itertools.product(range(size), range(size))):
        view = xd[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
        if out is None:
            out = view.copy()
        else:
            better = view > out
            out = np.where(better, view, out)
            arg[better] = k

    def fn(g):
        gx = np.zeros_like(xd)
        for k, (i, j) in enumerate(itertools.product(range(size), range(size))):
            sel = (arg == k)
            gx[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += g * sel
        return (gx,)

    return _record(out, (x,), fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, H, W, C) -> (N, C)."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", "(N, H, W, C)", x.shape)
    n, h, w, c = x.shape
    out = x.data.mean(axis=(1, 2))

    def fn(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).astype(x.dtype),)

    return _record(out, (x,), fn)


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("residual_add", a.shape, b.shape)

    def fn(g):
        return g, g

    return _record(a.data + b.data, (a, b), fn)


def flatten(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def fn(g):
        return (g.reshape(shape),)

    return _record(x.data.reshape(shape[0], -1), (x,), fn)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean categorical cross-entropy of (N, C) logits against integer targets."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy", "(N, C)", logits.shape)
    n, c = logits.shape
    if targets.shape != (n,):
        raise ShapeError("softmax_cross_entropy", (n,), targets.shape)
    if n == 0 or targets.min() < 0 or targets.max() >= c:
        raise ValueError(f"softmax_cross_entropy: targets must be class indices in [0, {c})")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), targets].mean()
    out = np.asarray(loss, dtype=logits.dtype)

    def fn(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1
        return (p * (g / n),)

    return _record(out, (logits,), fn)
