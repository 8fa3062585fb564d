"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the hashing network needs are provided. Most of them
accept an optional leading batch axis so a mini-batch can be pushed through
the network as one graph; there is no general broadcasting.

Gradients accumulate: calling :func:`backward` twice without
:meth:`Tensor.zero_grad` adds the second set of gradients onto the first.
"""
from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, NumericError

DEBUG = os.environ.get("PYRAMIDHASH_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Toggle finiteness checks after every forward op."""
    global DEBUG
    DEBUG = bool(flag)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _op: str = "leaf", _backward=None):
        arr = np.array(data, dtype=np.float64, copy=True) if _op == "leaf" else data
        if arr.ndim == 0 and _op == "leaf":
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._op = _op
        self._backward = _backward

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
    def op(self) -> str:
        return self._op

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, rg, _parents=parents, _op=op, _backward=backward_fn if rg else None)


# ---------------------------------------------------------------- graph walk


def topological_order(root: Tensor) -> list[Tensor]:
    """Return the nodes reachable from ``root`` in topological order (inputs first)."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad node."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad=True")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- ops


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``W @ x + b`` for x of shape (n,) or a batch (N, n)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or b.ndim != 1 or x.ndim not in (1, 2) or x.shape[-1] != W.shape[1] or b.shape[0] != W.shape[0]:
        raise DimensionError(f"affine: x {x.shape}, W {W.shape}, b {b.shape} do not conform")
    out = x.data @ W.data.T + b.data

    def bw(g):
        gx = g @ W.data
        gW = np.outer(g, x.data) if x.ndim == 1 else g.T @ x.data
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gW, gb

    return _result(out, (x, W, b), "affine", bw)


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernels_: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation of (C_in, H, W) or (N, C_in, H, W) input with (C_out, C_in, k, k) kernels."""
    x, K = as_tensor(x), as_tensor(kernels_)
    if x.ndim not in (3, 4) or K.ndim != 4 or K.shape[2] != K.shape[3] or x.shape[-3] != K.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} and kernels {K.shape} do not conform")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: bad stride {stride} / padding {padding}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, cin, h, w = xd.shape
    cout, k = K.shape[0], K.shape[2]
    oh, ow = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: input {x.shape} with kernels {K.shape}, stride {stride}, padding {padding} gives empty output")
    parents = [x, K]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d: bias {bias.shape} does not match kernels {K.shape}")
        parents.append(bias)

    cols = kernels.im2col(xd, k, stride, padding)  # (N, cin*k*k, oh*ow)
    kmat = K.data.reshape(cout, -1)
    out = np.matmul(kmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, oh, ow)
    if not batched:
        out = out[0]

    def bw(g):
        g4 = (g if batched else g[None]).reshape(n, cout, oh * ow)
        gK = np.tensordot(g4, cols, axes=([0, 2], [0, 2])).reshape(K.shape)
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(np.matmul(kmat.T, g4), xd.shape, k, stride, padding)
            if not batched:
                gx = gx[0]
        grads = [gx, gK]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2)))
        return grads

    return _result(out, parents, "conv2d", bw)


def avgpool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Adaptive average pooling to ``out_h x out_w``; the input must tile exactly."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"avgpool2d: expected (C,H,W) or (N,C,H,W), got {x.shape}")
    h, w = x.shape[-2:]
    if out_h < 1 or out_w < 1 or h % out_h or w % out_w:
        raise DimensionError(f"avgpool2d: {h}x{w} does not tile into {out_h}x{out_w}")
    th, tw = h // out_h, w // out_w
    lead = x.shape[:-2]
    out = x.data.reshape(*lead, out_h, th, out_w, tw).mean(axis=(-3, -1))

    def bw(g):
        g = g[..., :, None, :, None] / (th * tw)
        return (np.broadcast_to(g, (*lead, out_h, th, out_w, tw)).reshape(x.shape),)

    return _result(out, (x,), "avgpool2d", bw)


def avgpool1d_pairs(x: Tensor) -> Tensor:
    """Mean of non-overlapping adjacent pairs along the last axis."""
    x = as_tensor(x)
    if x.ndim not in (1, 2) or x.shape[-1] % 2:
        raise DimensionError(f"avgpool1d_pairs: last axis must be even, got shape {x.shape}")
    half = x.shape[-1] // 2
    pairs = x.data.reshape(*x.shape[:-1], half, 2)
    out = (pairs[..., 0] + pairs[..., 1]) / 2

    def bw(g):
        return (np.repeat(g / 2, 2, axis=-1),)

    return _result(out, (x,), "avgpool1d_pairs", bw)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), "sigmoid", bw)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def bw(g):
        return (g * mask,)

    return _result(out, (x,), "relu", bw)


def elementwise(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return relu(x)
    raise ContractError(f"unknown elementwise kind {kind!r}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), "mul", lambda g: (g * b.data, g * a.data))


def add_scalar(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data + c, (x,), "add_scalar", lambda g: (g,))


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * c, (x,), "scale", lambda g: (g * c,))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.full(x.shape, g.reshape(()), dtype=np.float64),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(out, (x,), "sum", bw)


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return scale(sum(x), 1.0 / x.size)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(tuple(shape))
    return _result(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor, batched: bool = False) -> Tensor:
    """Flatten to a vector, or to (N, -1) when ``batched``."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1) if batched else (-1,))


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]`` of a 2-D tensor (repeats allowed)."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim != 2:
        raise DimensionError(f"take_rows: expected a 2-D tensor, got {x.shape}")
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(out, (x,), "take_rows", bw)


def row(x: Tensor, i: int) -> Tensor:
    """Select one row of a batch as its own tensor."""
    x = as_tensor(x)
    out = x.data[i]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return _result(out, (x,), "row", bw)


# ---------------------------------------------------------------- gradient check


def kink_pattern(out: Tensor) -> tuple[bytes, ...]:
    """Activation pattern of every relu in the graph of ``out``.

    Two evaluations whose patterns agree lie in the same linear piece of
    every relu (and of the triplet hinge, which is built on relu).
    """
    return tuple(np.packbits(n._parents[0].data > 0).tobytes() for n in topological_order(out) if n._op == "relu")


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    *,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` is called with the tensor(s) in ``x`` and must return a scalar.
    The relative error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    With ``max_coords`` only that many coordinates per tensor are sampled;
    coordinates whose +/-eps evaluations switch a relu or hinge branch are
    rejected and replaced.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    xs = [x] if isinstance(x, Tensor) else list(x)
    rng = rng or np.random.default_rng(0)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    loss = f(*xs)
    if loss.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
    base_pattern = kink_pattern(loss)
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    def value():
        out = f(*xs)
        return float(out.data.reshape(())), kink_pattern(out)

    worst = 0.0
    for t, a in zip(xs, analytic):
        flat = t.data.reshape(-1)
        order = rng.permutation(flat.size) if max_coords is not None else np.arange(flat.size)
        wanted = flat.size if max_coords is None else min(max_coords, flat.size)
        accepted = 0
        for i in order:
            if accepted >= wanted:
                break
            orig = flat[i]
            flat[i] = orig + eps
            fp, pp = value()
            flat[i] = orig - eps
            fm, pm = value()
            flat[i] = orig
            if pp != base_pattern or pm != base_pattern:
                continue
            accepted += 1
            num = (fp - fm) / (2 * eps)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst
