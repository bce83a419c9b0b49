"""Reverse-mode automatic differentiation over float64 numpy arrays.

Only the operations the model needs are provided. Every op accepts an
optional leading batch axis so equal-length samples can share one graph;
the graph is rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError, ShapeError

_GRAD_ENABLED = True
_KINK_LOG: list | None = None  # branch decisions of piecewise ops, recorded while grad-checking


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    def __init__(self, data, requires_grad: bool = False, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = op

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        self._requires_grad = bool(value)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def backward(self) -> None:
        """Populate .grad on every reachable leaf that requires a gradient."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scalar_scale(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), scalar_scale(self, -1.0))

    def __neg__(self):
        return scalar_scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_scale(self, float(other))
        return multiply(self, _lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A named model weight. Frozen parameters never receive gradients."""

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data)
        self.name = name
        self.trainable = trainable
        self.frozen = False

    @property
    def requires_grad(self) -> bool:
        return self.trainable and not self.frozen

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        self.trainable = bool(value)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __repr__(self):
        flag = "frozen" if self.frozen else ("trainable" if self.trainable else "fixed")
        return f"Parameter({self.name!r}, shape={self.shape}, {flag})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor(data, op=op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out._requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), backward, "add")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "multiply")

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), backward, "multiply")


def scalar_scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scalar_scale")


def _log_branch(pattern: np.ndarray) -> None:
    if _KINK_LOG is not None:
        _KINK_LOG.append(pattern)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _log_branch(mask)
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


# ---------------------------------------------------------------- reductions / shape

def sum_all(a: Tensor) -> Tensor:
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
        return _make(np.array(a.data.mean()), (a,),
                     lambda g: (np.full(a.shape, float(g) / n),), "mean")
    axis = axis % a.ndim
    n = a.shape[axis]

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def index(a: Tensor, idx) -> Tensor:
    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(a.data[idx]), (a,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors:
        if t.ndim != nd or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} @ {b.shape}") from None
    return _make(out, (a, b), backward, "matmul")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid 1-D convolution. x: (B, C, L), w: (O, C, K) -> (B, O, L_out)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {w.shape}")
    bsz, chans, length = x.shape
    out_ch, _, k = w.shape
    if length < k:
        raise ShapeError(f"conv1d: input length {length} shorter than kernel {k}")
    l_out = (length - k) // stride + 1
    win = sliding_window_view(x.data, k, axis=2)[:, :, ::stride][:, :, :l_out]
    cols = win.transpose(0, 2, 1, 3).reshape(bsz * l_out, chans * k)
    wmat = w.data.reshape(out_ch, chans * k)
    out = (cols @ wmat.T).reshape(bsz, l_out, out_ch).transpose(0, 2, 1)
    if b is not None:
        out = out + b.data[None, :, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(bsz * l_out, out_ch)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(bsz, l_out, chans, k).transpose(0, 2, 1, 3)
            gx = np.zeros(x.shape)
            span = stride * (l_out - 1) + 1
            for j in range(k):
                gx[:, :, j:j + span:stride] += gcols[..., j]
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make(np.ascontiguousarray(out), parents, backward, "conv1d")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution with zero padding.

    x: (B, C, H, W), w: (O, C, K, K) with odd K -> (B, O, H, W).
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    kh, kw = w.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: kernel sizes must be odd for same padding")
    bsz, chans, height, width = x.shape
    out_ch = w.shape[0]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B, C, H, W, kh, kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * height * width, chans * kh * kw)
    wmat = w.data.reshape(out_ch, -1)
    out = (cols @ wmat.T).reshape(bsz, height, width, out_ch).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, out_ch)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(bsz, height, width, chans, kh, kw)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + height, j:j + width] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + height, pw:pw + width]
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make(np.ascontiguousarray(out), parents, backward, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last two axes; remainders are dropped."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects (B, C, H, W), got {x.shape}")
    bsz, chans, height, width = x.shape
    h2, w2 = height // size, width // size
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"max_pool2d: input {height}x{width} smaller than pool {size}")
    crop = x.data[:, :, :h2 * size, :w2 * size]
    blocks = crop.reshape(bsz, chans, h2, size, w2, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(bsz, chans, h2, w2, size * size)
    arg = blocks.argmax(axis=-1)[..., None]
    _log_branch(arg)
    out = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((bsz, chans, h2, w2, size * size))
        np.put_along_axis(gb, arg, g[..., None], axis=-1)
        gb = gb.reshape(bsz, chans, h2, w2, size, size).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros(x.shape)
        gx[:, :, :h2 * size, :w2 * size] = gb.reshape(bsz, chans, h2 * size, w2 * size)
        return (gx,)

    return _make(out, (x,), backward, "max_pool2d")


# ---------------------------------------------------------------- normalisation / probabilities

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by gain and shift by offset."""
    if gain.shape != (x.shape[-1],) or offset.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain/offset {gain.shape}/{offset.shape} vs features {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        gx = ggain = goff = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if offset.requires_grad:
            goff = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, ggain, goff

    return _make(xhat * gain.data + offset.data, (x, gain, offset), backward, "layer_norm")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids outside [0, {table.shape[0]})")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _make(table.data[ids], (table,), backward, "embedding_lookup")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    logits: (B, K) or (K,); labels: (B,) or scalar.
    """
    z = logits.data
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ShapeError("cross_entropy: label out of range")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    n = z.shape[0]
    loss = -log_probs[np.arange(n), labels].mean()

    def backward(g):
        probs = np.exp(log_probs)
        probs[np.arange(n), labels] -= 1.0
        grad = probs * (float(g) / n)
        return (grad[0] if squeeze else grad,)

    return _make(np.array(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------- gradient checking

def _branches(f: Callable[[], Tensor]) -> tuple[float, list]:
    global _KINK_LOG
    _KINK_LOG = []
    try:
        value = f().item()
        return value, _KINK_LOG
    finally:
        _KINK_LOG = None


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               max_elements: int | None = None, seed: int = 0, skip_kinks: bool = False,
               stats: dict | None = None) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` is re-evaluated with each input element nudged by +-eps; the error
    per element is |a - n| / max(1e-8, |a| + |n|). With ``max_elements`` set,
    only that many elements per input are probed (chosen by a seeded PCG32).

    With ``skip_kinks``, probes whose +-eps evaluations take a different relu
    or max-pool branch than the unperturbed point are excluded, since the
    central difference is not a derivative estimate there. ``stats`` (if
    given) receives the counts of probed and skipped elements.
    """
    from .rng import PCG32

    for t in inputs:
        t.grad = None
    loss = f()
    if loss.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    rng = PCG32(seed, 7)
    worst = 0.0
    probed = skipped = 0
    with no_grad():
        base = _branches(f)[1] if skip_kinks else None
        for t, a_grad in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            positions = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                positions = positions[rng.permutation(flat.size)[:max_elements]]
            for i in positions:
                orig = flat[i]
                flat[i] = orig + eps
                up, up_branches = _branches(f) if skip_kinks else (f().item(), None)
                flat[i] = orig - eps
                down, down_branches = _branches(f) if skip_kinks else (f().item(), None)
                flat[i] = orig
                probed += 1
                if skip_kinks and not (_same_branches(base, up_branches)
                                       and _same_branches(base, down_branches)):
                    skipped += 1
                    continue
                numeric = (up - down) / (2 * eps)
                a = a_grad.reshape(-1)[i]
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, err)
    for t in inputs:
        t.grad = None
    if stats is not None:
        stats.update(probed=probed, skipped=skipped)
    return worst
