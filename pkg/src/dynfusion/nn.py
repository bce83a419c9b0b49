"""Layer library on top of the autodiff engine.

Layers hold :class:`Parameter` attributes and sub-modules; names come from
attribute paths (``layers.0.attn.w_q``). Weights are filled by
:meth:`Module.initialize`, which draws each parameter from its own PCG32
stream keyed by seed and name, so adding a layer never perturbs the
initial values of the others.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .rng import PCG32, stream_id
from .tensor import Parameter, Tensor


# ---------------------------------------------------------------- analytic parameter counts

def linear_params(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def embedding_params(vocab: int, dim: int) -> int:
    return vocab * dim


def layer_norm_params(dim: int) -> int:
    return 2 * dim


def attention_params(hidden: int) -> int:
    return 4 * (hidden * hidden + hidden)


def transformer_layer_params(hidden: int, ffn: int) -> int:
    """Attention, two-layer feed-forward and two layer norms."""
    return (attention_params(hidden) + 2 * hidden * ffn + hidden + ffn
            + 2 * layer_norm_params(hidden))


def lstm_params(n_in: int, hidden: int) -> int:
    """One direction with a single bias vector per gate."""
    return 4 * hidden * (n_in + hidden + 1)


def bilstm_params(n_in: int, hidden: int) -> int:
    return 2 * lstm_params(n_in, hidden)


def conv1d_params(c_in: int, c_out: int, kernel: int, bias: bool = True) -> int:
    return c_out * c_in * kernel + (c_out if bias else 0)


def conv2d_params(c_in: int, c_out: int, kernel: int, bias: bool = True) -> int:
    return c_out * c_in * kernel * kernel + (c_out if bias else 0)


# ---------------------------------------------------------------- module base

def _param(shape, init, trainable=True) -> Parameter:
    fill = init[1] if init[0] == "const" else 0.0
    p = Parameter(np.full(shape, fill), trainable=trainable)
    p.init = init
    return p


def glorot(shape, fan_in, fan_out) -> Parameter:
    return _param(shape, ("glorot", fan_in, fan_out))


def zeros(shape) -> Parameter:
    return _param(shape, ("const", 0.0))


def constant(shape, value) -> Parameter:
    return _param(shape, ("const", float(value)))


class Module:
    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(m, Module) for m in val):
                for i, m in enumerate(val):
                    yield f"{key}.{i}", m

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_elements(self) -> int:
        """Number of scalars actually instantiated."""
        return sum(p.size for p in self.parameters())

    def param_count(self) -> int:
        """Analytic count from the configuration alone."""
        raise NotImplementedError

    def initialize(self, seed: int = 0, prefix: str = "") -> "Module":
        for name, p in self.named_parameters(prefix):
            p.name = name
            kind = p.init[0]
            if kind == "glorot":
                _, fan_in, fan_out = p.init
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                rng = PCG32(seed, stream_id(name))
                p.data = rng.uniform(p.size, -bound, bound).reshape(p.shape)
            else:
                p.data = np.full(p.shape, p.init[1])
            p.grad = None
        return self

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.frozen = False

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict, prefix: str = "", strict: bool = True) -> None:
        for name, p in self.named_parameters(prefix):
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name}")
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()


# ---------------------------------------------------------------- basic layers

class Linear(Module):
    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out
        self.weight = glorot((n_in, n_out), n_in, n_out)
        self.bias = zeros((n_out,))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Linear expects last dim {self.n_in}, got {x.shape}")
        if x.ndim == 1:
            return T.reshape(T.matmul(T.reshape(x, (1, -1)), self.weight), (-1,)) + self.bias
        return T.matmul(x, self.weight) + self.bias

    def param_count(self) -> int:
        return linear_params(self.n_in, self.n_out)


class Embedding(Module):
    def __init__(self, vocab: int, dim: int):
        self.vocab, self.dim = vocab, dim
        self.table = glorot((vocab, dim), vocab, dim)

    def forward(self, ids) -> Tensor:
        return T.embedding_lookup(self.table, ids)

    def param_count(self) -> int:
        return embedding_params(self.vocab, self.dim)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.dim, self.eps = dim, eps
        self.gain = constant((dim,), 1.0)
        self.offset = zeros((dim,))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.offset, self.eps)

    def param_count(self) -> int:
        return layer_norm_params(self.dim)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1):
        self.c_in, self.c_out, self.kernel, self.stride = c_in, c_out, kernel, stride
        self.weight = glorot((c_out, c_in, kernel), c_in * kernel, c_out * kernel)
        self.bias = zeros((c_out,))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, self.stride)

    def param_count(self) -> int:
        return conv1d_params(self.c_in, self.c_out, self.kernel)


class Conv2dBlock(Module):
    """3x3 same-padded conv -> relu -> 2x2 max pool."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, pool: int = 2):
        self.c_in, self.c_out, self.kernel, self.pool = c_in, c_out, kernel, pool
        fan = kernel * kernel
        self.weight = glorot((c_out, c_in, kernel, kernel), c_in * fan, c_out * fan)
        self.bias = zeros((c_out,))

    def forward(self, x: Tensor) -> Tensor:
        """x: (B, C, F, T) -> (B, C', F // 2, T // 2)."""
        if x.ndim == 3:
            return T.index(self.forward(T.reshape(x, (1,) + x.shape)), 0)
        if x.shape[2] < self.pool or x.shape[3] < self.pool:
            raise ShapeError(f"Conv2dBlock needs at least {self.pool} rows and columns, got {x.shape}")
        return T.max_pool2d(T.relu(T.conv2d(x, self.weight, self.bias)), self.pool)

    def out_shape(self, freq: int, frames: int) -> tuple[int, int, int]:
        return self.c_out, freq // self.pool, frames // self.pool

    def param_count(self) -> int:
        return conv2d_params(self.c_in, self.c_out, self.kernel)


# ---------------------------------------------------------------- transformer

@dataclass(frozen=True)
class TransformerEncoderLayerConfig:
    hidden: int = 64
    ffn: int = 256
    heads: int = 4

    def __post_init__(self):
        if min(self.hidden, self.ffn, self.heads) <= 0:
            raise ConfigError("transformer sizes must be positive")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = 1.0 / np.power(10000.0, (2 * (np.arange(dim) // 2)) / dim)
    angles = pos * rates[None, :]
    table = np.empty((length, dim))
    table[:, 0::2] = np.sin(angles[:, 0::2])
    table[:, 1::2] = np.cos(angles[:, 1::2])
    return table


MASK_FILL = -1e30


class MultiHeadSelfAttention(Module):
    def __init__(self, hidden: int, heads: int):
        if hidden % heads:
            raise ConfigError(f"hidden {hidden} not divisible by heads {heads}")
        self.hidden, self.heads = hidden, heads
        self.w_q = glorot((hidden, hidden), hidden, hidden)
        self.b_q = zeros((hidden,))
        self.w_k = glorot((hidden, hidden), hidden, hidden)
        self.b_k = zeros((hidden,))
        self.w_v = glorot((hidden, hidden), hidden, hidden)
        self.b_v = zeros((hidden,))
        self.w_o = glorot((hidden, hidden), hidden, hidden)
        self.b_o = zeros((hidden,))
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor, bsz: int, steps: int) -> Tensor:
        head_dim = self.hidden // self.heads
        return T.transpose(T.reshape(x, (bsz, steps, self.heads, head_dim)), (0, 2, 1, 3))

    def forward(self, x: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
        """x: (B, T, h); pad_mask: (B, T) bool, True where the key is padding."""
        bsz, steps, _ = x.shape
        q = self._split(T.matmul(x, self.w_q) + self.b_q, bsz, steps)
        # b_k shifts every score of a query by the same amount, which softmax
        # cancels; it is kept for checkpoint layout but not applied.
        k = self._split(T.matmul(x, self.w_k), bsz, steps)
        v = self._split(T.matmul(x, self.w_v) + self.b_v, bsz, steps)
        scores = T.scalar_scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                                1.0 / np.sqrt(self.hidden // self.heads))
        if pad_mask is not None:
            fill = np.where(np.asarray(pad_mask, dtype=bool), MASK_FILL, 0.0)[:, None, None, :]
            scores = scores + Tensor(fill)
        weights = T.softmax(scores)
        self.last_weights = weights.data
        context = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (bsz, steps, self.hidden))
        return T.matmul(context, self.w_o) + self.b_o

    def param_count(self) -> int:
        return attention_params(self.hidden)


class TransformerEncoderLayer(Module):
    """Post-norm encoder layer: LN(x + MHA(x)), then LN(x + FFN(x))."""

    def __init__(self, cfg: TransformerEncoderLayerConfig = TransformerEncoderLayerConfig()):
        self.cfg = cfg
        self.attn = MultiHeadSelfAttention(cfg.hidden, cfg.heads)
        self.norm1 = LayerNorm(cfg.hidden)
        self.ff_in = Linear(cfg.hidden, cfg.ffn)
        self.ff_out = Linear(cfg.ffn, cfg.hidden)
        self.norm2 = LayerNorm(cfg.hidden)

    def forward(self, x: Tensor, pad_mask=None) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
            pad_mask = None if pad_mask is None else np.asarray(pad_mask)[None]
        if x.shape[-1] != self.cfg.hidden:
            raise ShapeError(f"encoder layer expects width {self.cfg.hidden}, got {x.shape}")
        x = self.norm1(x + self.attn(x, pad_mask))
        x = self.norm2(x + self.ff_out(T.relu(self.ff_in(x))))
        return T.index(x, 0) if squeeze else x

    def param_count(self) -> int:
        return transformer_layer_params(self.cfg.hidden, self.cfg.ffn)


# ---------------------------------------------------------------- recurrent

@dataclass(frozen=True)
class BiLstmConfig:
    input_size: int
    hidden_size: int = 64

    def __post_init__(self):
        if self.input_size <= 0 or self.hidden_size <= 0:
            raise ConfigError("LSTM sizes must be positive")


class LSTM(Module):
    """Single-direction LSTM; gate columns are ordered (input, forget, output, cell)."""

    def __init__(self, n_in: int, hidden: int):
        self.n_in, self.hidden = n_in, hidden
        self.w_ih = glorot((n_in, 4 * hidden), n_in, 4 * hidden)
        self.w_hh = glorot((hidden, 4 * hidden), hidden, 4 * hidden)
        self.bias = zeros((4 * hidden,))

    def cell(self, x_proj: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        """One step given the already-projected input x @ w_ih."""
        hid = self.hidden
        z = x_proj + T.matmul(h, self.w_hh) + self.bias
        gates = T.sigmoid(T.index(z, (slice(None), slice(0, 3 * hid))))
        cand = T.tanh(T.index(z, (slice(None), slice(3 * hid, 4 * hid))))
        i = T.index(gates, (slice(None), slice(0, hid)))
        f = T.index(gates, (slice(None), slice(hid, 2 * hid)))
        o = T.index(gates, (slice(None), slice(2 * hid, 3 * hid)))
        c = f * c + i * cand
        h = o * T.tanh(c)
        return h, c

    def forward(self, x: Tensor, reverse: bool = False) -> Tensor:
        """x: (B, T, d) -> final hidden state (B, H) after consuming every step."""
        bsz, steps, _ = x.shape
        proj = T.matmul(x, self.w_ih)
        h = Tensor(np.zeros((bsz, self.hidden)))
        c = Tensor(np.zeros((bsz, self.hidden)))
        order = range(steps - 1, -1, -1) if reverse else range(steps)
        for t in order:
            h, c = self.cell(T.index(proj, (slice(None), t)), h, c)
        return h

    def param_count(self) -> int:
        return lstm_params(self.n_in, self.hidden)


class BiLSTM(Module):
    def __init__(self, cfg: BiLstmConfig):
        self.cfg = cfg
        self.fwd = LSTM(cfg.input_size, cfg.hidden_size)
        self.bwd = LSTM(cfg.input_size, cfg.hidden_size)

    def forward(self, x: Tensor) -> Tensor:
        """x: (B, T, d) or (T, d) -> concat(forward h_T, backward h_1)."""
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        if x.shape[-1] != self.cfg.input_size or x.shape[1] < 1:
            raise ShapeError(f"BiLSTM expects (B, T>=1, {self.cfg.input_size}), got {x.shape}")
        out = T.concat([self.fwd(x), self.bwd(x, reverse=True)], axis=-1)
        return T.index(out, 0) if squeeze else out

    def param_count(self) -> int:
        return bilstm_params(self.cfg.input_size, self.cfg.hidden_size)
