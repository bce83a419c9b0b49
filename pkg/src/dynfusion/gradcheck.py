"""Finite-difference gradient suite over every op, layer, branch and the full model."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .branches import (SemanticBranch, SemanticBranchConfig, TFBranch, TFBranchConfig, TimeBranch,
                       TimeBranchConfig)
from .fusion import Batch, Classifier, FusionModel, FusionWeights, ModelConfig, fuse
from .rng import PCG32, stream_id
from .tensor import Tensor

LAYER_TOL = 1e-6
MODEL_TOL = 1e-5


@contextlib.contextmanager
def corrupted_backward(op: str, factor: float = 1.01):
    """Test hook: scale every gradient produced by ``op``'s backward by ``factor``."""
    original = T._make

    def patched(data, parents, backward, name):
        if name == op:
            inner = backward

            def backward(g):  # noqa: F811 - deliberate wrap
                return tuple(None if x is None else x * factor for x in inner(g))

        return original(data, parents, backward, name)

    T._make = patched
    try:
        yield
    finally:
        T._make = original


def _leaf(rng: PCG32, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(int(np.prod(shape))).reshape(shape) * scale, requires_grad=True)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.sum_all(T.multiply(out, Tensor(weights)))


def _projected(fn, rng: PCG32):
    """Wrap fn() -> Tensor into a scalar via a fixed random projection.

    Projection magnitudes stay in [0.5, 1.5] so no output is ignored, which
    keeps analytic gradients well above finite-difference noise.
    """
    probe = fn()
    n = probe.data.size
    signs = np.where(rng.uniform(n) < 0.5, -1.0, 1.0)
    weights = (signs * rng.uniform(n, 0.5, 1.5)).reshape(probe.shape)
    return lambda: _weighted_sum(fn(), weights)


# ---------------------------------------------------------------- op cases

def _op_case(name: str, rng: PCG32):
    """Return (scalar function, leaves) for one random instance of op ``name``."""
    if name == "add":
        a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
        return _projected(lambda: T.add(a, b), rng), [a, b]
    if name == "multiply":
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 3, 1)
        return _projected(lambda: T.multiply(a, b), rng), [a, b]
    if name == "scalar_scale":
        a = _leaf(rng, 3, 5)
        c = float(rng.normal(1)[0])
        return _projected(lambda: T.scalar_scale(a, c), rng), [a]
    if name == "matmul":
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
        return _projected(lambda: T.matmul(a, b), rng), [a, b]
    if name == "conv1d":
        x, w, b = _leaf(rng, 2, 3, 17), _leaf(rng, 4, 3, 3), _leaf(rng, 4)
        return _projected(lambda: T.conv1d(x, w, b, stride=2), rng), [x, w, b]
    if name == "conv2d":
        x, w, b = _leaf(rng, 2, 2, 5, 6), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
        return _projected(lambda: T.conv2d(x, w, b), rng), [x, w, b]
    if name == "max_pool2d":
        x = _leaf(rng, 2, 2, 5, 7)
        return _projected(lambda: T.max_pool2d(x, 2), rng), [x]
    if name in ("relu", "tanh", "sigmoid", "softmax"):
        x = _leaf(rng, 3, 6)
        fn = getattr(T, name)
        return _projected(lambda: fn(x), rng), [x]
    if name == "layer_norm":
        x, g, b = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
        return _projected(lambda: T.layer_norm(x, g, b), rng), [x, g, b]
    if name == "embedding_lookup":
        table = _leaf(rng, 7, 4)
        ids = rng.integers(10, 7).reshape(2, 5)
        return _projected(lambda: T.embedding_lookup(table, ids), rng), [table]
    if name == "concat":
        a, b, c = _leaf(rng, 2, 3), _leaf(rng, 2, 1), _leaf(rng, 2, 4)
        return _projected(lambda: T.concat([a, b, c], axis=-1), rng), [a, b, c]
    if name == "mean":
        x = _leaf(rng, 3, 4, 5)
        return _projected(lambda: T.mean(x, axis=1), rng), [x]
    if name == "cross_entropy":
        z = _leaf(rng, 4, 3)
        labels = rng.integers(4, 3)
        return (lambda: T.cross_entropy(z, labels)), [z]
    if name == "index":
        x = _leaf(rng, 3, 5)
        return _projected(lambda: T.index(x, (slice(None), slice(1, 4))), rng), [x]
    if name == "transpose":
        x = _leaf(rng, 2, 3, 4)
        return _projected(lambda: T.transpose(x, (2, 0, 1)), rng), [x]
    raise KeyError(name)


OPS = ("add", "multiply", "scalar_scale", "matmul", "conv1d", "conv2d", "max_pool2d", "relu", "tanh",
       "sigmoid", "softmax", "layer_norm", "embedding_lookup", "concat", "mean", "cross_entropy",
       "index", "transpose")


# ---------------------------------------------------------------- layer cases

def _layer_case(name: str, rng: PCG32, seed: int):
    if name == "linear":
        layer = nn.Linear(5, 3).initialize(seed)
        x = _leaf(rng, 2, 5)
    elif name == "layer_norm":
        layer = nn.LayerNorm(6).initialize(seed)
        layer.gain.data = 1.0 + 0.3 * rng.normal(6)
        x = _leaf(rng, 2, 6)
    elif name == "embedding":
        layer = nn.Embedding(9, 4).initialize(seed)
        ids = rng.integers(6, 9).reshape(2, 3)
        return _projected(lambda: layer(ids), rng), layer.parameters()
    elif name == "conv1d":
        layer = nn.Conv1d(2, 3, 4, stride=3).initialize(seed)
        x = _leaf(rng, 2, 2, 20)
    elif name == "conv2d_block":
        layer = nn.Conv2dBlock(2, 3).initialize(seed)
        x = _leaf(rng, 2, 2, 6, 7)
    elif name == "lstm_cell":
        layer = nn.LSTM(4, 3).initialize(seed)
        xp, h, c = _leaf(rng, 2, 12, scale=0.5), _leaf(rng, 2, 3, scale=0.5), _leaf(rng, 2, 3, scale=0.5)

        def step():
            h2, c2 = layer.cell(xp, h, c)
            return T.concat([h2, c2], axis=-1)

        return _projected(step, rng), [xp, h, c, layer.w_hh, layer.bias]
    elif name == "bilstm":
        layer = nn.BiLSTM(nn.BiLstmConfig(4, 3)).initialize(seed)
        x = _leaf(rng, 2, 5, 4, scale=0.5)
    elif name == "attention":
        layer = nn.MultiHeadSelfAttention(8, 2).initialize(seed)
        x = _leaf(rng, 2, 5, 8)
        mask = np.zeros((2, 5), dtype=bool)
        mask[1, 3:] = True
        return _projected(lambda: layer(x, mask), rng), [x] + layer.parameters()
    elif name == "transformer_layer":
        layer = nn.TransformerEncoderLayer(nn.TransformerEncoderLayerConfig(8, 16, 2)).initialize(seed)
        x = _leaf(rng, 2, 5, 8)
        mask = np.zeros((2, 5), dtype=bool)
        mask[0, 4:] = True
        return _projected(lambda: layer(x, mask), rng), [x] + layer.parameters()
    elif name == "fusion_head":
        weights = FusionWeights().initialize(seed, prefix="fusion.")
        for p in weights.parameters():
            p.data = rng.uniform(1, 0.5, 1.5)
        head = Classifier(12).initialize(seed, prefix="classifier.")
        f_t, f_tf, f_s = (_leaf(rng, 3, 4, scale=0.5) for _ in range(3))
        labels = rng.integers(3, 2)
        fn = lambda: T.cross_entropy(head.logits(fuse(f_t, f_tf, f_s, weights)), labels)  # noqa: E731
        return fn, [f_t, f_tf, f_s] + weights.parameters() + head.parameters()
    else:
        raise KeyError(name)
    return _projected(lambda: layer(x), rng), [x] + layer.parameters()


LAYERS = ("linear", "layer_norm", "embedding", "conv1d", "conv2d_block", "lstm_cell", "bilstm",
          "attention", "transformer_layer", "fusion_head")


# ---------------------------------------------------------------- tiny model

TINY_AUDIO = 1600


def tiny_model_config() -> ModelConfig:
    """Every structural element of the desk model at toy widths."""
    return ModelConfig(
        time=TimeBranchConfig(conv_layers=((16, 10, 5), (16, 3, 2), (16, 3, 2), (16, 3, 2), (16, 3, 2),
                                           (16, 2, 2), (16, 2, 2)),
                              n_layers=2, hidden=8, ffn=12, heads=2, d_embed=4),
        tf=TFBranchConfig(n_bins=16, channels=(2, 3, 4), bilstm_hidden=3, d_embed=4),
        semantic=SemanticBranchConfig(vocab_size=12, d_model=8, n_layers=1, ffn=12, heads=2,
                                      max_seq_len=16, d_embed=4),
    )


def tiny_batch(rng: PCG32, n: int = 2, frames: int = 9) -> Batch:
    audio = rng.uniform(n * TINY_AUDIO, -0.9, 0.9).reshape(n, TINY_AUDIO)
    feats = rng.normal(n * frames * 16).reshape(n, frames, 16)
    tokens = rng.integers(n * 6, 12).reshape(n, 6)
    tokens[0, 4:] = 0
    return Batch(audio, feats, tokens, rng.integers(n, 2))


def _jitter(module: nn.Module, rng: PCG32) -> nn.Module:
    """Give zero-initialised tensors small random values so no ReLU sits exactly on its kink."""
    for p in module.parameters():
        if not np.any(p.data):
            p.data = 0.1 * rng.normal(p.data.size).reshape(p.shape)
    return module


def _branch_case(name: str, rng: PCG32, seed: int):
    cfg = tiny_model_config()
    batch = tiny_batch(rng)
    if name == "time_branch":
        branch = _jitter(TimeBranch(cfg.time).initialize(seed), rng)
        return _projected(lambda: branch(batch.audio), rng), branch.parameters()
    if name == "tf_branch":
        branch = _jitter(TFBranch(cfg.tf).initialize(seed), rng)
        return _projected(lambda: branch(batch.features), rng), branch.parameters()
    if name == "semantic_branch":
        branch = _jitter(SemanticBranch(cfg.semantic).initialize(seed), rng)
        return _projected(lambda: branch(batch.tokens), rng), branch.parameters()
    if name == "full_model":
        model = _jitter(FusionModel(cfg).initialize(seed), rng)
        for p in model.fusion.parameters():
            p.data = 1.0 + 0.5 * rng.normal(1)
        return (lambda: T.cross_entropy(model.logits(batch), batch.labels)), model.parameters()
    raise KeyError(name)


MODELS = ("time_branch", "tf_branch", "semantic_branch", "full_model")


# ---------------------------------------------------------------- suite

@dataclass
class GradCheckResult:
    name: str
    kind: str
    max_error: float
    threshold: float
    instances: int
    probed: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_error < self.threshold


def check_op(name: str, instances: int = 20, seed: int = 0, eps: float = 1e-5) -> GradCheckResult:
    worst = 0.0
    for i in range(instances):
        rng = PCG32(seed, stream_id("op", name, i))
        fn, leaves = _op_case(name, rng)
        worst = max(worst, T.grad_check(fn, leaves, eps))
    return GradCheckResult(name, "op", worst, LAYER_TOL, instances)


def check_layer(name: str, instances: int = 20, seed: int = 0, eps: float = 1e-5) -> GradCheckResult:
    worst = 0.0
    for i in range(instances):
        rng = PCG32(seed, stream_id("layer", name, i))
        fn, leaves = _layer_case(name, rng, seed + i)
        worst = max(worst, T.grad_check(fn, leaves, eps))
    return GradCheckResult(name, "layer", worst, LAYER_TOL, instances)


def check_model(name: str, instances: int = 2, seed: int = 0, eps: float = 1e-5,
                max_elements: int = 6) -> GradCheckResult:
    worst, probed, skipped = 0.0, 0, 0
    for i in range(instances):
        rng = PCG32(seed, stream_id("model", name, i))
        fn, leaves = _branch_case(name, rng, seed + i)
        stats = {}
        worst = max(worst, T.grad_check(fn, leaves, eps, max_elements=max_elements, seed=seed + i,
                                        skip_kinks=True, stats=stats))
        probed += stats["probed"]
        skipped += stats["skipped"]
    return GradCheckResult(name, "model", worst, MODEL_TOL, instances, probed, skipped)


def run_suite(instances: int = 20, model_instances: int = 2, seed: int = 0) -> list[GradCheckResult]:
    results = [check_op(op, instances, seed) for op in OPS]
    results += [check_layer(layer, instances, seed) for layer in LAYERS]
    results += [check_model(name, model_instances, seed) for name in MODELS]
    return results
