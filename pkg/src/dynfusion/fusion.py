"""Dynamic fusion block, softmax classifier, and the assembled model.

Each branch embedding is multiplied by its own learnable scalar (all start
at 1.0) before concatenation in the fixed order time, TF, semantic; a
single fully connected layer with softmax produces the two class
probabilities.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .branches import (SemanticBranch, SemanticBranchConfig, TFBranch, TFBranchConfig,
                       TimeBranch, TimeBranchConfig)
from .errors import ShapeError
from .tensor import Tensor, no_grad

MODALITIES = ("t", "tf", "s")
N_CLASSES = 2


class FusionWeights(nn.Module):
    def __init__(self):
        self.w_t = nn.constant((1,), 1.0)
        self.w_tf = nn.constant((1,), 1.0)
        self.w_s = nn.constant((1,), 1.0)

    def values(self) -> dict:
        return {m: float(getattr(self, f"w_{m}").data[0]) for m in MODALITIES}

    def param_count(self) -> int:
        return 3


def fuse(f_t: Tensor, f_tf: Tensor, f_s: Tensor, weights: FusionWeights) -> Tensor:
    """concat(w_t * f_t, w_tf * f_tf, w_s * f_s) along the last axis."""
    if not (f_t.shape == f_tf.shape == f_s.shape):
        raise ShapeError(f"branch embeddings differ in shape: {f_t.shape}, {f_tf.shape}, {f_s.shape}")
    return T.concat([f_t * weights.w_t, f_tf * weights.w_tf, f_s * weights.w_s], axis=-1)


class Classifier(nn.Module):
    """logits = fused @ W.T + b with W of shape (2, 3 * d_embed)."""

    def __init__(self, n_in: int, n_classes: int = N_CLASSES):
        self.n_in, self.n_classes = n_in, n_classes
        self.weight = nn.glorot((n_classes, n_in), n_in, n_classes)
        self.bias = nn.zeros((n_classes,))

    def logits(self, fused: Tensor) -> Tensor:
        if fused.shape[-1] != self.n_in:
            raise ShapeError(f"classifier expects {self.n_in} features, got {fused.shape}")
        squeeze = fused.ndim == 1
        x = T.reshape(fused, (1, -1)) if squeeze else fused
        out = T.matmul(x, T.transpose(self.weight)) + self.bias
        return T.index(out, 0) if squeeze else out

    def forward(self, fused: Tensor) -> Tensor:
        return T.softmax(self.logits(fused))

    def param_count(self) -> int:
        return nn.linear_params(self.n_in, self.n_classes)


def classify(fused: Tensor, classifier: Classifier) -> Tensor:
    return classifier(fused)


@dataclass(frozen=True)
class ModelConfig:
    time: TimeBranchConfig = field(default_factory=TimeBranchConfig)
    tf: TFBranchConfig = field(default_factory=TFBranchConfig)
    semantic: SemanticBranchConfig = field(default_factory=SemanticBranchConfig)
    feature: str = "mel"

    def __post_init__(self):
        dims = {self.time.d_embed, self.tf.d_embed, self.semantic.d_embed}
        if len(dims) != 1:
            raise ShapeError(f"all branches must share d_embed, got {sorted(dims)}")
        if self.feature not in ("mel", "mfcc"):
            raise ShapeError(f"feature must be mel or mfcc, got {self.feature!r}")

    @property
    def d_embed(self) -> int:
        return self.time.d_embed

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(time=TimeBranchConfig(**d["time"]), tf=TFBranchConfig(**d["tf"]),
                   semantic=SemanticBranchConfig(**d["semantic"]), feature=d.get("feature", "mel"))


@dataclass
class Batch:
    """Equal-length samples stacked along a leading axis."""

    audio: np.ndarray        # (B, N)
    features: np.ndarray     # (B, frames, bins)
    tokens: np.ndarray       # (B, L) int
    labels: np.ndarray | None = None

    def __len__(self):
        return self.audio.shape[0]


class FusionModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.time = TimeBranch(cfg.time)
        self.tf = TFBranch(cfg.tf)
        self.semantic = SemanticBranch(cfg.semantic)
        self.fusion = FusionWeights()
        self.classifier = Classifier(3 * cfg.d_embed)

    def embeddings(self, batch: Batch, cached: dict | None = None) -> dict:
        """Branch outputs keyed 't', 'tf', 's'; cached entries are reused as constants."""
        cached = cached or {}
        return {
            "t": cached["t"] if "t" in cached else self.time(batch.audio),
            "tf": cached["tf"] if "tf" in cached else self.tf(batch.features),
            "s": cached["s"] if "s" in cached else self.semantic(batch.tokens),
        }

    def logits(self, batch: Batch, cached: dict | None = None, drop: tuple = ()) -> Tensor:
        """Class logits; modalities listed in ``drop`` contribute an all-zero block."""
        emb = self.embeddings(batch, cached)
        for m in drop:
            emb[m] = Tensor(np.zeros(emb[m].shape))
        return self.classifier.logits(fuse(emb["t"], emb["tf"], emb["s"], self.fusion))

    def forward(self, batch: Batch, cached: dict | None = None) -> Tensor:
        return T.softmax(self.logits(batch, cached))

    def predict_proba(self, batch: Batch, drop: tuple = ()) -> np.ndarray:
        with no_grad():
            return T.softmax(self.logits(batch, drop=drop)).data

    def modality_importance(self, emb: dict) -> dict:
        """|w_m| * ||f_m||_2 averaged over the rows of each embedding batch."""
        w = self.fusion.values()
        return {m: float(abs(w[m]) * np.linalg.norm(np.asarray(emb[m].data if isinstance(emb[m], Tensor)
                                                                 else emb[m]), axis=-1).mean())
                for m in MODALITIES}

    def param_count(self) -> int:
        return (self.time.param_count() + self.tf.param_count() + self.semantic.param_count()
                + self.fusion.param_count() + self.classifier.param_count())


def build_model(cfg: ModelConfig = ModelConfig(), seed: int = 0) -> FusionModel:
    return FusionModel(cfg).initialize(seed)
