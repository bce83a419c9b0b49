"""The three embedding branches, encoder truncation, and full-scale sizing.

* time branch: strided 1-D conv feature encoder over the raw waveform
  (320-sample total stride, one frame per 20 ms), transformer layers,
  mean pooling over time, then a linear alignment layer.
* TF branch: CRNN over a log-Mel (or MFCC) matrix; three conv blocks, the
  frequency axis folded into channels, a BiLSTM, then a linear layer.
* semantic branch: character embedding + positions, transformer layers
  with a padding mask, the leading [CLS] position, then a linear layer.
"""

from __future__ import annotations

import copy
import re
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as T
from .checkpoint import Checkpoint
from .dsp import AudioBuffer, FeatureMatrix
from .errors import ConfigError, InvalidInputError
from .tensor import Tensor

PAD_ID, UNK_ID, CLS_ID = 0, 1, 2

DEFAULT_CONV_LAYERS = ((64, 10, 5), (64, 3, 2), (64, 3, 2), (64, 3, 2), (64, 3, 2), (64, 2, 2), (64, 2, 2))


@dataclass(frozen=True)
class TimeBranchConfig:
    conv_layers: tuple = DEFAULT_CONV_LAYERS  # (channels, kernel, stride)
    n_layers: int = 4
    hidden: int = 64
    ffn: int = 256
    heads: int = 4
    d_embed: int = 64

    def __post_init__(self):
        object.__setattr__(self, "conv_layers", tuple(tuple(int(v) for v in c) for c in self.conv_layers))
        if self.total_stride != 320:
            raise ConfigError(f"feature encoder stride must total 320, got {self.total_stride}")
        if self.n_layers < 1:
            raise ConfigError("time branch needs at least one transformer layer")
        nn.TransformerEncoderLayerConfig(self.hidden, self.ffn, self.heads)

    @property
    def total_stride(self) -> int:
        return int(np.prod([s for _, _, s in self.conv_layers]))

    @property
    def receptive_field(self) -> int:
        field_size = 1
        for _, kernel, stride in reversed(self.conv_layers):
            field_size = (field_size - 1) * stride + kernel
        return field_size

    def frames_for(self, n_samples: int) -> int:
        n = n_samples
        for _, kernel, stride in self.conv_layers:
            n = (n - kernel) // stride + 1
        return n


@dataclass(frozen=True)
class TFBranchConfig:
    n_bins: int = 128
    channels: tuple = (16, 32, 64)
    bilstm_hidden: int = 64
    d_embed: int = 64
    n_blocks: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.n_blocks != 3 or len(self.channels) != 3:
            raise ConfigError("the CRNN uses exactly three conv blocks")
        if self.n_bins < 8:
            raise ConfigError("need at least 8 frequency bins for three poolings")

    @property
    def lstm_input(self) -> int:
        return self.channels[-1] * (self.n_bins // 8)


@dataclass(frozen=True)
class SemanticBranchConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 1
    ffn: int = 256
    heads: int = 4
    max_seq_len: int = 256
    d_embed: int = 64

    def __post_init__(self):
        if self.vocab_size <= CLS_ID:
            raise ConfigError("vocabulary must include pad, unk and cls ids")
        if self.n_layers < 1:
            raise ConfigError("semantic branch needs at least one transformer layer")
        nn.TransformerEncoderLayerConfig(self.d_model, self.ffn, self.heads)


# ---------------------------------------------------------------- analytic counts

def time_branch_params(cfg: TimeBranchConfig) -> int:
    total, c_in = 0, 1
    for channels, kernel, _ in cfg.conv_layers:
        total += nn.conv1d_params(c_in, channels, kernel)
        c_in = channels
    total += nn.layer_norm_params(c_in) + nn.linear_params(c_in, cfg.hidden)
    total += cfg.n_layers * nn.transformer_layer_params(cfg.hidden, cfg.ffn)
    return total + nn.linear_params(cfg.hidden, cfg.d_embed)


def tf_branch_params(cfg: TFBranchConfig) -> int:
    total, c_in = 0, 1
    for c_out in cfg.channels:
        total += nn.conv2d_params(c_in, c_out, 3)
        c_in = c_out
    total += nn.bilstm_params(cfg.lstm_input, cfg.bilstm_hidden)
    return total + nn.linear_params(2 * cfg.bilstm_hidden, cfg.d_embed)


def semantic_branch_params(cfg: SemanticBranchConfig) -> int:
    return (nn.embedding_params(cfg.vocab_size, cfg.d_model) + nn.layer_norm_params(cfg.d_model)
            + cfg.n_layers * nn.transformer_layer_params(cfg.d_model, cfg.ffn)
            + nn.linear_params(cfg.d_model, cfg.d_embed))


# ---------------------------------------------------------------- branches

def _audio_batch(audio) -> np.ndarray:
    if isinstance(audio, AudioBuffer):
        return audio.samples[None, :]
    arr = np.asarray(audio, dtype=np.float64)
    if arr.ndim == 1:
        arr = AudioBuffer(arr).samples[None, :]
    if arr.ndim != 2:
        raise InvalidInputError(f"audio batch must be (B, N), got {arr.shape}")
    return arr


class TimeBranch(nn.Module):
    def __init__(self, cfg: TimeBranchConfig = TimeBranchConfig()):
        self.cfg = cfg
        convs, c_in = [], 1
        for channels, kernel, stride in cfg.conv_layers:
            convs.append(nn.Conv1d(c_in, channels, kernel, stride))
            c_in = channels
        self.convs = convs
        self.feature_norm = nn.LayerNorm(c_in)
        self.feature_proj = nn.Linear(c_in, cfg.hidden)
        layer_cfg = nn.TransformerEncoderLayerConfig(cfg.hidden, cfg.ffn, cfg.heads)
        self.layers = [nn.TransformerEncoderLayer(layer_cfg) for _ in range(cfg.n_layers)]
        self.align = nn.Linear(cfg.hidden, cfg.d_embed)

    def encode(self, audio) -> Tensor:
        """Frame-level encoder states, shape (B, frames, hidden)."""
        x = _audio_batch(audio)
        if x.shape[1] < self.cfg.receptive_field:
            raise InvalidInputError(f"audio has {x.shape[1]} samples, fewer than the "
                                    f"{self.cfg.receptive_field}-sample receptive field")
        h = Tensor(x[:, None, :])
        for conv in self.convs:
            h = T.relu(conv(h))
        h = self.feature_proj(self.feature_norm(T.transpose(h, (0, 2, 1))))
        h = h + Tensor(nn.sinusoidal_positions(h.shape[1], self.cfg.hidden))
        for layer in self.layers:
            h = layer(h)
        return h

    def forward(self, audio) -> Tensor:
        """(B, d_embed) embeddings."""
        return self.align(T.mean(self.encode(audio), axis=1))

    def param_count(self) -> int:
        return time_branch_params(self.cfg)


class TFBranch(nn.Module):
    def __init__(self, cfg: TFBranchConfig = TFBranchConfig()):
        self.cfg = cfg
        blocks, c_in = [], 1
        for c_out in cfg.channels:
            blocks.append(nn.Conv2dBlock(c_in, c_out))
            c_in = c_out
        self.blocks = blocks
        self.rnn = nn.BiLSTM(nn.BiLstmConfig(cfg.lstm_input, cfg.bilstm_hidden))
        self.fc = nn.Linear(2 * cfg.bilstm_hidden, cfg.d_embed)

    def conv_features(self, features) -> Tensor:
        """Conv stack output, shape (B, C, F // 8, T // 8)."""
        if isinstance(features, FeatureMatrix):
            if features.kind not in ("log_mel", "mfcc"):
                raise InvalidInputError(f"TF branch takes log_mel or mfcc, not {features.kind}")
            features = features.values[None]
        x = np.asarray(features, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != self.cfg.n_bins:
            raise InvalidInputError(f"expected (B, frames, {self.cfg.n_bins}) features, got {x.shape}")
        if x.shape[1] < 8:
            raise InvalidInputError(f"need at least 8 frames for three poolings, got {x.shape[1]}")
        h = Tensor(np.ascontiguousarray(x.transpose(0, 2, 1)[:, None]))
        for block in self.blocks:
            h = block(h)
        return h

    def sequence(self, features) -> Tensor:
        """Conv output with frequency folded into channels: (B, T', C * F')."""
        h = self.conv_features(features)
        bsz, chans, freq, steps = h.shape
        return T.reshape(T.transpose(h, (0, 3, 1, 2)), (bsz, steps, chans * freq))

    def forward(self, features) -> Tensor:
        return self.fc(self.rnn(self.sequence(features)))

    def param_count(self) -> int:
        return tf_branch_params(self.cfg)


def prepare_ids(ids, cfg: SemanticBranchConfig) -> tuple[np.ndarray, np.ndarray]:
    """Map out-of-range ids to unk, drop all-pad trailing columns, prepend cls.

    Returns (ids with cls, padding mask), both (B, L + 1).
    """
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.shape[1] > cfg.max_seq_len:
        raise InvalidInputError(f"sequence length {arr.shape[1]} exceeds {cfg.max_seq_len}")
    arr = np.where((arr < 0) | (arr >= cfg.vocab_size), UNK_ID, arr)
    used = np.flatnonzero((arr != PAD_ID).any(axis=0))
    arr = arr[:, :used[-1] + 1] if used.size else arr[:, :0]
    arr = np.concatenate([np.full((arr.shape[0], 1), CLS_ID), arr], axis=1)
    return arr, arr == PAD_ID


class SemanticBranch(nn.Module):
    def __init__(self, cfg: SemanticBranchConfig = SemanticBranchConfig()):
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.embed_norm = nn.LayerNorm(cfg.d_model)
        layer_cfg = nn.TransformerEncoderLayerConfig(cfg.d_model, cfg.ffn, cfg.heads)
        self.layers = [nn.TransformerEncoderLayer(layer_cfg) for _ in range(cfg.n_layers)]
        self.align = nn.Linear(cfg.d_model, cfg.d_embed)

    def forward(self, ids) -> Tensor:
        ids, mask = prepare_ids(ids, self.cfg)
        h = self.embed(ids) + Tensor(nn.sinusoidal_positions(ids.shape[1], self.cfg.d_model))
        h = self.embed_norm(h)
        for layer in self.layers:
            h = layer(h, mask)
        return self.align(T.index(h, (slice(None), 0)))

    def param_count(self) -> int:
        return semantic_branch_params(self.cfg)


# ---------------------------------------------------------------- truncation

_LAYER_RE = re.compile(r"^(?P<prefix>.*?layers\.)(?P<idx>\d+)\.")


def encoder_layer_count(ckpt: Checkpoint, prefix: str) -> int:
    indices = set()
    for name in ckpt.names():
        if name.startswith(prefix):
            head = name[len(prefix):].split(".", 1)[0]
            if head.isdigit():
                indices.add(int(head))
    if indices and indices != set(range(len(indices))):
        raise InvalidInputError(f"layer indices under {prefix!r} are not contiguous: {sorted(indices)}")
    return len(indices)


def truncate_encoder(ckpt: Checkpoint, k: int, prefix: str = "time.layers.") -> Checkpoint:
    """Keep transformer layers 0..k-1 under ``prefix``; every other record is copied verbatim."""
    n_layers = encoder_layer_count(ckpt, prefix)
    if n_layers == 0:
        raise InvalidInputError(f"no encoder layers found under {prefix!r}")
    if not 1 <= k <= n_layers:
        raise InvalidInputError(f"cannot keep {k} of {n_layers} layers")
    if k == n_layers:
        return Checkpoint(records={n: a.copy() for n, a in ckpt.records.items()},
                          metadata=copy.deepcopy(ckpt.metadata))
    out = Checkpoint(metadata=copy.deepcopy(ckpt.metadata))
    for name, arr in ckpt.records.items():
        if name.startswith(prefix):
            idx = int(name[len(prefix):].split(".", 1)[0])
            if idx >= k:
                continue
        out.add(name, arr.copy())
    out.metadata.setdefault("truncation", []).append({"prefix": prefix, "from_layers": n_layers,
                                                       "to_layers": k})
    branch = prefix.split(".", 1)[0]
    model_cfg = out.metadata.get("model_config", {})
    if isinstance(model_cfg.get(branch), dict) and "n_layers" in model_cfg[branch]:
        model_cfg[branch]["n_layers"] = k
    return out


# ---------------------------------------------------------------- full-scale sizing

@dataclass(frozen=True)
class FullScaleTimeEncoder:
    """Large (XLSR-53 style) waveform encoder dimensions."""

    conv_channels: int = 512
    conv_layers: tuple = ((10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2))
    hidden: int = 1024
    ffn: int = 4096
    n_layers: int = 24
    pos_conv_kernel: int = 128
    pos_conv_groups: int = 16

    def non_layer_params(self) -> int:
        c = self.conv_channels
        total, c_in = 0, 1
        for kernel, _ in self.conv_layers:
            total += nn.conv1d_params(c_in, c, kernel) + nn.layer_norm_params(c)
            c_in = c
        total += nn.layer_norm_params(c) + nn.linear_params(c, self.hidden)  # feature projection
        total += (self.hidden * (self.hidden // self.pos_conv_groups) * self.pos_conv_kernel
                  + self.hidden + self.pos_conv_kernel)  # weight-normed positional conv
        total += nn.layer_norm_params(self.hidden)  # encoder input norm
        total += self.hidden  # learned mask embedding
        return total

    def params(self, n_layers: int | None = None) -> int:
        n = self.n_layers if n_layers is None else n_layers
        return self.non_layer_params() + n * nn.transformer_layer_params(self.hidden, self.ffn)


@dataclass(frozen=True)
class FullScaleTextEncoder:
    """BERT-base-Chinese dimensions (character vocabulary of 21128)."""

    vocab: int = 21128
    max_positions: int = 512
    token_types: int = 2
    hidden: int = 768
    ffn: int = 3072
    n_layers: int = 12

    def non_layer_params(self) -> int:
        h = self.hidden
        embeddings = (self.vocab + self.max_positions + self.token_types) * h + nn.layer_norm_params(h)
        return embeddings + nn.linear_params(h, h)  # pooler

    def params(self, n_layers: int | None = None) -> int:
        n = self.n_layers if n_layers is None else n_layers
        return self.non_layer_params() + n * nn.transformer_layer_params(self.hidden, self.ffn)


@dataclass(frozen=True)
class FullScaleHeads:
    d_embed: int = 256
    n_mels: int = 128
    crnn_channels: tuple = (16, 32, 64)
    bilstm_hidden: int = 128
    n_classes: int = 2


LIGHTWEIGHT_LAYERS = {"time": 4, "semantic": 1}


def count_fullscale_params(role: str, scale: str, time_enc: FullScaleTimeEncoder = FullScaleTimeEncoder(),
                           text_enc: FullScaleTextEncoder = FullScaleTextEncoder()) -> int:
    """Encoder size at published dimensions; scale is 'full' or 'lightweight'."""
    if scale not in ("full", "lightweight"):
        raise InvalidInputError(f"unknown scale {scale!r}")
    encoder = {"time": time_enc, "semantic": text_enc}.get(role)
    if encoder is None:
        raise InvalidInputError(f"unknown role {role!r}")
    return encoder.params(None if scale == "full" else LIGHTWEIGHT_LAYERS[role])


def count_system_params(system: str, heads: FullScaleHeads = FullScaleHeads()) -> dict:
    """Component breakdown for 'baseline', 'baseline_lightweight' or 'proposed'."""
    if system not in ("baseline", "baseline_lightweight", "proposed"):
        raise InvalidInputError(f"unknown system {system!r}")
    scale = "full" if system == "baseline" else "lightweight"
    d = heads.d_embed
    parts = {
        "time_encoder": count_fullscale_params("time", scale),
        "semantic_encoder": count_fullscale_params("semantic", scale),
        "time_align": nn.linear_params(FullScaleTimeEncoder().hidden, d),
        "semantic_align": nn.linear_params(FullScaleTextEncoder().hidden, d),
    }
    if system == "proposed":
        crnn = TFBranchConfig(n_bins=heads.n_mels, channels=heads.crnn_channels,
                              bilstm_hidden=heads.bilstm_hidden, d_embed=d)
        parts["tf_branch"] = tf_branch_params(crnn)
        parts["fusion_weights"] = 3
        parts["classifier"] = nn.linear_params(3 * d, heads.n_classes)
    else:
        parts["classifier"] = nn.linear_params(2 * d, heads.n_classes)
    parts["total"] = sum(parts.values())
    return parts


def reduction(small: int, large: int) -> float:
    return 1.0 - small / large


def config_to_dict(cfg) -> dict:
    return asdict(cfg)
