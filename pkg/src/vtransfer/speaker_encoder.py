"""Reference encoder: conv stack -> transformer stack -> hidden sequence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    ConfigError,
    Conv1d,
    Linear,
    LayerNorm,
    Module,
    ShapeError,
    TransformerLayer,
    l2_normalize,
    l2_normalize_backward,
    mean_pool,
    mean_pool_backward,
    silu,
    silu_backward,
    sinusoidal_positions,
)


@dataclass(frozen=True)
class SpeakerEncoderConfig:
    input_dim: int = 32
    conv_layers: int = 3
    conv_channels: int = 64
    conv_width: int = 3
    transformer_layers: int = 2
    embed_dim: int = 64
    attention_heads: int = 4
    ffn_dim: int = 128
    delta_features: bool = True  # append |x_t - x_{t-1}| channels to the input

    def __post_init__(self):
        counts = (self.input_dim, self.conv_layers, self.conv_channels, self.conv_width,
                  self.transformer_layers, self.embed_dim, self.attention_heads, self.ffn_dim)
        if min(counts) < 1:
            raise ConfigError(f"all encoder sizes must be >= 1: {self}")
        if self.embed_dim % self.attention_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by attention_heads {self.attention_heads}"
            )

    @classmethod
    def paper_scale(cls) -> "SpeakerEncoderConfig":
        """5 convs with 3x1 filters, 8 transformer layers, 1024-d output, 128 mel bins."""
        return cls(input_dim=128, conv_layers=5, conv_channels=1024, transformer_layers=8,
                   embed_dim=1024, attention_heads=8, ffn_dim=4096)


@dataclass
class SpeakerEmbedding:
    vectors: np.ndarray  # k x E
    pooled: bool

    def __post_init__(self):
        if self.pooled:
            if self.vectors.shape[0] != 1:
                raise ShapeError(f"pooled embedding must have k=1, got {self.vectors.shape[0]}")
            norm = float(np.linalg.norm(self.vectors))
            if abs(norm - 1.0) > 1e-6:
                raise ValueError(f"pooled embedding must be unit norm, got {norm}")


class SpeakerEncoder(Module):
    def __init__(self, config: SpeakerEncoderConfig, rng: np.random.Generator):
        self.config = config
        first = 2 * config.input_dim if config.delta_features else config.input_dim
        dims = [first] + [config.conv_channels] * config.conv_layers
        self.convs = [Conv1d(dims[i], dims[i + 1], config.conv_width, rng)
                      for i in range(config.conv_layers)]
        self.proj = Linear(config.conv_channels, config.embed_dim, rng)
        self.layers = [TransformerLayer(config.embed_dim, config.attention_heads, config.ffn_dim, rng)
                       for _ in range(config.transformer_layers)]
        self.norm = LayerNorm(config.embed_dim)

    def forward(self, reference):
        """``T x D_in`` features -> ``T x E`` hidden sequence."""
        x = np.asarray(reference, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ShapeError(f"reference must be a non-empty T x D array, got shape {x.shape}")
        if x.shape[1] != self.config.input_dim:
            raise ShapeError(f"reference has D={x.shape[1]} bands, encoder expects {self.config.input_dim}")
        cd = None
        if self.config.delta_features:
            x, cd = delta_forward(x)
        ctxs = []
        for conv in self.convs:
            x, cc = conv.forward(x)
            x, cs = silu(x)
            ctxs.append((cc, cs))
        x, cp = self.proj.forward(x)
        x = x + sinusoidal_positions(x.shape[0], x.shape[1])
        lctx = []
        for layer in self.layers:
            x, cl = layer.forward(x)
            lctx.append(cl)
        x, cn = self.norm.forward(x)
        return x, (ctxs, cp, lctx, cn, cd)

    def backward(self, dy, ctx):
        ctxs, cp, lctx, cn, cd = ctx
        dx = self.norm.backward(dy, cn)
        for layer, cl in zip(reversed(self.layers), reversed(lctx)):
            dx = layer.backward(dx, cl)
        dx = self.proj.backward(dx, cp)
        for conv, (cc, cs) in zip(reversed(self.convs), reversed(ctxs)):
            dx = conv.backward(silu_backward(dx, cs), cc)
        if cd is not None:
            dx = delta_backward(dx, cd)
        return dx

    def encode_sequence(self, reference) -> np.ndarray:
        return self.forward(reference)[0]

    def embed(self, reference) -> SpeakerEmbedding:
        return pool_and_normalize(self.encode_sequence(reference))


def delta_forward(x):
    """``T x D`` -> ``T x 2D``: frames followed by magnitude deltas (zero at t=0).

    Mean-pooling loses timing; deltas let the conv stack see token
    transitions, which is how speaking rate can reach the embedding.
    """
    diff = np.zeros_like(x)
    diff[1:] = x[1:] - x[:-1]
    return np.concatenate([x, np.abs(diff)], axis=1), np.sign(diff)


def delta_backward(dy, sign):
    d = sign.shape[1]
    dx = dy[:, :d].copy()
    g = dy[:, d:] * sign
    dx[1:] += g[1:]
    dx[:-1] -= g[1:]
    return dx


def pool_and_normalize(hidden) -> SpeakerEmbedding:
    """Mean over time followed by L2 normalization."""
    return SpeakerEmbedding(pool_normalize_forward(hidden)[0], pooled=True)


def pool_normalize_forward(hidden):
    hidden = np.asarray(hidden, dtype=np.float64)
    pooled = mean_pool(hidden)
    y, cn = l2_normalize(pooled)
    return y, (hidden.shape[0], cn)


def pool_normalize_backward(dy, ctx):
    length, cn = ctx
    return mean_pool_backward(l2_normalize_backward(dy, cn), length)
