"""Minimal non-autoregressive TTS backbone with residual adapter sites."""

from __future__ import annotations

import numpy as np

from .nn import (
    ConfigError,
    ConvBlock,
    Embedding,
    Linear,
    Module,
    ShapeError,
    silu,
    silu_backward,
    sinusoidal_positions,
    softplus,
    softplus_backward,
)


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


class ResidualAdapter(Module):
    """``h + up(silu(down([h, e])))`` with ``up`` zero-initialised.

    The speaker embedding ``e`` (``1 x E``) is broadcast along time before the
    concatenation.  A zero ``up`` projection makes the adapter an exact no-op.
    """

    def __init__(self, dim: int, emb_dim: int, hidden: int, rng: np.random.Generator):
        self.dim = dim
        self.emb_dim = emb_dim
        self.down = Linear(dim + emb_dim, hidden, rng)
        self.up = Linear(hidden, dim, rng, zero_init=True)

    def forward(self, h, emb):
        emb = np.asarray(emb, dtype=np.float64).reshape(1, -1)
        if emb.shape[1] != self.emb_dim:
            raise ShapeError(f"adapter expects {self.emb_dim}-d embedding, got {emb.shape[1]}")
        x = np.concatenate([h, np.repeat(emb, h.shape[0], axis=0)], axis=1)
        a, cd = self.down.forward(x)
        a, cs = silu(a)
        u, cu = self.up.forward(a)
        return h + u, (cd, cs, cu)

    def backward(self, dy, ctx):
        """Returns ``(dh, demb)``."""
        cd, cs, cu = ctx
        dx = self.down.backward(silu_backward(self.up.backward(dy, cu), cs), cd)
        return dy + dx[:, : self.dim], dx[:, self.dim :].sum(axis=0, keepdims=True)


class TextEncoder(Module):
    def __init__(self, vocab_size: int, dim: int, layers: int, rng: np.random.Generator, width: int = 3):
        self.embed = Embedding(vocab_size, dim, rng)
        self.blocks = [ConvBlock(dim, width, rng) for _ in range(layers)]

    def forward(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ShapeError("text must be a non-empty 1-D token sequence")
        x, ce = self.embed.forward(tokens)
        x = x + sinusoidal_positions(x.shape[0], x.shape[1])
        ctxs = []
        for block in self.blocks:
            x, c = block.forward(x)
            ctxs.append(c)
        return x, (ce, ctxs)

    def backward(self, dy, ctx):
        ce, ctxs = ctx
        for block, c in zip(reversed(self.blocks), reversed(ctxs)):
            dy = block.backward(dy, c)
        self.embed.backward(dy, ce)
        return None


class DurationPredictor(Module):
    """Conv block -> (adapter site 0) -> linear -> softplus frames per token."""

    def __init__(self, dim: int, rng: np.random.Generator, init_frames: float = 6.0):
        self.block = ConvBlock(dim, 3, rng)
        self.head = Linear(dim, 1, rng, scale=0.01)
        self.head.bias.value[:] = np.log(np.expm1(init_frames))

    def forward(self, hidden, adapter: ResidualAdapter | None = None, emb=None):
        x, cb = self.block.forward(hidden)
        ca = None
        if adapter is not None:
            x, ca = adapter.forward(x, emb)
        raw, ch = self.head.forward(x)
        d, cp = softplus(raw[:, 0])
        return d, (cb, ca, ch, cp, adapter)

    def backward(self, dd, ctx):
        """Returns ``(dhidden, demb or None)``."""
        cb, ca, ch, cp, adapter = ctx
        dx = self.head.backward(softplus_backward(dd, cp)[:, None], ch)
        demb = None
        if adapter is not None:
            dx, demb = adapter.backward(dx, ca)
        return self.block.backward(dx, cb), demb


def upsample(hidden, durations):
    """Repeat row ``i`` of ``hidden`` ``round(durations[i])`` times.

    Rounding is half-away-from-zero.  Tokens rounding to zero frames vanish;
    all of them vanishing is an error.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    counts = round_half_away(durations)
    if counts.shape != (hidden.shape[0],):
        raise ShapeError(f"{counts.size} durations for {hidden.shape[0]} tokens")
    if np.any(counts < 0):
        raise ValueError("durations must be positive")
    if counts.sum() == 0:
        raise ValueError("all durations round to zero frames")
    return np.repeat(hidden, counts, axis=0), counts


def upsample_backward(dframes, counts):
    n = counts.shape[0]
    out = np.zeros((n, dframes.shape[1]), dtype=np.float64)
    owner = np.repeat(np.arange(n), counts)
    np.add.at(out, owner, dframes)
    return out


class FeatureDecoder(Module):
    def __init__(self, dim: int, feature_dim: int, layers: int, rng: np.random.Generator):
        if layers < 1:
            raise ConfigError("decoder needs at least one layer")
        self.blocks = [ConvBlock(dim, 3, rng) for _ in range(layers)]
        self.head = Linear(dim, feature_dim, rng)

    def forward(self, frames, adapters=None, embs=None):
        """``adapters``/``embs`` are per-layer lists or ``None`` (adapter-free)."""
        if adapters is not None:
            if len(adapters) != len(self.blocks) or embs is None or len(embs) != len(self.blocks):
                got = None if embs is None else len(embs)
                raise ConfigError(
                    f"decoder has {len(self.blocks)} layers; got {len(adapters)} adapters and {got} embeddings"
                )
        x = frames
        ctxs = []
        for i, block in enumerate(self.blocks):
            x, cb = block.forward(x)
            ca = None
            if adapters is not None:
                x, ca = adapters[i].forward(x, embs[i])
            ctxs.append((cb, ca))
        y, ch = self.head.forward(x)
        return y, (ctxs, ch, adapters)

    def backward(self, dy, ctx):
        """Returns ``(dframes, list of demb or None)``."""
        ctxs, ch, adapters = ctx
        dx = self.head.backward(dy, ch)
        dembs = [None] * len(self.blocks)
        for i in reversed(range(len(self.blocks))):
            cb, ca = ctxs[i]
            if adapters is not None:
                dx, dembs[i] = adapters[i].backward(dx, ca)
            dx = self.blocks[i].backward(dx, cb)
        return dx, dembs
