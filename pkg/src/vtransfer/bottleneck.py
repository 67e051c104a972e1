"""The four interchangeable bottlenecks between speaker encoder and adapters.

Every bottleneck maps the encoder output to one ``1 x E`` embedding per
adapter site.  GST variants form each embedding as a convex combination of
raw bank rows (keys and queries are projected, values are not), so the
returned combined weights reconstruct the output exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import (
    ConfigError,
    Conv1d,
    Linear,
    Module,
    NonFiniteError,
    Parameter,
    ShapeError,
    dot_product_attention,
    dot_product_attention_backward,
    init_normal,
    l2_normalize,
    l2_normalize_backward,
    silu,
    silu_backward,
)

KINDS = ("vae", "shared_gst", "multi_gst", "segment_gst")
ADAPTER_SITES = 7  # 1 duration predictor + 6 feature decoder layers


@dataclass
class VaeParams:
    mu: np.ndarray
    log_var: np.ndarray
    kl_weight: float = 1e-4


@dataclass
class BottleneckOutput:
    embeddings: list[np.ndarray]
    aux_loss: float = 0.0
    attention_weights: list[np.ndarray] | None = None
    vae: VaeParams | None = None
    extras: dict = field(default_factory=dict)

    def per_site(self, n_sites: int = ADAPTER_SITES) -> list[np.ndarray]:
        """Embeddings for every adapter site, replicating a shared one."""
        if len(self.embeddings) == 1:
            return [self.embeddings[0]] * n_sites
        if len(self.embeddings) != n_sites:
            raise ConfigError(f"bottleneck gave {len(self.embeddings)} embeddings for {n_sites} sites")
        return list(self.embeddings)


def vae_kl(mu: np.ndarray, log_var: np.ndarray) -> float:
    """KL(N(mu, diag exp(log_var)) || N(0, I)).

    ``expm1(v) - v`` rather than ``exp(v) - 1 - v``: the latter can round to a
    tiny negative number for small ``v``.
    """
    return float(0.5 * np.sum(mu * mu + (np.expm1(log_var) - log_var)))


def vae_kl_grad(mu: np.ndarray, log_var: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return mu, 0.5 * np.expm1(log_var)


class TokenBank(Module):
    """Learned ``M x E`` bank queried by multi-head dot-product attention."""

    def __init__(self, size: int, dim: int, heads: int, rng: np.random.Generator):
        if size < 2:
            raise ConfigError(f"token bank needs M >= 2 vectors, got {size}")
        if heads < 1 or dim % heads:
            raise ConfigError(f"embedding dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.bank = Parameter(init_normal(rng, (size, dim), 0.5))
        self.query = Linear(dim, dim, rng, bias=False, scale=1.0)
        self.key = Linear(dim, dim, rng, bias=False)

    @property
    def size(self) -> int:
        return self.bank.shape[0]

    def forward(self, queries):
        q, cq = self.query.forward(queries)
        k, ck = self.key.forward(self.bank.value)
        out, weights, ca = dot_product_attention(q, k, self.bank.value, self.heads)
        return out, weights.mean(axis=0), (cq, ck, ca)

    def backward(self, dout, ctx):
        cq, ck, ca = ctx
        dq, dk, dvalues = dot_product_attention_backward(dout, ca)
        self.bank.grad += dvalues + self.key.backward(dk, ck)
        return self.query.backward(dq, cq)


class Bottleneck(Module):
    kind: str = ""
    uses_sequence = False
    n_outputs = 1

    def forward(self, hidden, pooled, mode: str = "infer", rng=None):
        raise NotImplementedError

    def backward(self, d_embeddings, ctx, aux_weight: float = 0.0):
        """Returns ``(d_hidden or None, d_pooled or None)``."""
        raise NotImplementedError


def _check_pooled(pooled) -> np.ndarray:
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.ndim != 2 or pooled.shape[0] != 1:
        raise ShapeError(f"pooled input must be 1 x E, got shape {pooled.shape}")
    return pooled


class VaeBottleneck(Bottleneck):
    kind = "vae"

    def __init__(self, dim: int, rng: np.random.Generator, kl_weight: float = 1e-4):
        if kl_weight < 0:
            raise ConfigError(f"KL weight must be >= 0, got {kl_weight}")
        self.kl_weight = kl_weight
        self.mu = Linear(dim, dim, rng)
        self.log_var = Linear(dim, dim, rng, scale=0.1 / math.sqrt(dim))

    def forward(self, hidden, pooled, mode: str = "infer", rng=None):
        pooled = _check_pooled(pooled)
        mu, cm = self.mu.forward(pooled)
        lv, cl = self.log_var.forward(pooled)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(lv))):
            raise NonFiniteError("VAE posterior parameters are not finite")
        if mode == "train":
            if rng is None:
                raise ValueError("train-mode VAE sampling needs an explicit seeded rng")
            noise = rng.standard_normal(mu.shape)
            z = mu + np.exp(0.5 * lv) * noise
        elif mode == "infer":
            noise = None
            z = mu.copy()
        else:
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        out = BottleneckOutput([z], aux_loss=vae_kl(mu, lv),
                               vae=VaeParams(mu, lv, self.kl_weight))
        return out, (cm, cl, mu, lv, noise)

    def backward(self, d_embeddings, ctx, aux_weight: float = 0.0):
        cm, cl, mu, lv, noise = ctx
        dz = np.sum(d_embeddings, axis=0)
        gmu, glv = vae_kl_grad(mu, lv)
        dmu = dz + aux_weight * gmu
        dlv = aux_weight * glv
        if noise is not None:
            dlv = dlv + dz * noise * 0.5 * np.exp(0.5 * lv)
        return None, self.mu.backward(dmu, cm) + self.log_var.backward(dlv, cl)


class SharedGST(Bottleneck):
    kind = "shared_gst"

    def __init__(self, dim: int, bank_size: int, heads: int, rng: np.random.Generator):
        self.gst = TokenBank(bank_size, dim, heads, rng)

    def forward(self, hidden, pooled, mode: str = "infer", rng=None):
        pooled = _check_pooled(pooled)
        out, w, ctx = self.gst.forward(pooled)
        return BottleneckOutput([out], attention_weights=[w]), ctx

    def backward(self, d_embeddings, ctx, aux_weight: float = 0.0):
        return None, self.gst.backward(np.sum(d_embeddings, axis=0), ctx)


class MultiGST(Bottleneck):
    kind = "multi_gst"

    def __init__(self, dim: int, bank_size: int, heads: int, rng: np.random.Generator,
                 sites: int = ADAPTER_SITES):
        if sites != ADAPTER_SITES:
            raise ConfigError(f"MultiGST needs exactly {ADAPTER_SITES} banks (one per adapter site), got {sites}")
        self.banks = [TokenBank(bank_size, dim, heads, rng) for _ in range(sites)]
        self.n_outputs = sites

    def forward(self, hidden, pooled, mode: str = "infer", rng=None):
        pooled = _check_pooled(pooled)
        outs, weights, ctxs = [], [], []
        for bank in self.banks:
            o, w, c = bank.forward(pooled)
            outs.append(o)
            weights.append(w)
            ctxs.append(c)
        return BottleneckOutput(outs, attention_weights=weights), ctxs

    def backward(self, d_embeddings, ctx, aux_weight: float = 0.0):
        if len(d_embeddings) != len(self.banks):
            raise ConfigError(f"{len(d_embeddings)} gradients for {len(self.banks)} banks")
        dp = None
        for bank, d, c in zip(self.banks, d_embeddings, ctx):
            g = bank.backward(d, c)
            dp = g if dp is None else dp + g
        return None, dp


class SegmentGST(Bottleneck):
    """Two stride-4 width-8 convs (x16 shorter), per-position GST, then average.

    Each reduced position is L2-normalized before it queries the bank, the
    same scale the other GST variants see from the pooled embedding.  Without
    it the queries grow during training until every head is one-hot and the
    reference path stops receiving gradient.
    """

    kind = "segment_gst"
    uses_sequence = True

    def __init__(self, dim: int, bank_size: int, heads: int, rng: np.random.Generator,
                 width: int = 8, stride: int = 4):
        # edge-replicate padding: a stationary reference stays stationary after reduction
        self.reduce1 = Conv1d(dim, dim, width, rng, stride=stride, padding="replicate")
        self.reduce2 = Conv1d(dim, dim, width, rng, stride=stride, padding="replicate")
        self.gst = TokenBank(bank_size, dim, heads, rng)

    def reduce(self, hidden):
        hidden = np.asarray(hidden, dtype=np.float64)
        if hidden.ndim != 2 or hidden.shape[0] < 1:
            raise ShapeError(f"SegmentGST needs a non-empty T x E sequence, got shape {hidden.shape}")
        a, c1 = self.reduce1.forward(hidden)
        a, cs = silu(a)
        r, c2 = self.reduce2.forward(a)
        r, cn = l2_normalize(r)
        return r, (c1, cs, c2, cn)

    def forward(self, hidden, pooled=None, mode: str = "infer", rng=None):
        reduced, cr = self.reduce(hidden)
        per_pos, w, cg = self.gst.forward(reduced)
        out = per_pos.mean(axis=0, keepdims=True)
        return (BottleneckOutput([out], attention_weights=[w.mean(axis=0, keepdims=True)],
                                 extras={"reduced_length": reduced.shape[0]}),
                (cr, cg, reduced.shape[0]))

    def backward(self, d_embeddings, ctx, aux_weight: float = 0.0):
        (c1, cs, c2, cn), cg, n = ctx
        dout = np.sum(d_embeddings, axis=0)
        dred = self.gst.backward(np.repeat(dout / n, n, axis=0), cg)
        da = self.reduce2.backward(l2_normalize_backward(dred, cn), c2)
        return self.reduce1.backward(silu_backward(da, cs), c1), None


def make_bottleneck(kind: str, dim: int, rng: np.random.Generator, bank_size: int = 64,
                    heads: int = 4, kl_weight: float = 1e-4) -> Bottleneck:
    if kind == "vae":
        return VaeBottleneck(dim, rng, kl_weight)
    if kind == "shared_gst":
        return SharedGST(dim, bank_size, heads, rng)
    if kind == "multi_gst":
        return MultiGST(dim, bank_size, heads, rng)
    if kind == "segment_gst":
        return SegmentGST(dim, bank_size, heads, rng)
    raise ConfigError(f"unknown bottleneck {kind!r}; choose one of {', '.join(KINDS)}")
