"""Differentiable numpy primitives with hand-written backward passes.

Every layer follows one convention: ``forward(...)`` returns ``(output, ctx)``
and ``backward(d_output, ctx)`` returns the gradient w.r.t. the input while
accumulating parameter gradients into ``Parameter.grad``.  Keeping the cache
in an explicit ``ctx`` (instead of on the layer) lets one layer be applied
several times in a single pass.

All arrays are 2-D ``T x C`` (time by channels) unless stated otherwise.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


class ConfigError(ValueError):
    """Raised for invalid layer or model configuration."""


class NonFiniteError(FloatingPointError):
    """Raised when a loss or activation stops being finite."""


class Parameter:
    """A named trainable tensor with an accumulated gradient."""

    __slots__ = ("name", "value", "grad", "trainable")

    def __init__(self, value, name: str = "", trainable: bool = True):
        self.value = np.array(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Module:
    """Container that discovers parameters and sub-modules from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ConfigError(f"duplicate parameter name {name!r}")
            seen.add(name)
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag


def init_normal(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.normal(0.0, scale, size=shape).astype(DTYPE)


def _as2d(x, name: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (T x C), got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# elementwise


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def silu(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    s = sigmoid(x)
    return x * s, (x, s)


def silu_backward(dy: np.ndarray, ctx: tuple) -> np.ndarray:
    x, s = ctx
    return dy * (s * (1.0 + x * (1.0 - s)))


def softplus(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.logaddexp(0.0, x), x


def softplus_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * sigmoid(x)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dp: np.ndarray, p: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# pooling / normalization


def mean_pool(x: np.ndarray) -> np.ndarray:
    """Average over time: ``T x C -> 1 x C``."""
    x = _as2d(x)
    if x.shape[0] < 1:
        raise ShapeError("cannot pool an empty sequence")
    return x.mean(axis=0, keepdims=True)


def mean_pool_backward(dy: np.ndarray, length: int) -> np.ndarray:
    return np.repeat(dy / length, length, axis=0)


def l2_normalize(v: np.ndarray, tol: float = 1e-12) -> tuple[np.ndarray, tuple]:
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    if np.any(norm <= tol):
        raise NonFiniteError("cannot L2-normalize a zero vector (degenerate input)")
    y = v / norm
    return y, (y, norm)


def l2_normalize_backward(dy: np.ndarray, ctx: tuple) -> np.ndarray:
    y, norm = ctx
    return (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / norm


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=DTYPE)[:, None]
    i = np.arange(dim // 2, dtype=DTYPE)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((length, dim), dtype=DTYPE)
    table[:, 0 : 2 * (dim // 2) : 2] = np.sin(angle)
    table[:, 1 : 2 * (dim // 2) : 2] = np.cos(angle)
    return table


# ---------------------------------------------------------------------------
# convolution


PADDINGS = ("same", "replicate", "valid")


def conv_output_length(length: int, width: int, stride: int, padding: str) -> int:
    """``ceil(T / s)`` for same/replicate padding (they differ only in fill values)."""
    if padding in ("same", "replicate"):
        return -(-length // stride)
    if padding == "valid":
        return (length - width) // stride + 1
    raise ConfigError(f"padding must be one of {PADDINGS}, got {padding!r}")


def _conv_geometry(length: int, width: int, stride: int, padding: str):
    t_out = conv_output_length(length, width, stride, padding)
    if t_out < 1:
        raise ShapeError(f"sequence of length {length} too short for valid conv of width {width}")
    if padding != "valid":
        total = max((t_out - 1) * stride + width - length, 0)
        left = total // 2
        right = total - left
    else:
        left = right = 0
    return t_out, left, right


def conv1d(x, kernel, bias=None, stride: int = 1, padding: str = "same"):
    """1-D convolution (cross-correlation) over time.

    ``x`` is ``T x C``, ``kernel`` is ``W x C x C'``.  With same padding the
    output length is ``ceil(T / stride)``; the zero padding is split with the
    extra element (if any) on the right.  ``"replicate"`` has the same geometry
    but repeats the edge frames instead of zeros, so constant input stays
    constant.
    """
    x = _as2d(x)
    kernel = np.asarray(kernel, dtype=DTYPE)
    if kernel.ndim != 3:
        raise ShapeError(f"kernel must be W x C x C', got shape {kernel.shape}")
    width, c_in, c_out = kernel.shape
    if width < 1 or stride < 1:
        raise ConfigError(f"need width >= 1 and stride >= 1, got W={width}, s={stride}")
    if x.shape[1] != c_in:
        raise ShapeError(f"input has C={x.shape[1]} channels but kernel expects C={c_in}")
    length = x.shape[0]
    t_out, left, right = _conv_geometry(length, width, stride, padding)
    if padding == "replicate":
        src = np.clip(np.arange(-left, length + right), 0, length - 1)
        xp = x[src]
    else:
        src = None
        xp = np.concatenate(
            [np.zeros((left, c_in), DTYPE), x, np.zeros((right, c_in), DTYPE)], axis=0
        )
    span = (t_out - 1) * stride + 1
    y = np.zeros((t_out, c_out), dtype=DTYPE) if bias is None else np.tile(bias, (t_out, 1))
    for k in range(width):
        y += xp[k : k + span : stride] @ kernel[k]
    return y, (xp, kernel, stride, left, length, t_out, src)


def conv1d_backward(dy: np.ndarray, ctx):
    """Returns ``(dx, dkernel, dbias)``."""
    xp, kernel, stride, left, length, t_out, src = ctx
    width = kernel.shape[0]
    span = (t_out - 1) * stride + 1
    dxp = np.zeros_like(xp)
    dk = np.empty_like(kernel)
    for k in range(width):
        window = xp[k : k + span : stride]
        dk[k] = window.T @ dy
        dxp[k : k + span : stride] += dy @ kernel[k].T
    if src is not None:
        dx = np.zeros((length, xp.shape[1]), DTYPE)
        np.add.at(dx, src, dxp)
        return dx, dk, dy.sum(axis=0)
    return dxp[left : left + length], dk, dy.sum(axis=0)


# ---------------------------------------------------------------------------
# attention


def dot_product_attention(query, keys, values, heads: int):
    """Multi-head dot-product attention with head-averaged outputs.

    Head ``h`` scores ``query[:, h-slice] . keys[:, h-slice] / sqrt(E/h)``
    against all ``M`` keys; each head forms the weighted sum of the *full*
    value rows, and the heads are averaged.  Because every head's output is a
    convex combination of value rows, so is the average: the combined weights
    ``weights.mean(0)`` reproduce the output exactly.

    Returns ``(output q x Ev, weights h x q x M, ctx)``.
    """
    query = _as2d(query, "query")
    keys = _as2d(keys, "keys")
    values = _as2d(values, "values")
    dim = query.shape[1]
    if heads < 1 or dim % heads:
        raise ConfigError(f"embedding dim {dim} not divisible by {heads} heads")
    if keys.shape[1] != dim:
        raise ShapeError(f"query dim {dim} != key dim {keys.shape[1]}")
    if keys.shape[0] != values.shape[0]:
        raise ShapeError(f"{keys.shape[0]} keys but {values.shape[0]} values")
    d = dim // heads
    scale = 1.0 / math.sqrt(d)
    qh = query.reshape(query.shape[0], heads, d).transpose(1, 0, 2)
    kh = keys.reshape(keys.shape[0], heads, d).transpose(1, 0, 2)
    weights = softmax(qh @ kh.transpose(0, 2, 1) * scale)
    out = (weights @ values).mean(axis=0)
    return out, weights, (qh, kh, values, weights, scale)


def dot_product_attention_backward(dout: np.ndarray, ctx):
    """Returns ``(dquery, dkeys, dvalues)``."""
    qh, kh, values, weights, scale = ctx
    heads = weights.shape[0]
    dout_h = dout / heads
    dvalues = np.einsum("hqm,qe->me", weights, dout_h)
    dw = (dout_h @ values.T)[None, :, :]
    dlogits = softmax_backward(dw, weights) * scale
    dq = (dlogits @ kh).transpose(1, 0, 2).reshape(qh.shape[1], -1)
    dk = (dlogits.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(kh.shape[1], -1)
    return dq, dk, dvalues


# ---------------------------------------------------------------------------
# layers


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero_init: bool = False, scale: float | None = None):
        if zero_init:
            w = np.zeros((d_in, d_out), DTYPE)
        else:
            w = init_normal(rng, (d_in, d_out), scale if scale is not None else 1.0 / math.sqrt(d_in))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, DTYPE)) if bias else None

    def forward(self, x):
        x = _as2d(x)
        if x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"linear expects {self.weight.shape[0]} input features, got {x.shape[1]}")
        y = x @ self.weight.value
        if self.bias is not None:
            y = y + self.bias.value
        return y, x

    def backward(self, dy, x):
        self.weight.grad += x.T @ dy
        if self.bias is not None:
            self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value.T


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, width: int, rng: np.random.Generator,
                 stride: int = 1, padding: str = "same"):
        if width < 1 or stride < 1:
            raise ConfigError(f"need width >= 1 and stride >= 1, got W={width}, s={stride}")
        self.kernel = Parameter(init_normal(rng, (width, c_in, c_out), 1.0 / math.sqrt(width * c_in)))
        self.bias = Parameter(np.zeros(c_out, DTYPE))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv1d(x, self.kernel.value, self.bias.value, self.stride, self.padding)

    def backward(self, dy, ctx):
        dx, dk, db = conv1d_backward(dy, ctx)
        self.kernel.grad += dk
        self.bias.grad += db
        return dx


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim, DTYPE))
        self.shift = Parameter(np.zeros(dim, DTYPE))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        xhat = xc * inv
        return xhat * self.gain.value + self.shift.value, (xhat, inv)

    def backward(self, dy, ctx):
        xhat, inv = ctx
        self.gain.grad += (dy * xhat).sum(axis=0)
        self.shift.grad += dy.sum(axis=0)
        dxhat = dy * self.gain.value
        return inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator):
        self.table = Parameter(init_normal(rng, (vocab, dim), 1.0))

    def forward(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        vocab = self.table.shape[0]
        if ids.ndim != 1:
            raise ShapeError(f"token ids must be 1-D, got shape {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            bad = ids[(ids < 0) | (ids >= vocab)][0]
            raise ValueError(f"token id {bad} outside vocabulary of size {vocab}")
        return self.table.value[ids], ids

    def backward(self, dy, ids):
        np.add.at(self.table.grad, ids, dy)
        return None


class MultiHeadSelfAttention(Module):
    """Standard split-heads self-attention with output projection."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads < 1 or dim % heads:
            raise ConfigError(f"embedding dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        # a key bias only shifts each query's logits uniformly: no effect, zero gradient
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def forward(self, x):
        t, dim = x.shape
        h, d = self.heads, dim // self.heads
        q, cq = self.q.forward(x)
        k, ck = self.k.forward(x)
        v, cv = self.v.forward(x)
        split = lambda a: a.reshape(t, h, d).transpose(1, 0, 2)  # noqa: E731
        qh, kh, vh = split(q), split(k), split(v)
        scale = 1.0 / math.sqrt(d)
        p = softmax(qh @ kh.transpose(0, 2, 1) * scale)
        ctx_h = p @ vh
        merged = ctx_h.transpose(1, 0, 2).reshape(t, dim)
        y, co = self.o.forward(merged)
        return y, (cq, ck, cv, co, qh, kh, vh, p, scale)

    def backward(self, dy, ctx):
        cq, ck, cv, co, qh, kh, vh, p, scale = ctx
        h, t, d = qh.shape
        dmerged = self.o.backward(dy, co)
        dctx = dmerged.reshape(t, h, d).transpose(1, 0, 2)
        dp = dctx @ vh.transpose(0, 2, 1)
        dvh = p.transpose(0, 2, 1) @ dctx
        dlogits = softmax_backward(dp, p) * scale
        dqh = dlogits @ kh
        dkh = dlogits.transpose(0, 2, 1) @ qh
        merge = lambda a: a.transpose(1, 0, 2).reshape(t, h * d)  # noqa: E731
        return (
            self.q.backward(merge(dqh), cq)
            + self.k.backward(merge(dkh), ck)
            + self.v.backward(merge(dvh), cv)
        )


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        a, c1 = self.fc1.forward(x)
        h, cs = silu(a)
        y, c2 = self.fc2.forward(h)
        return y, (c1, cs, c2)

    def backward(self, dy, ctx):
        c1, cs, c2 = ctx
        return self.fc1.backward(silu_backward(self.fc2.backward(dy, c2), cs), c1)


class TransformerLayer(Module):
    """Pre-norm transformer block: ``x + attn(ln(x))`` then ``x + ffn(ln(x))``."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)

    def forward(self, x):
        a, c1 = self.ln1.forward(x)
        a, c2 = self.attn.forward(a)
        x = x + a
        b, c3 = self.ln2.forward(x)
        b, c4 = self.ffn.forward(b)
        return x + b, (c1, c2, c3, c4)

    def backward(self, dy, ctx):
        c1, c2, c3, c4 = ctx
        dx = dy + self.ln2.backward(self.ffn.backward(dy, c4), c3)
        return dx + self.ln1.backward(self.attn.backward(dx, c2), c1)


class ConvBlock(Module):
    """``LayerNorm(x + silu(conv(x)))``, channel-preserving."""

    def __init__(self, dim: int, width: int, rng: np.random.Generator):
        self.conv = Conv1d(dim, dim, width, rng)
        self.norm = LayerNorm(dim)

    def forward(self, x):
        a, cc = self.conv.forward(x)
        a, cs = silu(a)
        y, cn = self.norm.forward(x + a)
        return y, (cc, cs, cn)

    def backward(self, dy, ctx):
        cc, cs, cn = ctx
        dz = self.norm.backward(dy, cn)
        return dz + self.conv.backward(silu_backward(dz, cs), cc)


# ---------------------------------------------------------------------------
# losses


def l1_loss(pred, target):
    """Mean absolute error and its (sub)gradient."""
    diff = pred - target
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def mse_loss(pred, target):
    diff = pred - target
    return float((diff * diff).mean()), 2.0 * diff / diff.size


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over rows; gradient is ``(p - onehot) / n``."""
    logits = _as2d(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst element-wise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def numeric_gradient(f: Callable[[], float], array: np.ndarray, eps: float,
                     indices: Sequence[tuple] | None = None) -> tuple[list[tuple], np.ndarray]:
    """Central differences of scalar ``f`` w.r.t. entries of ``array`` (perturbed in place)."""
    if indices is None:
        indices = list(np.ndindex(*array.shape))
    out = np.empty(len(indices), DTYPE)
    for j, idx in enumerate(indices):
        old = array[idx]
        array[idx] = old + eps
        fp = f()
        array[idx] = old - eps
        fm = f()
        array[idx] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"non-finite loss while perturbing entry {idx}")
        out[j] = (fp - fm) / (2.0 * eps)
    return list(indices), out


def _sample_indices(shape, limit: int | None, rng: np.random.Generator) -> list[tuple]:
    all_idx = list(np.ndindex(*shape))
    if limit is None or len(all_idx) <= limit:
        return all_idx
    pick = rng.choice(len(all_idx), size=limit, replace=False)
    return [all_idx[i] for i in sorted(pick)]


def grad_check(fragment, x, eps: float = 1e-5, *, projection: str = "random", seed: int = 0,
               max_entries: int | None = 40, floor: float = 1e-6,
               check_input: bool = True) -> float:
    """Compare analytic and central-difference gradients of a layer.

    ``fragment`` must expose ``forward(x) -> (y, ctx)``, ``backward(dy, ctx)``
    and ``parameters()``.  The scalar under test is ``sum(R * y)`` where ``R``
    is all ones (``projection="sum"``) or a fixed seeded Gaussian matrix
    (``projection="random"``; plain sums have vanishing gradients through
    normalization layers).  Checks the input (if it is a float array) and every
    parameter, sampling at most ``max_entries`` entries per tensor.  Returns the
    worst relative error.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ConfigError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    rng = np.random.default_rng(seed)
    x_is_float = isinstance(x, np.ndarray) and np.issubdtype(x.dtype, np.floating)
    if x_is_float:
        x = x.astype(DTYPE, copy=True)

    y, ctx = fragment.forward(x)
    if projection == "sum":
        proj = np.ones_like(y)
    elif projection == "random":
        proj = rng.normal(size=y.shape)
    else:
        raise ConfigError(f"unknown projection {projection!r}")

    def loss() -> float:
        out, _ = fragment.forward(x)
        return float((out * proj).sum())

    if not math.isfinite(loss()):
        raise NonFiniteError("fragment produced a non-finite loss")

    params = fragment.parameters()
    for p in params:
        p.zero_grad()
    dx = fragment.backward(proj, ctx)

    worst = 0.0
    if check_input and x_is_float:
        idx, num = numeric_gradient(loss, x, eps, _sample_indices(x.shape, max_entries, rng))
        ana = np.array([dx[i] for i in idx])
        worst = max(worst, relative_error(ana, num, floor))
    for p in params:
        idx, num = numeric_gradient(loss, p.value, eps, _sample_indices(p.shape, max_entries, rng))
        ana = np.array([p.grad[i] for i in idx])
        worst = max(worst, relative_error(ana, num, floor))
    return worst
