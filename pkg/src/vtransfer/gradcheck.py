"""Finite-difference checks over every trainable path, at micro scale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import DurationPredictor, FeatureDecoder, ResidualAdapter, TextEncoder
from .bottleneck import MultiGST, SegmentGST, SharedGST, TokenBank, VaeBottleneck
from .model import ModelConfig, VoiceTransferTTS
from .nn import Conv1d, Module, dot_product_attention, dot_product_attention_backward, grad_check
from .speaker_encoder import SpeakerEncoder, SpeakerEncoderConfig, pool_normalize_forward

TOLERANCE = 1e-4
MICRO_ENCODER = SpeakerEncoderConfig(input_dim=6, conv_layers=2, conv_channels=8, transformer_layers=1,
                                     embed_dim=8, attention_heads=2, ffn_dim=12)


class Fragment:
    """Adapts arbitrary forward/backward closures to ``grad_check``."""

    def __init__(self, modules, forward, backward):
        self._modules = modules if isinstance(modules, (list, tuple)) else [modules]
        self._forward = forward
        self._backward = backward

    def forward(self, x):
        return self._forward(x)

    def backward(self, dy, ctx):
        return self._backward(dy, ctx)

    def parameters(self):
        return [p for m in self._modules for p in m.parameters()]


def _randomize_zero_params(module: Module, rng) -> None:
    """Zero-initialised projections hide gradient paths; give them values."""
    for p in module.parameters():
        if not np.any(p.value):
            p.value[...] = rng.normal(0.0, 0.3, size=p.shape)


def _bottleneck_fragment(bn, rng, sequence_input: bool, vae_mode: str = "train"):
    sites = bn.n_outputs
    seed = int(rng.integers(1 << 30))

    def fwd(x):
        pooled = None if sequence_input else pool_normalize_forward(x)[0]
        out, ctx = bn.forward(x, pooled, mode=vae_mode, rng=np.random.default_rng(seed))
        y = np.concatenate(out.embeddings, axis=0)
        # fold the KL into the output so its gradient is checked too
        return np.concatenate([y, [[out.aux_loss] * y.shape[1]]], axis=0), (ctx, x)

    def bwd(dy, ctx):
        c, x = ctx
        d_embs = [dy[i : i + 1] for i in range(sites)]
        aux = float(dy[sites].sum())
        dh, dp = bn.backward(d_embs, c, aux_weight=aux)
        if dp is not None:
            from .speaker_encoder import pool_normalize_backward

            _, cp = pool_normalize_forward(x)
            dh = pool_normalize_backward(dp, cp)
        return dh

    return Fragment(bn, fwd, bwd)


@dataclass
class CheckResult:
    path: str
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def run_all(seed: int = 0, max_entries: int | None = 24) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []

    def check(name, frag, x, **kw):
        results.append(CheckResult(name, grad_check(frag, x, max_entries=max_entries, **kw)))

    conv = Conv1d(2, 2, 3, rng)
    check("conv1d", conv, rng.normal(size=(6, 2)), projection="sum")
    check("conv1d_stride4_w8", Conv1d(3, 3, 8, rng, stride=4), rng.normal(size=(35, 3)))

    q, k, v = rng.normal(size=(1, 8)), rng.normal(size=(5, 8)), rng.normal(size=(5, 8))

    class _Attn(Module):
        def forward(self, x):
            out, _, ctx = dot_product_attention(x, k, v, 4)
            return out, ctx

        def backward(self, dy, ctx):
            return dot_product_attention_backward(dy, ctx)[0]

    check("dot_product_attention", _Attn(), q)

    enc = SpeakerEncoder(MICRO_ENCODER, rng)
    check("speaker_encoder", enc, rng.normal(size=(9, 6)))

    e = 8
    hidden = rng.normal(size=(20, e))
    check("bottleneck.vae", _bottleneck_fragment(VaeBottleneck(e, rng), rng, False), hidden)
    check("bottleneck.shared_gst", _bottleneck_fragment(SharedGST(e, 6, 4, rng), rng, False), hidden)
    check("bottleneck.multi_gst", _bottleneck_fragment(MultiGST(e, 6, 4, rng), rng, False), hidden)
    check("bottleneck.segment_gst", _bottleneck_fragment(SegmentGST(e, 6, 4, rng), rng, True), hidden)

    bank = TokenBank(6, e, 4, rng)
    check("token_bank", Fragment(bank, lambda x: (lambda o: (o[0], o[2]))(bank.forward(x)), bank.backward),
          rng.normal(size=(3, e)))

    emb = rng.normal(size=(1, 4))
    adapter = ResidualAdapter(6, 4, 5, rng)
    _randomize_zero_params(adapter, rng)
    check("residual_adapter", Fragment(adapter, lambda x: adapter.forward(x, emb),
                                       lambda dy, c: adapter.backward(dy, c)[0]), rng.normal(size=(5, 6)))

    text = TextEncoder(10, 6, 2, rng)
    tokens = np.array([1, 4, 4, 9, 0])

    def text_fwd(x):
        return text.forward(tokens)

    check("text_encoder", Fragment(text, text_fwd, lambda dy, c: text.backward(dy, c)), np.zeros(1),
          check_input=False)

    dur = DurationPredictor(6, rng)
    dur_ad = ResidualAdapter(6, 4, 5, rng)
    _randomize_zero_params(dur_ad, rng)
    check("duration_predictor", Fragment([dur, dur_ad],
                                         lambda x: (lambda r: (r[0][:, None], r[1]))(dur.forward(x, dur_ad, emb)),
                                         lambda dy, c: dur.backward(dy[:, 0], c)[0]),
          rng.normal(size=(5, 6)))

    dec = FeatureDecoder(6, 3, 1, rng)
    dec_ad = ResidualAdapter(6, 4, 5, rng)
    _randomize_zero_params(dec_ad, rng)
    check("decoder_layer_with_adapter", Fragment([dec, dec_ad], lambda x: dec.forward(x, [dec_ad], [emb]),
                                                 lambda dy, c: dec.backward(dy, c)[0]),
          rng.normal(size=(7, 6)))

    for kind in ("vae", "shared_gst", "multi_gst", "segment_gst"):
        results.append(CheckResult(f"end_to_end.{kind}", _end_to_end(kind, rng, max_entries)))
    return results


def _end_to_end(kind: str, rng, max_entries) -> float:
    """Whole-model loss w.r.t. every parameter (adapters randomised)."""
    cfg = ModelConfig(vocab_size=8, feature_dim=6, text_dim=6, text_layers=1, adapter_hidden=4,
                      bottleneck=kind, bank_size=4, gst_heads=2, encoder=MICRO_ENCODER)
    model = VoiceTransferTTS(cfg, seed=int(rng.integers(1 << 30)))
    _randomize_zero_params(model.vt, rng)
    tokens = np.array([1, 3, 5])
    durations = np.array([2, 3, 2])
    target = rng.normal(size=(7, 6))
    reference = rng.normal(size=(18, 6))
    seed = int(rng.integers(1 << 30))

    def fwd(x):
        loss = model.loss_and_backward(tokens, durations, target, reference,
                                       rng=np.random.default_rng(seed), backward=False)
        return np.array([[loss.total]]), None

    def bwd(dy, ctx):
        model.zero_grad()
        model.loss_and_backward(tokens, durations, target, reference, rng=np.random.default_rng(seed))
        for p in model.parameters():
            p.grad *= float(dy[0, 0])
        return None

    return grad_check(Fragment(model, fwd, bwd), np.zeros(1), check_input=False, max_entries=max_entries)
