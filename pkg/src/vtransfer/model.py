"""Backbone + voice-transfer module, end to end."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import (
    DurationPredictor,
    FeatureDecoder,
    ResidualAdapter,
    TextEncoder,
    round_half_away,
    upsample,
    upsample_backward,
)
from .bottleneck import ADAPTER_SITES, KINDS, Bottleneck, BottleneckOutput, make_bottleneck
from .nn import ConfigError, Module, NonFiniteError, l1_loss, mse_loss
from .speaker_encoder import (
    SpeakerEncoder,
    SpeakerEncoderConfig,
    pool_normalize_backward,
    pool_normalize_forward,
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 72
    feature_dim: int = 32
    text_dim: int = 64
    text_layers: int = 2
    decoder_layers: int = 6
    adapter_hidden: int = 64
    bottleneck: str = "shared_gst"
    bank_size: int = 64
    gst_heads: int = 4
    kl_weight: float = 1e-4
    encoder: SpeakerEncoderConfig = field(default_factory=SpeakerEncoderConfig)

    def __post_init__(self):
        if self.bottleneck not in KINDS:
            raise ConfigError(f"unknown bottleneck {self.bottleneck!r}; choose one of {', '.join(KINDS)}")
        if self.decoder_layers != ADAPTER_SITES - 1:
            raise ConfigError(
                f"decoder_layers must be {ADAPTER_SITES - 1} so that duration predictor + decoder "
                f"give {ADAPTER_SITES} adapter sites"
            )
        if self.encoder.input_dim != self.feature_dim:
            raise ConfigError(
                f"encoder input_dim {self.encoder.input_dim} != feature_dim {self.feature_dim}"
            )
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = d.pop("encoder", {})
        return cls(encoder=SpeakerEncoderConfig(**enc), **d)


@dataclass
class LossBreakdown:
    feature_l1: float
    dur_mse: float
    kl: float
    total: float


@dataclass
class Synthesis:
    features: np.ndarray
    durations: np.ndarray  # integer frames per token actually used
    bottleneck: BottleneckOutput | None


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.text_encoder = TextEncoder(cfg.vocab_size, cfg.text_dim, cfg.text_layers, rng)
        self.duration = DurationPredictor(cfg.text_dim, rng)
        self.decoder = FeatureDecoder(cfg.text_dim, cfg.feature_dim, cfg.decoder_layers, rng)


class VoiceTransferModule(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.speaker_encoder = SpeakerEncoder(cfg.encoder, rng)
        self.bottleneck = make_bottleneck(cfg.bottleneck, cfg.encoder.embed_dim, rng,
                                          cfg.bank_size, cfg.gst_heads, cfg.kl_weight)
        self.adapters = [ResidualAdapter(cfg.text_dim, cfg.encoder.embed_dim, cfg.adapter_hidden, rng)
                         for _ in range(ADAPTER_SITES)]


class VoiceTransferTTS(Module):
    """Text + reference features -> features in the reference voice."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(cfg, rng)
        self.vt = VoiceTransferModule(cfg, rng)
        self.assign_names()

    # -- individual stages --------------------------------------------------

    def text_encode(self, tokens) -> np.ndarray:
        return self.backbone.text_encoder.forward(tokens)[0]

    def predict_durations(self, hidden, emb=None) -> np.ndarray:
        adapter = None if emb is None else self.vt.adapters[0]
        return self.backbone.duration.forward(hidden, adapter, emb)[0]

    def decode_features(self, frames, embs=None) -> np.ndarray:
        adapters = None if embs is None else self.vt.adapters[1:]
        return self.backbone.decoder.forward(frames, adapters, embs)[0]

    @property
    def bottleneck(self) -> Bottleneck:
        return self.vt.bottleneck

    def encode_reference(self, reference, mode: str = "infer", rng=None):
        enc = self.vt.speaker_encoder
        hidden, ch = enc.forward(reference)
        pooled, cp = pool_normalize_forward(hidden)
        out, cb = self.vt.bottleneck.forward(hidden, pooled, mode=mode, rng=rng)
        return out, (ch, cp, cb)

    def _encode_reference_backward(self, d_sites, ctx, aux_weight):
        ch, cp, cb = ctx
        bn = self.vt.bottleneck
        if bn.n_outputs == 1:
            d_out = [np.sum(d_sites, axis=0)]
        else:
            d_out = d_sites
        dh, dp = bn.backward(d_out, cb, aux_weight)
        if dp is not None:
            back = pool_normalize_backward(dp, cp)
            dh = back if dh is None else dh + back
        self.vt.speaker_encoder.backward(dh, ch)

    # -- training -----------------------------------------------------------

    def loss_and_backward(self, tokens, durations, target, reference, rng=None,
                          use_adapters: bool = True, dur_weight: float = 0.1,
                          backward: bool = True) -> LossBreakdown:
        """Teacher-forced forward pass; accumulates gradients when ``backward``."""
        durations = np.asarray(durations, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        kl_w = self.config.kl_weight
        if use_adapters:
            bout, cref = self.encode_reference(reference, mode="train", rng=rng)
            sites = bout.per_site()
            kl = bout.aux_loss
        else:
            sites, kl = None, 0.0

        hidden, ct = self.backbone.text_encoder.forward(tokens)
        if durations.shape != (hidden.shape[0],):
            raise ConfigError(f"{durations.size} gold durations for {hidden.shape[0]} tokens")
        dur, cd = self.backbone.duration.forward(hidden, self.vt.adapters[0] if use_adapters else None,
                                                 sites[0] if use_adapters else None)
        frames, counts = upsample(hidden, durations)
        if frames.shape[0] != target.shape[0]:
            raise ConfigError(f"upsampled {frames.shape[0]} frames but target has {target.shape[0]}")
        feats, cdec = self.backbone.decoder.forward(frames, self.vt.adapters[1:] if use_adapters else None,
                                                    sites[1:] if use_adapters else None)
        feat_loss, dfeat = l1_loss(feats, target)
        log_dur = np.log(dur)
        dur_loss, dlog = mse_loss(log_dur, np.log(durations))
        total = feat_loss + dur_weight * dur_loss + kl_w * kl
        for name, val in (("feature_l1", feat_loss), ("dur_mse", dur_loss), ("kl", kl)):
            if not math.isfinite(val):
                raise NonFiniteError(f"non-finite {name} loss")
        result = LossBreakdown(feat_loss, dur_loss, kl, total)
        if not backward:
            return result

        dframes, demb_dec = self.backbone.decoder.backward(dfeat, cdec)
        dhidden = upsample_backward(dframes, counts)
        dh_dur, demb_dur = self.backbone.duration.backward(dur_weight * dlog / dur, cd)
        self.backbone.text_encoder.backward(dhidden + dh_dur, ct)
        if use_adapters:
            self._encode_reference_backward([demb_dur] + demb_dec, cref, kl_w)
        return result

    # -- inference ----------------------------------------------------------

    def synthesize(self, tokens, reference=None, use_adapters: bool = True) -> Synthesis:
        """Full inference path; VAE uses its posterior mode so output is deterministic."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ValueError("cannot synthesize empty text")
        bout = None
        sites = None
        if use_adapters:
            if reference is None:
                raise ValueError("a reference is required unless adapters are disabled")
            bout, _ = self.encode_reference(reference, mode="infer")
            sites = bout.per_site()
        hidden = self.text_encode(tokens)
        dur = self.predict_durations(hidden, sites[0] if sites else None)
        counts = np.maximum(round_half_away(dur), 1)
        frames, counts = upsample(hidden, counts)
        feats = self.decode_features(frames, sites[1:] if sites else None)
        return Synthesis(feats, counts, bout)

    def backbone_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith("backbone.")]
