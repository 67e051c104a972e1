"""Joint training of the backbone and voice-transfer module."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .bottleneck import KINDS
from .data import Corpus, retime, sample_reference_chunk
from .model import LossBreakdown, ModelConfig, VoiceTransferTTS
from .nn import ConfigError, NonFiniteError, Parameter
from .speaker_encoder import SpeakerEncoderConfig

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "feature_l1", "dur_mse", "kl", "lr")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2500
    batch_size: int = 8
    learning_rate: float = 2e-3
    warmup_steps: int = 200
    seed: int = 0
    bottleneck: str = "shared_gst"
    freeze_backbone: bool = False
    kl_weight: float = 1e-4
    grad_clip: float = 1.0
    dur_weight: float = 0.1
    tempo_range: float = 1.4  # re-time samples by a log-uniform factor in [1/r, r]; 1 disables
    init_checkpoint: str = ""
    # model sizes
    text_dim: int = 64
    text_layers: int = 2
    adapter_hidden: int = 64
    bank_size: int = 64
    gst_heads: int = 4
    embed_dim: int = 64
    encoder_conv_layers: int = 3
    encoder_conv_channels: int = 64
    encoder_transformer_layers: int = 2
    encoder_heads: int = 4

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be >= 0")
        if self.tempo_range < 1:
            raise ConfigError(f"tempo_range must be >= 1, got {self.tempo_range}")
        if self.bottleneck not in KINDS:
            raise ConfigError(f"unknown bottleneck {self.bottleneck!r}; choose one of {', '.join(KINDS)}")
        if self.freeze_backbone and not self.init_checkpoint:
            raise ConfigError("freeze_backbone needs init_checkpoint with the pretrained backbone")

    def model_config(self, vocab_size: int, feature_dim: int) -> ModelConfig:
        enc = SpeakerEncoderConfig(
            input_dim=feature_dim, conv_layers=self.encoder_conv_layers,
            conv_channels=self.encoder_conv_channels,
            transformer_layers=self.encoder_transformer_layers, embed_dim=self.embed_dim,
            attention_heads=self.encoder_heads, ffn_dim=2 * self.embed_dim,
        )
        return ModelConfig(
            vocab_size=vocab_size, feature_dim=feature_dim, text_dim=self.text_dim,
            text_layers=self.text_layers, adapter_hidden=self.adapter_hidden,
            bottleneck=self.bottleneck, bank_size=self.bank_size, gst_heads=self.gst_heads,
            kl_weight=self.kl_weight, encoder=enc,
        )


def learning_rate(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to ``peak`` then inverse-square-root decay (1-based step)."""
    warmup = max(warmup, 1)
    return peak * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, params: list[Parameter], beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}

    def step(self, t: int, lr: float) -> None:
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**t, 1.0 - b2**t
        for p in self.params:
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(params: list[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if not math.isfinite(total):
        bad = [p.name for p in params if not np.all(np.isfinite(p.grad))]
        raise NonFiniteError(f"non-finite gradients in {bad[:5]}")
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad *= scale
    return total


def train_step(model: VoiceTransferTTS, batch, rng: np.random.Generator, dur_weight: float = 0.1) -> LossBreakdown:
    """Forward/backward over ``batch`` of ``(tokens, durations, features, reference)``.

    Gradients are accumulated (averaged over the batch) but no update is applied.
    """
    model.zero_grad()
    acc = np.zeros(4)
    n = len(batch)
    for tokens, durations, feats, ref in batch:
        b = model.loss_and_backward(tokens, durations, feats, ref, rng=rng, dur_weight=dur_weight)
        acc += (b.feature_l1, b.dur_mse, b.kl, b.total)
    for p in model.parameters():
        p.grad /= n
    return LossBreakdown(*(acc / n))


@dataclass
class TrainResult:
    model: VoiceTransferTTS
    metrics: list[dict]


def train(cfg: TrainConfig, corpus: Corpus, metrics_path=None) -> TrainResult:
    ccfg = corpus.config
    model = VoiceTransferTTS(cfg.model_config(ccfg.vocab_size, ccfg.n_bands), seed=cfg.seed)
    if cfg.init_checkpoint:
        init = checkpoint.load(cfg.init_checkpoint)
        if cfg.freeze_backbone:
            init = {k: v for k, v in init.items() if k.startswith("backbone.")}
        checkpoint.load_into(model, init, strict=not cfg.freeze_backbone)
    if cfg.freeze_backbone:
        model.backbone.set_trainable(False)
    trainable = [p for p in model.parameters() if p.trainable]
    opt = Adam(trainable)

    records = corpus.split("train")
    heldout = set(corpus.heldout_speakers)
    if not records:
        raise ConfigError("corpus has no training utterances")
    rng = np.random.default_rng([cfg.seed, 10])
    order: list[int] = []
    metrics: list[dict] = []
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
    try:
        for step in range(1, cfg.steps + 1):
            batch = []
            for _ in range(cfg.batch_size):
                if not order:
                    order = list(rng.permutation(len(records)))
                rec = records[order.pop()]
                if rec.speaker in heldout:
                    raise ConfigError(f"zero-shot violation: held-out speaker {rec.speaker} in training batch")
                feats, durations = corpus.features(rec), rec.durations
                if cfg.tempo_range > 1:
                    # decorrelates speaking rate from voice so the encoder has to read timing
                    span = math.log(cfg.tempo_range)
                    feats, durations = retime(feats, durations, math.exp(rng.uniform(-span, span)))
                batch.append((rec.tokens, durations, feats, sample_reference_chunk(feats, rng)))
            try:
                losses = train_step(model, batch, rng, cfg.dur_weight)
                clip_global_norm(trainable, cfg.grad_clip)
            except (NonFiniteError, FloatingPointError) as exc:
                raise NonFiniteError(f"step {step}: {exc}") from exc
            lr = learning_rate(step, cfg.learning_rate, cfg.warmup_steps)
            opt.step(step, lr)
            row = {"step": step, "feature_l1": losses.feature_l1, "dur_mse": losses.dur_mse,
                   "kl": losses.kl, "lr": lr}
            metrics.append(row)
            if writer is not None:
                writer.writerow([step, f"{losses.feature_l1:.8g}", f"{losses.dur_mse:.8g}",
                                 f"{losses.kl:.8g}", f"{lr:.8g}"])
            if step % 100 == 0 or step == 1:
                log.info("step %d l1=%.4f dur=%.4f kl=%.3f lr=%.2e", step, losses.feature_l1,
                         losses.dur_mse, losses.kl, lr)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(model, metrics)


# ---------------------------------------------------------------------------
# persistence


def save_model(path, model: VoiceTransferTTS, extra: dict | None = None) -> None:
    """Writes ``path`` (VTCK tensors) and ``path.json`` (model config)."""
    path = Path(path)
    checkpoint.save(path, checkpoint.state_dict(model))
    meta = {"model": model.config.to_dict()} | (extra or {})
    Path(f"{path}.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_model(path) -> VoiceTransferTTS:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    meta_path = Path(f"{path}.json")
    if not meta_path.exists():
        raise FileNotFoundError(f"checkpoint metadata not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    model = VoiceTransferTTS(ModelConfig.from_dict(meta["model"]))
    checkpoint.load_into(model, checkpoint.load(path))
    return model


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_from_mapping(values: dict) -> TrainConfig:
    known = {f.name: f for f in fields(TrainConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown train config keys: {', '.join(unknown)}")
    return TrainConfig(**values)


def config_to_text(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())
