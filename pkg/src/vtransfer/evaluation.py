"""Automatic stand-ins for listening tests.

* speaker similarity: cosine between pooled embeddings of a separately
  trained scoring encoder (speaker classification on gold data only);
* voice preservation: a ridge probe that recovers the ground-truth speaker
  parameters from features;
* intelligibility: a frame classifier decoded per duration segment, scored
  as token error rate.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import Ridge
from sklearn.neural_network import MLPClassifier

from . import checkpoint
from .data import (
    THETA_FIELDS,
    THETA_RANGES,
    Corpus,
    SyntheticSpeaker,
    render_utterance,
    sample_reference_chunk,
)
from .model import VoiceTransferTTS
from .nn import Module, Parameter, init_normal, l2_normalize, l2_normalize_backward, softmax_cross_entropy
from .speaker_encoder import (
    SpeakerEncoder,
    SpeakerEncoderConfig,
    pool_normalize_backward,
    pool_normalize_forward,
)
from .trainer import Adam, clip_global_norm, learning_rate

log = logging.getLogger(__name__)

BOTTLENECK_ORDER = ("vae", "shared_gst", "multi_gst", "segment_gst")


class EvalError(ValueError):
    pass


def cosine(a, b) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def r_squared(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    ss_tot = float(((y_true - y_true.mean()) ** 2).sum())
    if ss_tot == 0:
        return float("nan")
    return 1.0 - float(((y_true - y_pred) ** 2).sum()) / ss_tot


def edit_distance(a, b) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


# ---------------------------------------------------------------------------
# scoring encoder


class ScoringEncoder(Module):
    """Speaker encoder trained alone with a cosine-softmax speaker classifier."""

    def __init__(self, config: SpeakerEncoderConfig, n_classes: int, seed: int = 0, scale: float = 10.0):
        rng = np.random.default_rng([seed, 20])
        self.encoder = SpeakerEncoder(config, rng)
        self.classes = Parameter(init_normal(rng, (n_classes, config.embed_dim), 1.0))
        self.scale = scale
        self.assign_names("scorer.")

    def embed(self, feats) -> np.ndarray:
        hidden, _ = self.encoder.forward(feats)
        return pool_normalize_forward(hidden)[0]

    def loss_and_backward(self, feats, label: int) -> float:
        hidden, ch = self.encoder.forward(feats)
        emb, cp = pool_normalize_forward(hidden)
        w, cw = l2_normalize(self.classes.value)
        logits = self.scale * emb @ w.T
        loss, dlogits = softmax_cross_entropy(logits, [label])
        demb = self.scale * dlogits @ w
        self.classes.grad += l2_normalize_backward(self.scale * dlogits.T @ emb, cw)
        self.encoder.backward(pool_normalize_backward(demb, cp), ch)
        return loss


def train_scoring_encoder(corpus: Corpus, config: SpeakerEncoderConfig | None = None, steps: int = 300,
                          batch_size: int = 8, lr: float = 2e-3, seed: int = 0) -> ScoringEncoder:
    config = config or SpeakerEncoderConfig(input_dim=corpus.config.n_bands, transformer_layers=1)
    speakers = corpus.train_speakers
    label = {s: i for i, s in enumerate(speakers)}
    records = corpus.split("train")
    model = ScoringEncoder(config, len(speakers), seed)
    params = model.parameters()
    opt = Adam(params)
    rng = np.random.default_rng([seed, 21])
    for step in range(1, steps + 1):
        model.zero_grad()
        total = 0.0
        for i in rng.integers(0, len(records), size=batch_size):
            rec = records[i]
            chunk = sample_reference_chunk(corpus.features(rec), rng)
            total += model.loss_and_backward(chunk, label[rec.speaker])
        for p in params:
            p.grad /= batch_size
        clip_global_norm(params, 1.0)
        opt.step(step, learning_rate(step, lr, 50))
        if step % 50 == 0:
            log.info("scorer step %d loss %.4f", step, total / batch_size)
    return model


# ---------------------------------------------------------------------------
# probes


def utterance_summary(feats) -> np.ndarray:
    """Per-band mean and std over time plus the energy-weighted band centroid."""
    feats = np.asarray(feats, dtype=np.float64)
    w = np.exp(feats)
    centroid = ((w * np.arange(feats.shape[1])).sum(axis=1) / w.sum(axis=1)).mean()
    return np.concatenate([feats.mean(axis=0), feats.std(axis=0), [centroid]])


@dataclass
class ProbeModel:
    """Ridge regressor summary -> theta and an MLP frame classifier features -> token."""

    theta_mean: np.ndarray
    theta_scale: np.ndarray
    theta_coef: np.ndarray
    theta_intercept: np.ndarray
    frame_mean: np.ndarray
    frame_scale: np.ndarray
    frame_w0: np.ndarray
    frame_b0: np.ndarray
    frame_w1: np.ndarray
    frame_b1: np.ndarray

    def predict_theta(self, feats) -> np.ndarray:
        x = (utterance_summary(feats) - self.theta_mean) / self.theta_scale
        return x @ self.theta_coef + self.theta_intercept

    def frame_logits(self, feats) -> np.ndarray:
        x = (np.asarray(feats, dtype=np.float64) - self.frame_mean) / self.frame_scale
        h = np.maximum(x @ self.frame_w0 + self.frame_b0, 0.0)
        return h @ self.frame_w1 + self.frame_b1

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {f"probe.{k}": np.atleast_1d(v) for k, v in vars(self).items()}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "ProbeModel":
        return cls(**{k[len("probe."):]: v.astype(np.float64) for k, v in tensors.items()
                      if k.startswith("probe.")})


def _standardize_fit(x):
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-8] = 1.0
    return mean, scale


def _augmented_utterances(corpus: Corpus, records, n_speakers: int, per_speaker: int, seed: int):
    """Gold renderings of fresh speakers drawn from the parameter prior.

    Training speakers alone leave the corners of the prior uncovered; these
    extra voices keep the probes from extrapolating on unusual held-out ones.
    """
    rng = np.random.default_rng([corpus.config.seed, seed, 30])
    out = []
    for i in range(n_speakers):
        spk = SyntheticSpeaker(-1 - i, *(float(rng.uniform(lo, hi)) for lo, hi in THETA_RANGES))
        for j in rng.choice(len(records), size=per_speaker, replace=False):
            rec = records[j]
            utt = render_utterance(spk, corpus.languages[rec.language], rec.tokens,
                                   noise_seed=rng.integers(1 << 31), noise_std=corpus.config.noise_std)
            out.append((utt.features, utt.tokens, utt.durations, spk.theta))
    return out


def train_probe(corpus: Corpus, seed: int = 0, frame_stride: int = 3, hidden: int = 128,
                augment_speakers: int = 512, per_speaker: int = 2) -> ProbeModel:
    """Fits both probes on gold renderings only: the training split plus prior-sampled voices."""
    records = corpus.split("train")
    if not records:
        raise EvalError("corpus has no training utterances for the probe")
    data = [(corpus.features(r), r.tokens, r.durations, corpus.speakers[r.speaker].theta) for r in records]
    data += _augmented_utterances(corpus, records, augment_speakers, per_speaker, seed)
    summaries = np.stack([utterance_summary(f) for f, *_ in data])
    thetas = np.stack([th for *_, th in data])
    t_mean, t_scale = _standardize_fit(summaries)
    ridge = Ridge(alpha=1.0).fit((summaries - t_mean) / t_scale, thetas)

    frames, labels = [], []
    for f, tokens, durations, _ in data:
        frames.append(f[::frame_stride])
        labels.append(np.repeat(tokens, durations)[::frame_stride])
    x = np.concatenate(frames)
    y = np.concatenate(labels)
    f_mean, f_scale = _standardize_fit(x)
    mlp = MLPClassifier(hidden_layer_sizes=(hidden,), random_state=seed, max_iter=60,
                        early_stopping=False, tol=1e-5)
    with warnings.catch_warnings():
        # a fixed iteration budget is deliberate; the ceiling check guards quality
        warnings.simplefilter("ignore", ConvergenceWarning)
        mlp.fit((x - f_mean) / f_scale, y)
    vocab = corpus.config.vocab_size
    w1 = np.zeros((hidden, vocab))
    b1 = np.full(vocab, -1e9)
    w1[:, mlp.classes_] = mlp.coefs_[1]
    b1[mlp.classes_] = mlp.intercepts_[1]
    return ProbeModel(t_mean, t_scale, ridge.coef_.T.copy(), ridge.intercept_.copy(),
                      f_mean, f_scale, mlp.coefs_[0].copy(), mlp.intercepts_[0].copy(), w1, b1)


def save_probe(path, probe: ProbeModel, scorer: ScoringEncoder) -> None:
    tensors = probe.to_tensors() | {f"scorer.{k}": v for k, v in checkpoint.state_dict(scorer).items()}
    checkpoint.save(path, tensors)
    meta = {"scorer_encoder": vars(scorer.encoder.config), "n_classes": scorer.classes.shape[0],
            "scale": scorer.scale}
    Path(f"{path}.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_probe(path) -> tuple[ProbeModel, ScoringEncoder]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"probe checkpoint not found: {path}")
    tensors = checkpoint.load(path)
    meta = json.loads(Path(f"{path}.json").read_text())
    scorer = ScoringEncoder(SpeakerEncoderConfig(**meta["scorer_encoder"]), meta["n_classes"],
                            scale=meta["scale"])
    checkpoint.load_into(scorer, {k[len("scorer."):]: v for k, v in tensors.items() if k.startswith("scorer.")})
    return ProbeModel.from_tensors(tensors), scorer


# ---------------------------------------------------------------------------
# metrics


def speaker_similarity(reference, synthesized, encoder) -> float:
    """Cosine of pooled embeddings; ``encoder`` needs ``embed(feats) -> 1 x E``."""
    return cosine(encoder.embed(reference), encoder.embed(synthesized))


def decode_tokens(feats, durations, probe: ProbeModel, allowed=None) -> list[int]:
    """Majority vote of frame predictions inside each duration segment."""
    durations = np.asarray(durations, dtype=np.int64)
    if durations.sum() != len(feats):
        raise EvalError(f"durations cover {durations.sum()} frames but features have {len(feats)}")
    logits = probe.frame_logits(feats)
    if allowed is not None:
        mask = np.full(logits.shape[1], -np.inf)
        mask[np.asarray(allowed)] = 0.0
        logits = logits + mask
    pred = logits.argmax(axis=1)
    out = []
    start = 0
    for d in durations:
        if d > 0:
            seg = pred[start : start + d]
            vals, counts = np.unique(seg, return_counts=True)
            out.append(int(vals[counts.argmax()]))
        start += d
    return out


def token_error_rate(synthesized, expected_tokens, probe: ProbeModel, durations, allowed=None) -> float:
    """Edit distance between decoded and expected tokens, as a percentage."""
    expected = list(np.asarray(expected_tokens).tolist())
    if not expected:
        raise EvalError("token error rate needs a non-empty expected sequence")
    hyp = decode_tokens(synthesized, durations, probe, allowed)
    return 100.0 * edit_distance(hyp, expected) / len(expected)


# ---------------------------------------------------------------------------
# cross-lingual protocol


RAW_COLUMNS = ("speaker", "ref_lang", "tgt_lang", "text", "bottleneck", "cosine", "cross_cosine", "ter",
               *(f"{f}_true" for f in THETA_FIELDS), *(f"{f}_hat" for f in THETA_FIELDS))


def text_set(corpus: Corpus, language: int, n_texts: int, seed: int = 0) -> list[np.ndarray]:
    """Fixed evaluation sentences for one language (not taken from the corpus)."""
    cfg = corpus.config
    rng = np.random.default_rng([cfg.seed, seed, 99, language])
    lang = corpus.languages[language]
    return [rng.choice(lang.token_ids, size=int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1)))
            for _ in range(n_texts)]


def corpus_id(corpus: Corpus) -> str:
    import hashlib

    return hashlib.sha256((corpus.root / "manifest.jsonl").read_bytes()).hexdigest()[:16]


def check_zero_shot(corpus: Corpus, train_speakers) -> None:
    leaked = set(train_speakers) & set(corpus.heldout_speakers)
    if leaked:
        raise EvalError(f"zero-shot violation: held-out speakers {sorted(leaked)} were used in training")


def cross_lingual_eval(model: VoiceTransferTTS, corpus: Corpus, probe: ProbeModel, scorer,
                       bottleneck: str | None = None, n_texts: int = 4) -> list[dict]:
    """Raw per-utterance scores for every held-out speaker and ordered language pair.

    Same-language pairs are included as controls.  ``cross_cosine`` is the
    mean similarity between the synthesized clip and the references of the
    *other* held-out speakers in the same reference language.
    """
    heldout = corpus.heldout_speakers
    if not heldout:
        raise EvalError("corpus has no held-out speakers")
    bottleneck = bottleneck or model.config.bottleneck
    n_lang = corpus.config.n_languages
    refs: dict[tuple[int, int], np.ndarray] = {}
    for rec in corpus.split("heldout"):
        refs.setdefault((rec.speaker, rec.language), corpus.features(rec))
    ref_emb = {k: scorer.embed(v) for k, v in refs.items()}
    texts = {b: text_set(corpus, b, n_texts) for b in range(n_lang)}
    rows = []
    for s in heldout:
        theta = corpus.speakers[s].theta
        for a in range(n_lang):
            ref = refs[(s, a)]
            for b in range(n_lang):
                allowed = corpus.languages[b].token_ids
                for ti, tokens in enumerate(texts[b]):
                    syn = model.synthesize(tokens, ref)
                    emb = scorer.embed(syn.features)
                    same = cosine(ref_emb[(s, a)], emb)
                    cross = float(np.mean([cosine(ref_emb[(o, a)], emb) for o in heldout if o != s]))
                    ter = token_error_rate(syn.features, tokens, probe, syn.durations, allowed)
                    hat = probe.predict_theta(syn.features)
                    row = {"speaker": s, "ref_lang": a, "tgt_lang": b, "text": ti, "bottleneck": bottleneck,
                           "cosine": same, "cross_cosine": cross, "ter": ter}
                    row.update({f"{f}_true": float(theta[i]) for i, f in enumerate(THETA_FIELDS)})
                    row.update({f"{f}_hat": float(hat[i]) for i, f in enumerate(THETA_FIELDS)})
                    rows.append(row)
    return rows


def gold_ceiling(corpus: Corpus, probe: ProbeModel) -> dict:
    """Probe quality on held-out gold renderings (TER and pitch R^2)."""
    ters, true, hat = [], [], []
    for rec in corpus.split("heldout"):
        f = corpus.features(rec)
        ters.append(token_error_rate(f, rec.tokens, probe, rec.durations,
                                     corpus.languages[rec.language].token_ids))
        true.append(corpus.speakers[rec.speaker].pitch_factor)
        hat.append(probe.predict_theta(f)[0])
    return {"ter": float(np.mean(ters)), "pitch_r2": r_squared(true, hat)}


def summarize(rows: list[dict]) -> dict:
    """Aggregate scores over a set of raw rows."""
    cos = np.array([r["cosine"] for r in rows])
    cross = np.array([r["cross_cosine"] for r in rows])
    return {
        "n": len(rows),
        "same_mean": float(cos.mean()),
        "cross_mean": float(cross.mean()),
        "margin": float(cos.mean() - cross.mean()),
        "pitch_r2": r_squared([r["pitch_factor_true"] for r in rows], [r["pitch_factor_hat"] for r in rows]),
        "ter": float(np.mean([r["ter"] for r in rows])),
    }


@dataclass
class SimilarityReport:
    pairs: dict  # (ref_lang, tgt_lang) -> summary
    cross_lingual: dict  # summary over ref_lang != tgt_lang
    same_language: dict
    same_mean: float
    cross_mean: float
    margin: float


def similarity_report(rows: list[dict]) -> SimilarityReport:
    pairs = {}
    for key in sorted({(r["ref_lang"], r["tgt_lang"]) for r in rows}):
        pairs[key] = summarize([r for r in rows if (r["ref_lang"], r["tgt_lang"]) == key])
    xl = summarize([r for r in rows if r["ref_lang"] != r["tgt_lang"]])
    sl = summarize([r for r in rows if r["ref_lang"] == r["tgt_lang"]])
    return SimilarityReport(pairs, xl, sl, xl["same_mean"], xl["cross_mean"], xl["margin"])


def write_raw_scores(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RAW_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})  # repr round-trips exactly


def read_raw_scores(path) -> list[dict]:
    ints = {"speaker", "ref_lang", "tgt_lang", "text"}
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({k: (int(v) if k in ints else v if k == "bottleneck" else float(v)) for k, v in r.items()})
    return out


# ---------------------------------------------------------------------------
# bottleneck comparison


REPORT_METRICS = ("margin", "pitch_r2", "ter")


def bottleneck_report(raw: dict[str, list[dict]], corpus_ids: dict[str, str] | None = None) -> list[dict]:
    """One row per language pair (plus a cross-lingual mean row); columns per bottleneck."""
    if corpus_ids is not None and len(set(corpus_ids.values())) > 1:
        raise EvalError(f"checkpoints were evaluated on different corpora: {corpus_ids}")
    kinds = [k for k in BOTTLENECK_ORDER if k in raw] + sorted(set(raw) - set(BOTTLENECK_ORDER))
    pair_keys = sorted({(r["ref_lang"], r["tgt_lang"]) for rows in raw.values() for r in rows})
    table = []
    for key in pair_keys + ["cross_lingual"]:
        label = "cross_lingual" if key == "cross_lingual" else f"{key[0]}->{key[1]}"
        row = {"pair": label}
        for kind in kinds:
            rows = raw[kind]
            sel = ([r for r in rows if r["ref_lang"] != r["tgt_lang"]] if key == "cross_lingual"
                   else [r for r in rows if (r["ref_lang"], r["tgt_lang"]) == key])
            summ = summarize(sel)
            for m in REPORT_METRICS:
                row[f"{kind}.{m}"] = summ[m]
        table.append(row)
    return table


def report_csv(table: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(table[0]), lineterminator="\n")
    w.writeheader()
    for r in table:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def report_svg(table: list[dict], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "vtransfer-report"
    summary = table[-1]
    kinds = sorted({k.split(".")[0] for k in summary if "." in k},
                   key=lambda k: BOTTLENECK_ORDER.index(k) if k in BOTTLENECK_ORDER else 99)
    fig, axes = plt.subplots(1, len(REPORT_METRICS), figsize=(10, 3.2))
    titles = {"margin": "similarity margin", "pitch_r2": "pitch R^2", "ter": "TER (%)"}
    for ax, m in zip(axes, REPORT_METRICS):
        vals = [summary[f"{k}.{m}"] for k in kinds]
        ax.bar(range(len(kinds)), vals, color="#4a7ab0")
        ax.set_xticks(range(len(kinds)))
        ax.set_xticklabels(kinds, rotation=30, ha="right", fontsize=8)
        ax.set_title(titles[m], fontsize=9)
    fig.suptitle("cross-lingual zero-shot transfer, held-out speakers", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
