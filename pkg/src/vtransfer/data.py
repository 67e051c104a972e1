"""Deterministic synthetic multi-speaker, multi-language corpus.

A "speaker" is four numbers (pitch factor, spectral tilt, formant offset,
speaking rate) and a "language" is a disjoint token inventory where each
token owns a log-energy band template and a mean duration.  Rendering warps
the template along the band axis, so voice identity is a known ground truth.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .backbone import round_half_away

FEATURE_MAGIC = b"VTF1"
FRAME_RATE = 50

PITCH_RANGE = (0.7, 1.4)
TILT_RANGE = (-0.5, 0.5)
OFFSET_RANGE = (-2.0, 2.0)
RATE_RANGE = (0.7, 1.4)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpeaker:
    id: int
    pitch_factor: float
    spectral_tilt: float
    formant_offset: float
    rate_factor: float

    def __post_init__(self):
        for name, (lo, hi) in (("pitch_factor", PITCH_RANGE), ("spectral_tilt", TILT_RANGE),
                               ("formant_offset", OFFSET_RANGE), ("rate_factor", RATE_RANGE)):
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise CorpusError(f"speaker {self.id}: {name}={v} outside [{lo}, {hi}]")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.pitch_factor, self.spectral_tilt, self.formant_offset, self.rate_factor])


THETA_FIELDS = ("pitch_factor", "spectral_tilt", "formant_offset", "rate_factor")
THETA_RANGES = (PITCH_RANGE, TILT_RANGE, OFFSET_RANGE, RATE_RANGE)


@dataclass(frozen=True)
class SyntheticLanguage:
    id: int
    first_token: int
    templates: np.ndarray  # V x D log-energies
    mean_durations: np.ndarray  # V frames

    @property
    def size(self) -> int:
        return self.templates.shape[0]

    @property
    def token_ids(self) -> np.ndarray:
        return np.arange(self.first_token, self.first_token + self.size)

    def contains(self, token: int) -> bool:
        return self.first_token <= token < self.first_token + self.size

    def to_dict(self) -> dict:
        return {"id": self.id, "first_token": self.first_token,
                "templates": self.templates.tolist(), "mean_durations": self.mean_durations.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticLanguage":
        return cls(d["id"], d["first_token"], np.array(d["templates"]), np.array(d["mean_durations"]))


@dataclass
class Utterance:
    speaker: int
    language: int
    tokens: np.ndarray
    durations: np.ndarray
    features: np.ndarray
    frame_rate: int = FRAME_RATE


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 7
    n_speakers: int = 40
    n_languages: int = 3
    utts_per_speaker: int = 24
    n_bands: int = 32
    tokens_per_language: int = 24
    min_tokens: int = 24
    max_tokens: int = 48
    noise_std: float = 0.05
    heldout_fraction: float = 0.2

    def __post_init__(self):
        if self.n_speakers < 2:
            raise CorpusError("need at least 2 speakers")
        if self.n_languages < 2:
            raise CorpusError("need at least 2 languages")
        if self.utts_per_speaker < 1 or self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise CorpusError(f"invalid utterance sizes in {self}")

    @property
    def vocab_size(self) -> int:
        return self.n_languages * self.tokens_per_language

    @property
    def n_heldout(self) -> int:
        return max(1, math.ceil(self.heldout_fraction * self.n_speakers))


# ---------------------------------------------------------------------------
# generators


def make_speakers(cfg: CorpusConfig) -> list[SyntheticSpeaker]:
    rng = np.random.default_rng([cfg.seed, 1])
    out = []
    for i in range(cfg.n_speakers):
        p, t, o, r = (rng.uniform(*PITCH_RANGE), rng.uniform(*TILT_RANGE),
                      rng.uniform(*OFFSET_RANGE), rng.uniform(*RATE_RANGE))
        out.append(SyntheticSpeaker(i, float(p), float(t), float(o), float(r)))
    return out


def make_language(cfg: CorpusConfig, lang: int) -> SyntheticLanguage:
    """Each token: a -3 floor plus three Gaussian bumps ("formants")."""
    rng = np.random.default_rng([cfg.seed, 2, lang])
    bands = np.arange(cfg.n_bands, dtype=np.float64)
    lo, hi = 0.25 * cfg.n_bands, 0.7 * cfg.n_bands
    templates = np.full((cfg.tokens_per_language, cfg.n_bands), -3.0)
    for v in range(cfg.tokens_per_language):
        centers = rng.uniform(lo, hi, size=3)
        amps = rng.uniform(1.5, 3.5, size=3)
        widths = rng.uniform(1.0, 2.5, size=3)
        for c, a, w in zip(centers, amps, widths):
            templates[v] += a * np.exp(-0.5 * ((bands - c) / w) ** 2)
    durations = rng.uniform(4.0, 8.0, size=cfg.tokens_per_language)
    return SyntheticLanguage(lang, lang * cfg.tokens_per_language, templates, durations)


def warp_template(template: np.ndarray, speaker: SyntheticSpeaker) -> np.ndarray:
    """Shift by ``formant_offset`` bands, stretch by ``pitch_factor``, add tilt.

    Band ``b`` reads the template at ``(b - offset) / pitch`` (linear
    interpolation, edge values held), then adds ``tilt * b / (D - 1)``.
    """
    d = template.shape[-1]
    bands = np.arange(d, dtype=np.float64)
    src = (bands - speaker.formant_offset) / speaker.pitch_factor
    grid = np.arange(d, dtype=np.float64)
    if template.ndim == 1:
        warped = np.interp(src, grid, template)
    else:
        warped = np.stack([np.interp(src, grid, row) for row in template])
    return warped + speaker.spectral_tilt * bands / (d - 1)


def token_durations(language: SyntheticLanguage, tokens, rate_factor: float) -> np.ndarray:
    local = np.asarray(tokens) - language.first_token
    return np.maximum(round_half_away(language.mean_durations[local] / rate_factor), 1)


def retime(features, durations, factor: float) -> tuple[np.ndarray, np.ndarray]:
    """Speed an utterance up by ``factor`` (> 1 is faster), token by token.

    Each token segment is resampled by nearest frame to
    ``max(1, round(d / factor))`` frames, the same rounding the renderer uses.
    """
    if not factor > 0:
        raise CorpusError(f"tempo factor must be > 0, got {factor}")
    durations = np.asarray(durations, dtype=np.int64)
    new = np.maximum(round_half_away(durations / factor), 1)
    starts = np.concatenate([[0], np.cumsum(durations)[:-1]])
    idx = np.concatenate([s + (np.arange(n) * d) // n for s, d, n in zip(starts, durations, new)])
    return np.asarray(features)[idx], new


def render_utterance(speaker: SyntheticSpeaker, language: SyntheticLanguage, tokens,
                     noise_seed=None, noise_std: float = 0.05) -> Utterance:
    tokens = np.asarray(tokens, dtype=np.int64)
    bad = [int(t) for t in tokens if not language.contains(int(t))]
    if bad:
        raise CorpusError(f"tokens {bad[:5]} are outside language {language.id}'s inventory")
    durations = token_durations(language, tokens, speaker.rate_factor)
    rows = warp_template(language.templates[tokens - language.first_token], speaker)
    feats = np.repeat(rows, durations, axis=0)
    if noise_std > 0:
        rng = np.random.default_rng(noise_seed)
        feats = feats + rng.normal(0.0, noise_std, size=feats.shape)
    return Utterance(speaker.id, language.id, tokens, durations, feats)


def sample_reference_chunk(features, rng: np.random.Generator, frame_rate: int = FRAME_RATE,
                           mean_sec: float = 8.0, std_sec: float = 3.0,
                           min_sec: float = 1.0, max_sec: float = 15.0) -> np.ndarray:
    """Random contiguous chunk whose length is a clipped Gaussian in seconds.

    Length ~ clip(N(mean, std), min, max) seconds, then capped at the
    utterance length; start is uniform.  Utterances shorter than ``min_sec``
    are returned whole.
    """
    start, length = sample_chunk_bounds(len(features), rng, frame_rate, mean_sec, std_sec, min_sec, max_sec)
    return features[start : start + length]


def sample_chunk_bounds(n_frames: int, rng: np.random.Generator, frame_rate: int = FRAME_RATE,
                        mean_sec: float = 8.0, std_sec: float = 3.0,
                        min_sec: float = 1.0, max_sec: float = 15.0) -> tuple[int, int]:
    if n_frames < 1:
        raise CorpusError("cannot take a chunk of an empty utterance")
    seconds = min(max(rng.normal(mean_sec, std_sec), min_sec), max_sec)
    if n_frames < min_sec * frame_rate:
        return 0, n_frames
    length = min(int(round(seconds * frame_rate)), n_frames)
    start = int(rng.integers(0, n_frames - length + 1))
    return start, length


# ---------------------------------------------------------------------------
# feature files


def write_features(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats)
    if feats.ndim != 2:
        raise CorpusError(f"features must be T x D, got shape {feats.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", *feats.shape))
        fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise CorpusError(f"{path}: bad magic {data[:4]!r}, expected {FEATURE_MAGIC!r}")
    t, d = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * t * d:
        raise CorpusError(f"{path}: expected {t}x{d} floats, file has {len(data) - 12} payload bytes")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(t, d).astype(np.float64)


# ---------------------------------------------------------------------------
# corpus


def _utterance_plan(cfg: CorpusConfig):
    """Yields ``(index, speaker, language, rng)`` in a fixed order."""
    for s in range(cfg.n_speakers):
        for j in range(cfg.utts_per_speaker):
            u = s * cfg.utts_per_speaker + j
            yield u, s, j % cfg.n_languages, np.random.default_rng([cfg.seed, 4, u])


def make_corpus(out_dir, cfg: CorpusConfig) -> Path:
    out = Path(out_dir)
    try:
        (out / "feats").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot create corpus directory {out}: {exc}") from exc
    speakers = make_speakers(cfg)
    languages = [make_language(cfg, l) for l in range(cfg.n_languages)]
    heldout = set(int(i) for i in np.random.default_rng([cfg.seed, 3]).permutation(cfg.n_speakers)[: cfg.n_heldout])

    _write_json(out / "corpus.json", asdict(cfg))
    _write_json(out / "speakers.json", [asdict(s) | {"split": "heldout" if s.id in heldout else "train"}
                                        for s in speakers])
    _write_json(out / "languages.json", [lang.to_dict() for lang in languages])

    lines = []
    for u, s, l, rng in _utterance_plan(cfg):
        lang = languages[l]
        n = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
        tokens = rng.choice(lang.token_ids, size=n)
        utt = render_utterance(speakers[s], lang, tokens, noise_seed=rng, noise_std=cfg.noise_std)
        rel = f"feats/utt_{u:05d}.vtf"
        write_features(out / rel, utt.features)
        lines.append(json.dumps({
            "utt_id": u, "speaker": s, "language": l,
            "split": "heldout" if s in heldout else "train",
            "tokens": utt.tokens.tolist(), "durations": utt.durations.tolist(),
            "frames": int(utt.features.shape[0]), "features": rel,
        }, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


@dataclass
class Record:
    utt_id: int
    speaker: int
    language: int
    split: str
    tokens: np.ndarray
    durations: np.ndarray
    frames: int
    features: str


class Corpus:
    """Read-only view of a generated corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "manifest.jsonl"
        if not manifest.exists():
            raise CorpusError(f"no manifest at {manifest}")
        self.config = CorpusConfig(**json.loads((self.root / "corpus.json").read_text()))
        self.speakers = [SyntheticSpeaker(**{k: v for k, v in d.items() if k != "split"})
                         for d in json.loads((self.root / "speakers.json").read_text())]
        self.languages = [SyntheticLanguage.from_dict(d)
                          for d in json.loads((self.root / "languages.json").read_text())]
        self.records = []
        for line in manifest.read_text().splitlines():
            d = json.loads(line)
            d["tokens"] = np.array(d["tokens"], dtype=np.int64)
            d["durations"] = np.array(d["durations"], dtype=np.int64)
            self.records.append(Record(**d))
        self._cache: dict[int, np.ndarray] = {}

    @cached_property
    def heldout_speakers(self) -> list[int]:
        return sorted({r.speaker for r in self.records if r.split == "heldout"})

    @cached_property
    def train_speakers(self) -> list[int]:
        return sorted({r.speaker for r in self.records if r.split == "train"})

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def features(self, rec: Record) -> np.ndarray:
        if rec.utt_id not in self._cache:
            self._cache[rec.utt_id] = read_features(self.root / rec.features)
        return self._cache[rec.utt_id]

    def render(self, speaker: int, language: int, tokens, noise_seed=None, noise_std: float = 0.0) -> Utterance:
        return render_utterance(self.speakers[speaker], self.languages[language], tokens,
                                noise_seed=noise_seed, noise_std=noise_std)
