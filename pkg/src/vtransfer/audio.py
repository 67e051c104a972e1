"""Toy sinusoidal vocoder and additive spread-spectrum watermark.

The vocoder places one sinusoid per feature band on a mel-spaced grid between
100 Hz and 4 kHz, so everything above ``WM_BAND_HZ`` is left to the
watermark detector.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass
import numpy as np

SAMPLE_RATE = 16000
HOP = 320  # 50 frames per second
FULL_SCALE = 32767.0
PEAK_DBFS = -3.0
MAX_GAIN = 100.0
LEVEL_FLOOR = 0.1
WM_BAND_HZ = 5000.0
DEFAULT_THRESHOLD = 4.0  # null statistic is ~N(0, 1); see calibrate_threshold


class WatermarkError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray  # int16
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.dtype != np.int16:
            raise TypeError(f"waveform samples must be int16, got {self.samples.dtype}")

    def __len__(self) -> int:
        return len(self.samples)

    def as_float(self) -> np.ndarray:
        """Samples scaled to [-1, 1]."""
        return self.samples.astype(np.float64) / FULL_SCALE


@dataclass(frozen=True)
class WatermarkKey:
    seed: int
    amplitude: float = 1e-3  # fraction of full scale
    chip_rate: int = SAMPLE_RATE  # chips per second

    def __post_init__(self):
        if not self.amplitude > 0:
            raise WatermarkError(f"watermark amplitude must be > 0, got {self.amplitude}")
        if self.chip_rate < 1 or SAMPLE_RATE % self.chip_rate:
            raise WatermarkError(f"chip_rate must divide {SAMPLE_RATE}, got {self.chip_rate}")


def mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_inv(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def band_centers(n_bands: int, fmin: float = 100.0, fmax: float = 4000.0) -> np.ndarray:
    return mel_inv(np.linspace(mel(fmin), mel(fmax), n_bands))


def render_float(features, sample_rate: int = SAMPLE_RATE, hop: int = HOP) -> np.ndarray:
    """Features -> float waveform in [-1, 1], ``T * hop`` samples long.

    Band amplitudes are ``exp(feature)``, divided per frame by the frame's
    multisine RMS (floored at ``LEVEL_FLOOR``, so near-silent frames stay
    near-silent), then linearly interpolated between frame centres.  The
    result is scaled so its peak sits at -3 dBFS, gain capped at ``MAX_GAIN``.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError(f"features must be a non-empty T x D array, got shape {feats.shape}")
    if not np.all(np.isfinite(feats)):
        raise ValueError("features must be finite")
    n_frames, n_bands = feats.shape
    n = n_frames * hop
    t = np.arange(n)
    centers = np.arange(n_frames) * hop + hop / 2.0
    amps = np.exp(feats)
    level = np.sqrt(0.5 * (amps * amps).sum(axis=1, keepdims=True))
    amps = amps / np.maximum(level, LEVEL_FLOOR)
    freqs = band_centers(n_bands)
    # Schroeder phases keep the crest factor low
    phases = np.pi * np.arange(n_bands) ** 2 / n_bands
    out = np.zeros(n)
    for b in range(n_bands):
        env = np.interp(t, centers, amps[:, b])
        out += env * np.sin(2.0 * np.pi * freqs[b] * t / sample_rate + phases[b])
    peak = float(np.abs(out).max())
    if peak > 0:
        out *= min(10.0 ** (PEAK_DBFS / 20.0) / peak, MAX_GAIN)
    return out


def quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x * FULL_SCALE), -32768, 32767).astype(np.int16)


def render_wav(features, sample_rate: int = SAMPLE_RATE) -> Waveform:
    return Waveform(quantize(render_float(features, sample_rate)), sample_rate)


def write_wav(path, wav: Waveform) -> None:
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wav.sample_rate)
        fh.writeframes(wav.samples.astype("<i2").tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        data = fh.readframes(fh.getnframes())
        rate = fh.getframerate()
    return Waveform(np.frombuffer(data, dtype="<i2").astype(np.int16), rate)


# ---------------------------------------------------------------------------
# watermark


def chip_sequence(key: WatermarkKey, n: int) -> np.ndarray:
    """Keyed +-1 pseudo-noise sequence of length ``n`` samples."""
    hold = SAMPLE_RATE // key.chip_rate
    rng = np.random.default_rng([key.seed, 0x574D])
    chips = rng.integers(0, 2, size=-(-n // hold)) * 2 - 1
    return np.repeat(chips, hold)[:n].astype(np.float64)


def watermark_snr_db(wav: Waveform, key: WatermarkKey) -> float:
    signal_rms = math.sqrt(float(np.mean(wav.samples.astype(np.float64) ** 2)))
    mark_rms = key.amplitude * FULL_SCALE
    if signal_rms == 0:
        return -math.inf
    return 20.0 * math.log10(signal_rms / mark_rms)


def wm_embed(wav: Waveform, key: WatermarkKey, min_snr_db: float = 40.0) -> Waveform:
    """Add ``amplitude * FS * chips`` in the float domain, then re-quantize."""
    if len(wav) == 0:
        raise WatermarkError("cannot watermark an empty waveform")
    snr = watermark_snr_db(wav, key)
    if snr < min_snr_db:
        raise WatermarkError(
            f"watermark amplitude {key.amplitude} gives SNR {snr:.1f} dB, below the {min_snr_db} dB budget"
        )
    x = wav.samples.astype(np.float64) + key.amplitude * FULL_SCALE * chip_sequence(key, len(wav))
    return Waveform(np.clip(np.round(x), -32768, 32767).astype(np.int16), wav.sample_rate)


def _highband(x: np.ndarray, sample_rate: int) -> tuple[np.ndarray, int]:
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1.0 / sample_rate)
    keep = freqs >= WM_BAND_HZ
    spec[~keep] = 0.0
    return np.fft.irfft(spec, n=len(x)), int(keep.sum())


def wm_statistic(wav: Waveform, key: WatermarkKey) -> float:
    """Normalized correlation with the keyed chips above ``WM_BAND_HZ``, scaled to ~N(0, 1) under no mark."""
    if len(wav) == 0:
        return 0.0
    x, bins = _highband(wav.samples.astype(np.float64), wav.sample_rate)
    c, _ = _highband(chip_sequence(key, len(wav)), wav.sample_rate)
    denom = float(np.linalg.norm(x) * np.linalg.norm(c))
    if denom == 0:
        return 0.0
    return float(x @ c) / denom * math.sqrt(2 * bins)


def wm_detect(wav: Waveform, key: WatermarkKey, threshold: float = DEFAULT_THRESHOLD) -> tuple[float, bool]:
    stat = wm_statistic(wav, key)
    return stat, stat > threshold


def calibrate_threshold(clean_clips, keys, false_positive: float = 0.01) -> float:
    """Empirical ``1 - false_positive`` quantile of the statistic on unmarked clips."""
    stats = [wm_statistic(w, k) for w, k in zip(clean_clips, keys)]
    return float(np.quantile(stats, 1.0 - false_positive))

