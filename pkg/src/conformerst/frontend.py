"""Audio ingestion and features: WAV I/O, log-mel filterbanks, SpecAugment,
energy-based VAD segmentation, and the synthetic tone-word corpus used for
desk-scale experiments."""

from __future__ import annotations

import math
import os
import wave
import warnings
from dataclasses import dataclass, field

import numpy as np

from .textproc import ManifestEntry, save_manifest

SAMPLE_RATE = 16000
FRAME_LEN = 400  # 25 ms
FRAME_SHIFT = 160  # 10 ms
NUM_MELS = 80
LOG_FLOOR = 1e-10
TOKEN_DUR_S = 0.2


# ---------------------------------------------------------------------------
# WAV I/O (PCM 16-bit LE, mono, 16 kHz only; no resampling)
# ---------------------------------------------------------------------------


def read_wav(path) -> np.ndarray:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, got {w.getframerate()}")
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples: np.ndarray) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm.tobytes())


@dataclass
class AudioSegment:
    samples: np.ndarray
    start_s: float
    end_s: float

    def __post_init__(self):
        expected = round((self.end_s - self.start_s) * SAMPLE_RATE)
        if len(self.samples) != expected:
            raise ValueError(
                f"segment sample count {len(self.samples)} != round((end-start)*rate) = {expected}"
            )
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("segment contains non-finite samples")
        if np.abs(self.samples).max(initial=0.0) > 1.0:
            raise ValueError("segment samples exceed [-1, 1]")

    @property
    def duration_s(self):
        return self.end_s - self.start_s


# ---------------------------------------------------------------------------
# log-mel features
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_mels=NUM_MELS, n_fft=FRAME_LEN, f_min=0.0, f_max=SAMPLE_RATE / 2):
    """Triangular mel filters over [f_min, f_max]; rows num_mels x (n_fft//2+1)."""
    mel_pts = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), num_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bins = np.fft.rfftfreq(n_fft, d=1.0 / SAMPLE_RATE)
    fb = np.zeros((num_mels, len(bins)))
    for i in range(num_mels):
        lo, mid, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


_FILTERBANK = None


def _filterbank():
    global _FILTERBANK
    if _FILTERBANK is None:
        _FILTERBANK = mel_filterbank()
    return _FILTERBANK


def num_frames(num_samples: int) -> int:
    return 1 + (num_samples - FRAME_LEN) // FRAME_SHIFT


def extract_features(segment) -> np.ndarray:
    """T x 80 log-mel energies (Hann window, power spectrum, natural log)."""
    samples = segment.samples if isinstance(segment, AudioSegment) else np.asarray(segment)
    if len(samples) < FRAME_LEN:
        raise ValueError(
            f"segment too short for feature extraction: {len(samples)} samples, "
            f"minimum is one {FRAME_LEN}-sample window"
        )
    t = num_frames(len(samples))
    idx = np.arange(t)[:, None] * FRAME_SHIFT + np.arange(FRAME_LEN)[None, :]
    frames = samples[idx]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(FRAME_LEN) / FRAME_LEN)
    spec = np.fft.rfft(frames * window, axis=1)
    power = spec.real**2 + spec.imag**2
    mel = power @ _filterbank().T
    return np.log(np.maximum(mel, LOG_FLOOR))


# ---------------------------------------------------------------------------
# SpecAugment
# ---------------------------------------------------------------------------


@dataclass
class SpecAugmentPolicy:
    num_freq_masks: int = 2
    max_freq_width: int = 27
    num_time_masks: int = 2
    max_time_width: int = 100
    seed: int = 0


def spec_augment(features: np.ndarray, policy: SpecAugmentPolicy) -> np.ndarray:
    """Mask random frequency bands and time spans with the utterance mean."""
    t, f = features.shape
    max_fw = policy.max_freq_width
    max_tw = policy.max_time_width
    if max_fw > f:
        warnings.warn(f"spec_augment: freq width {max_fw} clamped to {f} bins")
        max_fw = f
    if max_tw > t:
        warnings.warn(f"spec_augment: time width {max_tw} clamped to {t} frames")
        max_tw = t
    rng = np.random.default_rng(policy.seed)
    out = features.copy()
    fill = features.mean()
    for _ in range(policy.num_freq_masks):
        width = int(rng.integers(0, max_fw + 1))
        start = int(rng.integers(0, f - width + 1))
        out[:, start : start + width] = fill
    for _ in range(policy.num_time_masks):
        width = int(rng.integers(0, max_tw + 1))
        start = int(rng.integers(0, t - width + 1))
        out[start : start + width, :] = fill
    return out


# ---------------------------------------------------------------------------
# energy-VAD segmentation
# ---------------------------------------------------------------------------


@dataclass
class VadParams:
    frame_s: float = 0.025
    threshold_ratio: float = 0.02  # of the max frame RMS
    min_silence_s: float = 0.3


def segment_audio(waveform: np.ndarray, target_len_s: float = 16.0, vad: VadParams | None = None):
    """Remove long silences and greedily split speech near target_len_s.

    Cuts are placed at the lowest-energy frame inside a window of
    [0.75, 1.25] * target_len_s from the running segment start; energy ties
    break toward the target length.
    """
    vad = vad or VadParams()
    waveform = np.asarray(waveform, dtype=np.float64)
    flen = int(round(vad.frame_s * SAMPLE_RATE))
    nf = len(waveform) // flen
    if nf == 0:
        return []
    frames = waveform[: nf * flen].reshape(nf, flen)
    rms = np.sqrt((frames**2).mean(axis=1))
    peak = rms.max()
    if peak <= 0:
        return []
    speech = rms >= vad.threshold_ratio * peak
    if not speech.any():
        return []

    # drop silence runs of at least min_silence_s; keep shorter gaps
    min_sil = max(1, int(round(vad.min_silence_s / vad.frame_s)))
    regions = []  # (start_frame, end_frame) of retained speech
    i = 0
    cur_start = None
    while i <= nf:
        is_speech = speech[i] if i < nf else False
        if is_speech and cur_start is None:
            cur_start = i
        elif not is_speech and cur_start is not None:
            j = i
            while j < nf and not speech[j]:
                j += 1
            if j - i >= min_sil or j >= nf:
                regions.append((cur_start, i))
                cur_start = None
            i = j
            continue
        i += 1

    segments = []
    lo_w = 0.75 * target_len_s / vad.frame_s
    hi_w = 1.25 * target_len_s / vad.frame_s
    tgt_w = target_len_s / vad.frame_s
    for start, end in regions:
        cuts = [start]
        pos = start
        while end - pos > hi_w:
            w_lo = pos + int(math.floor(lo_w))
            w_hi = min(pos + int(math.ceil(hi_w)), end - 1)
            window = rms[w_lo:w_hi]
            # near-ties on energy break toward the target length
            near_min = window <= window.min() + 1e-3 * peak
            best = np.flatnonzero(near_min) + w_lo
            cut = int(best[np.argmin(np.abs(best - (pos + tgt_w)))])
            cuts.append(cut)
            pos = cut
        cuts.append(end)
        # fold a short tail into the previous segment when that stays in budget
        if len(cuts) >= 3 and cuts[-1] - cuts[-2] < lo_w and cuts[-1] - cuts[-3] <= hi_w:
            del cuts[-2]
        for a, b in zip(cuts[:-1], cuts[1:]):
            s0, s1 = a * flen, b * flen
            segments.append(
                AudioSegment(waveform[s0:s1], s0 / SAMPLE_RATE, s1 / SAMPLE_RATE)
            )
    return segments


# ---------------------------------------------------------------------------
# synthetic tone-word corpus
# ---------------------------------------------------------------------------

SOURCE_WORDS = ["ba", "de", "ki", "mo", "ru", "sa", "te", "vi", "no", "lu",
                "pe", "go", "fa", "zi", "me", "du"]
TARGET_WORDS = ["ol", "ym", "ax", "ur", "ec", "iv", "os", "an", "ek", "uz",
                "ip", "oy", "eb", "ag", "uf", "yd"]


def token_frequency(index: int) -> float:
    """Distinct base frequency per pseudo-word, well separated for FFT picks."""
    return 400.0 + 150.0 * index


@dataclass
class CorpusSpec:
    num_utts: int
    token_inventory: list = field(default_factory=lambda: SOURCE_WORDS[:8])
    min_tokens: int = 3
    max_tokens: int = 8
    seed: int = 0
    src_lang: str = "en"
    tgt_lang: str = "it"


def render_tokens(token_indices) -> np.ndarray:
    """Concatenate 0.2 s tones, one per token, with short fade ramps."""
    n = int(TOKEN_DUR_S * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    ramp = np.ones(n)
    edge = int(0.005 * SAMPLE_RATE)
    ramp[:edge] = np.linspace(0.0, 1.0, edge)
    ramp[-edge:] = np.linspace(1.0, 0.0, edge)
    pieces = [0.3 * np.sin(2 * np.pi * token_frequency(i) * t) * ramp for i in token_indices]
    return np.concatenate(pieces)


def classify_tokens(samples: np.ndarray, inventory_size: int) -> list:
    """Oracle inverse of render_tokens: per-slice FFT peak -> nearest token."""
    n = int(TOKEN_DUR_S * SAMPLE_RATE)
    freqs = np.array([token_frequency(i) for i in range(inventory_size)])
    out = []
    for k in range(len(samples) // n):
        chunk = samples[k * n : (k + 1) * n]
        spec = np.abs(np.fft.rfft(chunk))
        peak_hz = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE)[np.argmax(spec)]
        out.append(int(np.argmin(np.abs(freqs - peak_hz))))
    return out


def synth_corpus(spec: CorpusSpec, out_dir):
    """Generate WAV files plus a manifest; fully reproducible from the seed.

    The translation is a fixed per-token remapping of the source inventory
    into a disjoint target inventory, so the translation task is exactly
    learnable and measurable without human references.
    """
    if not spec.token_inventory:
        raise ValueError("synth_corpus: empty token inventory")
    if len(spec.token_inventory) > len(TARGET_WORDS):
        raise ValueError(f"synth_corpus: inventory larger than {len(TARGET_WORDS)} is unsupported")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    translation_of = {w: TARGET_WORDS[i] for i, w in enumerate(spec.token_inventory)}
    entries = []
    for u in range(spec.num_utts):
        count = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        idx = rng.integers(0, len(spec.token_inventory), size=count).tolist()
        samples = render_tokens(idx)
        path = os.path.join(out_dir, f"utt{u:04d}.wav")
        write_wav(path, samples)
        words = [spec.token_inventory[i] for i in idx]
        entries.append(
            ManifestEntry(
                audio=path,
                duration_s=round(count * TOKEN_DUR_S, 6),
                src_lang=spec.src_lang,
                transcript=" ".join(words),
                translation=" ".join(translation_of[w] for w in words),
                tgt_lang=spec.tgt_lang,
            )
        )
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    save_manifest(entries, manifest_path)
    return entries, manifest_path

class FeatureCache:
    """Lazily extracts and memoizes log-mel features for manifest entries."""

    def __init__(self, root=None):
        self.root = root
        self._store = {}

    def resolve(self, entry) -> str:
        path = entry.audio
        if self.root is not None and not os.path.isabs(path):
            candidate = os.path.join(self.root, path)
            if os.path.exists(candidate):
                return candidate
        return path

    def __call__(self, entry) -> np.ndarray:
        path = self.resolve(entry)
        if path not in self._store:
            if not os.path.exists(path):
                raise FileNotFoundError(f"audio file not found: {path}")
            self._store[path] = extract_features(read_wav(path))
        return self._store[path]
