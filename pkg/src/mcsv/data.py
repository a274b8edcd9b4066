"""Synthetic multi-speaker corpus, two-view crop sampling and audio augmentation.

Speakers are harmonic sources: a pulse train at a fixed fundamental
frequency driven through three resonators whose gains are the speaker's
identity.  Utterances vary the pitch contour, the phase of the pulse train
and the syllable-rate amplitude envelope, and carry white noise at 25 dB SNR.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .features import SAMPLE_RATE, Waveform, read_wav, write_wav

F0_RANGE = (90.0, 250.0)
FORMANT_HZ = (600.0, 1400.0, 2600.0)
FORMANT_BW_HZ = (120.0, 180.0, 260.0)
GAIN_RANGE_DB = (-18.0, 0.0)
UTTERANCE_NOISE_SNR_DB = 25.0
MANIFEST_NAME = "manifest.csv"
METADATA_NAME = "metadata.json"

NOISE_CLASSES = ("speech", "music", "noise")
DEFAULT_SNR_RANGES = {"speech": (13.0, 20.0), "music": (5.0, 15.0), "noise": (0.0, 15.0)}
T60_RANGE = (0.1, 0.5)


class CorpusError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# synthesis


@dataclass(frozen=True)
class SpeakerParams:
    f0: float
    gains: tuple[float, float, float]


def random_speaker(rng: np.random.Generator) -> SpeakerParams:
    f0 = float(rng.uniform(*F0_RANGE))
    gains_db = rng.uniform(*GAIN_RANGE_DB, size=3)
    return SpeakerParams(f0, tuple(float(10 ** (g / 20)) for g in gains_db))


def _resonator(fc: float, bw: float, sr: int):
    r = math.exp(-math.pi * bw / sr)
    theta = 2 * math.pi * fc / sr
    return [1.0 - r], [1.0, -2.0 * r * math.cos(theta), r * r]


def _syllable_envelope(n: int, rng: np.random.Generator, sr: int) -> np.ndarray:
    t = np.arange(n) / sr
    env = np.zeros(n)
    for rate in rng.uniform(2.0, 6.0, size=3):
        env += np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    env = np.clip(env / 3 + rng.uniform(0.1, 0.4), 0.0, None)
    return env / (env.max() + 1e-12)


def synthesize_voice(params: SpeakerParams, n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Voiced harmonic signal of ``n`` samples for one speaker (no added noise)."""
    t = np.arange(n) / sr
    # intonation: slow +-4 % pitch excursion with random rate and phase
    contour = 1.0 + 0.04 * np.sin(2 * np.pi * rng.uniform(0.3, 1.2) * t + rng.uniform(0, 2 * np.pi))
    phase = rng.uniform(0, 1) + np.cumsum(params.f0 * contour) / sr
    pulses = np.diff(np.floor(phase), prepend=np.floor(phase[0])).astype(np.float64)
    # one-pole lowpass gives the source a falling spectral tilt
    source = sps.lfilter([1.0], [1.0, -0.9], pulses)
    voiced = np.zeros(n)
    for fc, bw, g in zip(FORMANT_HZ, FORMANT_BW_HZ, params.gains):
        b, a = _resonator(fc, bw, sr)
        voiced += g * sps.lfilter(b, a, source)
    return voiced * _syllable_envelope(n, rng, sr)


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def synthesize_utterance(params: SpeakerParams, n: int, rng: np.random.Generator) -> np.ndarray:
    voiced = synthesize_voice(params, n, rng)
    noise = rng.standard_normal(n)
    out = voiced + noise * snr_scale(voiced, noise, UTTERANCE_NOISE_SNR_DB)
    return 0.5 * out / np.max(np.abs(out))


# ---------------------------------------------------------------------------
# corpus on disk


@dataclass
class SyntheticCorpus:
    root: Path
    speakers: int
    utterances_per_speaker: int
    utterance_len: float
    seed: int
    manifest: list[tuple[str, str, str]]
    speaker_params: dict[str, SpeakerParams] = field(default_factory=dict)


def generate_corpus(
    out_dir: str | Path,
    speakers: int,
    utterances_per_speaker: int,
    utterance_len: float = 5.0,
    seed: int = 0,
    crop_len: float = 2.0,
) -> SyntheticCorpus:
    """Write ``speakers * utterances_per_speaker`` WAV files plus manifest and metadata.

    Output is a deterministic function of the arguments.  The manifest is
    written last, atomically, so a failed run never leaves one behind.
    """
    if speakers < 2:
        raise ValueError(f"need at least 2 speakers, got {speakers}")
    if utterances_per_speaker < 2:
        raise ValueError(f"need at least 2 utterances per speaker, got {utterances_per_speaker}")
    if utterance_len < 2 * crop_len:
        raise ValueError(
            f"utterance_len {utterance_len}s cannot hold two non-overlapping {crop_len}s crops"
        )
    root = Path(out_dir)
    try:
        (root / "wav").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot create output directory {root}: {exc}") from exc
    if not os.access(root, os.W_OK):
        raise CorpusError(f"output directory {root} is not writable")

    n = int(round(utterance_len * SAMPLE_RATE))
    seq = np.random.SeedSequence(seed)
    spk_seq, utt_seq = seq.spawn(2)
    spk_rng = np.random.default_rng(spk_seq)
    params = {f"spk{s:03d}": random_speaker(spk_rng) for s in range(speakers)}
    utt_seeds = utt_seq.spawn(speakers * utterances_per_speaker)

    manifest = []
    meta_utts = {}
    k = 0
    for spk, p in params.items():
        for _ in range(utterances_per_speaker):
            utt_id = f"utt{k:05d}"
            rel = f"wav/{utt_id}.wav"
            audio = synthesize_utterance(p, n, np.random.default_rng(utt_seeds[k]))
            try:
                write_wav(root / rel, Waveform(audio))
            except OSError as exc:
                raise CorpusError(f"cannot write {root / rel}: {exc}") from exc
            manifest.append((utt_id, spk, rel))
            meta_utts[utt_id] = {"speaker_id": spk, "f0": p.f0, "gains": list(p.gains)}
            k += 1

    metadata = {
        "speakers": speakers,
        "utterances_per_speaker": utterances_per_speaker,
        "utterance_len": utterance_len,
        "seed": seed,
        "speaker_params": {s: {"f0": p.f0, "gains": list(p.gains)} for s, p in params.items()},
        "utterances": meta_utts,
    }
    _atomic_write(root / METADATA_NAME, json.dumps(metadata, indent=2, sort_keys=True))
    _atomic_write(root / MANIFEST_NAME, _manifest_text(manifest))
    return SyntheticCorpus(root, speakers, utterances_per_speaker, utterance_len, seed, manifest, params)


def _manifest_text(rows) -> str:
    lines = ["utterance_id,speaker_id,relative_path"]
    lines += [",".join(r) for r in rows]
    return "\n".join(lines) + "\n"


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def read_manifest(corpus_dir: str | Path) -> list[tuple[str, str, str]]:
    """Full manifest rows ``(utterance_id, speaker_id, relative_path)``; evaluation only."""
    path = Path(corpus_dir) / MANIFEST_NAME
    if not path.exists():
        raise CorpusError(f"no manifest at {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        return [(r["utterance_id"], r["speaker_id"], r["relative_path"]) for r in csv.DictReader(fh)]


class UtteranceStore:
    """Unlabeled training view of a corpus: utterance ids and their audio.

    Speaker labels are never loaded here; this is the only data source the
    trainer accepts.
    """

    def __init__(self, ids: list[str], audio: list[np.ndarray], sample_rate: int = SAMPLE_RATE):
        if len(ids) != len(audio):
            raise ValueError("ids and audio must align")
        self.ids = list(ids)
        self._audio = audio
        self.sample_rate = sample_rate

    @classmethod
    def from_corpus(cls, corpus_dir: str | Path) -> "UtteranceStore":
        root = Path(corpus_dir)
        path = root / MANIFEST_NAME
        if not path.exists():
            raise CorpusError(f"no manifest at {path}")
        ids, audio = [], []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                ids.append(row["utterance_id"])
                audio.append(read_wav(root / row["relative_path"]).samples)
        return cls(ids, audio)

    def __len__(self) -> int:
        return len(self.ids)

    def waveform(self, index: int) -> Waveform:
        return Waveform(self._audio[index], self.sample_rate)


# ---------------------------------------------------------------------------
# two-view sampling


@dataclass
class ViewPair:
    view_a: Waveform
    view_b: Waveform
    utterance_id: str = ""
    interval_a: tuple[int, int] = (0, 0)
    interval_b: tuple[int, int] = (0, 0)
    augmentations: tuple = ()


def intervals_overlap(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def sample_view_pair(
    utterance: Waveform, crop_len: float, rng: np.random.Generator, utterance_id: str = ""
) -> ViewPair:
    """Two disjoint equal-length crops, uniform over all disjoint placements."""
    c = int(round(crop_len * utterance.sample_rate))
    n = len(utterance)
    if c <= 0:
        raise ValueError("crop_len must be positive")
    if n < 2 * c:
        raise ValueError(
            f"utterance too short: {n} samples cannot hold two non-overlapping {c}-sample crops"
        )
    slack = n - 2 * c
    # disjoint ordered placements <-> 2-subsets of {0..slack+1} times an order bit
    lo, hi = np.sort(rng.choice(slack + 2, size=2, replace=False))
    first, second = int(lo), int(hi) - 1 + c
    if rng.random() < 0.5:
        first, second = second, first
    ia, ib = (first, first + c), (second, second + c)
    x = utterance.samples
    return ViewPair(
        Waveform(x[ia[0]:ia[1]].copy(), utterance.sample_rate),
        Waveform(x[ib[0]:ib[1]].copy(), utterance.sample_rate),
        utterance_id,
        ia,
        ib,
    )


# ---------------------------------------------------------------------------
# augmentation


def snr_scale(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    """Noise gain giving ``20 log10(rms(signal) / rms(gain * noise)) == snr_db``."""
    s, v = rms(signal), rms(noise)
    if s == 0:
        raise ValueError("signal has zero RMS")
    if v == 0:
        raise ValueError("noise has zero RMS")
    return (s / v) * 10.0 ** (-snr_db / 20.0)


def mix_at_snr(signal: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Add ``noise`` (looped or cropped to length) at the requested SNR."""
    x = signal.samples
    v = np.resize(noise.samples, x.shape[0])
    return Waveform(x + snr_scale(x, v, snr_db) * v, signal.sample_rate)


def apply_reverb(signal: Waveform, rir: Waveform) -> Waveform:
    """Convolve with ``rir``, truncate to input length, restore the input peak."""
    h = rir.samples
    x = signal.samples
    if h.size == 0:
        raise ValueError("room impulse response is empty")
    if h.size > x.size:
        raise ValueError(f"impulse response ({h.size}) longer than signal ({x.size})")
    out = sps.fftconvolve(x, h)[: x.size]
    peak_out = np.max(np.abs(out))
    if peak_out > 0:
        out = out * (np.max(np.abs(x)) / peak_out)
    return Waveform(out, signal.sample_rate)


def synthetic_rir(rng: np.random.Generator, t60: float | None = None, sr: int = SAMPLE_RATE, max_len: int | None = None) -> Waveform:
    """Exponentially decaying white noise with a unit direct-path tap."""
    if t60 is None:
        t60 = float(rng.uniform(*T60_RANGE))
    n = int(t60 * sr)
    if max_len is not None:
        n = min(n, max_len)
    n = max(n, 1)
    t = np.arange(n) / sr
    h = rng.standard_normal(n) * np.exp(-3.0 * math.log(10.0) * t / t60)
    h[0] = 1.0
    return Waveform(h, sr)


def _pink(n: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n)


def synthetic_noise(kind: str, n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Stand-ins for the three noise classes: babble, music, stationary noise."""
    if kind == "speech":
        babble = sum(synthesize_voice(random_speaker(rng), n, rng, sr) for _ in range(3))
        # room tone keeps pauses in the babble from being digitally silent
        floor = rng.standard_normal(n)
        return babble + floor * snr_scale(babble, floor, UTTERANCE_NOISE_SNR_DB)
    if kind == "music":
        t = np.arange(n) / sr
        out = np.zeros(n)
        for base in 110.0 * 2 ** rng.uniform(0, 3, size=4):
            glide = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(0.05, 0.3) * t + rng.uniform(0, 2 * np.pi))
            phase = 2 * np.pi * np.cumsum(base * glide) / sr + rng.uniform(0, 2 * np.pi)
            out += np.sin(phase) + 0.5 * np.sin(2 * phase) + 0.25 * np.sin(3 * phase)
        return out
    if kind == "noise":
        return rng.standard_normal(n) if rng.random() < 0.5 else _pink(n, rng)
    raise ValueError(f"unknown noise class {kind!r}")


class NoiseBank:
    """Fixed pool of noise clips per class and of impulse responses.

    Views draw random segments from the pool, the way a recorded noise
    corpus is used; the pool is a deterministic function of ``seed``.
    """

    CLIPS_PER_CLASS = 12
    CLIP_SEC = 4.0
    NUM_RIRS = 48

    def __init__(self, seed: int = 0, sr: int = SAMPLE_RATE):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB4]))
        n = int(self.CLIP_SEC * sr)
        self.sr = sr
        self.clips = {
            kind: [synthetic_noise(kind, n, rng, sr) for _ in range(self.CLIPS_PER_CLASS)]
            for kind in NOISE_CLASSES
        }
        self.rirs = [synthetic_rir(rng, sr=sr).samples for _ in range(self.NUM_RIRS)]

    def noise(self, kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
        clips = self.clips[kind]
        clip = clips[int(rng.integers(len(clips)))]
        start = int(rng.integers(clip.size))
        return np.resize(np.roll(clip, -start), n)

    def rir(self, rng: np.random.Generator, max_len: int) -> np.ndarray:
        return self.rirs[int(rng.integers(len(self.rirs)))][:max_len]


_BANKS: dict[tuple[int, int], NoiseBank] = {}


def noise_bank(seed: int = 0, sr: int = SAMPLE_RATE) -> NoiseBank:
    key = (seed, sr)
    if key not in _BANKS:
        _BANKS[key] = NoiseBank(seed, sr)
    return _BANKS[key]


@dataclass
class AugmentPolicy:
    enabled: bool = True
    noise_snr_db: dict = field(default_factory=lambda: dict(DEFAULT_SNR_RANGES))
    reverb_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.noise_snr_db = {k: (float(v[0]), float(v[1])) for k, v in self.noise_snr_db.items()}
        self.validate()

    def validate(self) -> None:
        if not self.noise_snr_db:
            raise ValueError("augment policy needs at least one noise class")
        for kind, (lo, hi) in self.noise_snr_db.items():
            if kind not in NOISE_CLASSES:
                raise ValueError(f"unknown noise class {kind!r}")
            if lo > hi:
                raise ValueError(f"SNR range for {kind} is inverted: [{lo}, {hi}]")
        if not 0.0 <= self.reverb_prob <= 1.0:
            raise ValueError(f"reverb_prob must lie in [0, 1], got {self.reverb_prob}")


def augment_waveform(w: Waveform, p: AugmentPolicy, rng: np.random.Generator):
    """Noise (one class, random SNR) then optional reverb; returns (waveform, record)."""
    bank = noise_bank(p.seed, w.sample_rate)
    kinds = sorted(p.noise_snr_db)
    kind = kinds[int(rng.integers(len(kinds)))]
    snr = float(rng.uniform(*p.noise_snr_db[kind]))
    out = mix_at_snr(w, Waveform(bank.noise(kind, len(w), rng), w.sample_rate), snr)
    reverb = bool(rng.random() < p.reverb_prob)
    if reverb:
        out = apply_reverb(out, Waveform(bank.rir(rng, len(w)), w.sample_rate))
    return out, {"noise": kind, "snr_db": snr, "reverb": reverb}


def augment(v: ViewPair, p: AugmentPolicy, rng: np.random.Generator) -> ViewPair:
    """Augment both views independently; identity when the policy is disabled."""
    if not p.enabled:
        return v
    a, rec_a = augment_waveform(v.view_a, p, rng)
    b, rec_b = augment_waveform(v.view_b, p, rng)
    return ViewPair(a, b, v.utterance_id, v.interval_a, v.interval_b, (rec_a, rec_b))
