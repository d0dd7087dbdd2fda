"""Audio buffers, WAV I/O, resampling, synthetic speakers and noise.

Synthetic speakers are source-filter voices: a jittered glottal pulse train
shaped by a cascade of formant resonators. Each speaker has its own pitch and
vocal-tract formants; vowels shift the formants by a table shared across all
speakers, so telling speakers apart takes more than spotting one spectrum.
"""

from __future__ import annotations

import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.signal import lfilter

SAMPLE_RATE = 16_000

# Multiplicative shifts applied to a speaker's neutral F1..F4 per vowel.
VOWEL_SHIFTS = np.array([
    [1.50, 0.75, 1.00, 1.00],  # a
    [0.55, 1.45, 1.15, 1.05],  # i
    [0.65, 0.55, 0.95, 1.00],  # u
    [1.00, 1.20, 1.05, 1.00],  # e
    [1.05, 0.70, 1.00, 0.98],  # o
    [1.00, 1.00, 1.00, 1.00],  # schwa
])

SILENCE_LEVEL = 1e-3  # relative to the voiced peak, i.e. -60 dB


class AudioDecodeError(ValueError):
    """A WAV file could not be decoded."""


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def peak_normalized(self) -> "AudioBuffer":
        return AudioBuffer(peak_normalize(self.samples), self.sample_rate)


@dataclass(frozen=True)
class SpeakerProfile:
    """Parameters of one synthetic voice.

    ``formants`` holds (center_hz, bandwidth_hz) pairs of the neutral vowel.
    """

    pitch_hz: float
    formants: tuple = field(default_factory=tuple)
    jitter: float = 0.01
    seed: int = 0

    def __post_init__(self):
        formants = tuple((float(c), float(b)) for c, b in self.formants)
        object.__setattr__(self, "formants", formants)
        if not 60.0 <= self.pitch_hz <= 400.0:
            raise ValueError(f"pitch_hz must lie in [60, 400], got {self.pitch_hz}")
        if not formants:
            raise ValueError("a profile needs at least one formant")
        centers = [c for c, _ in formants]
        if any(b <= a for a, b in zip(centers, centers[1:])):
            raise ValueError(f"formant centers must be strictly increasing: {centers}")
        if any(b <= 0 for _, b in formants):
            raise ValueError("formant bandwidths must be positive")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["formants"] = [list(f) for f in self.formants]
        return d


def peak_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak == 0:
        return x.copy()
    return x / peak


# ---------------------------------------------------------------------------
# WAV I/O


def load_wav(path, sample_rate: int = SAMPLE_RATE, normalize: bool = True) -> AudioBuffer:
    """Read a PCM WAV file as a mono buffer at ``sample_rate``.

    Multi-channel audio is down-mixed by channel mean. Integer PCM is scaled
    into [-1, 1]; with ``normalize`` the buffer is then peak-normalized.
    """
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioDecodeError(f"{path}: {exc}") from exc

    data = _pcm_to_float(raw, width, path)
    if n_channels > 1:
        usable = len(data) - len(data) % n_channels
        data = data[:usable].reshape(-1, n_channels).mean(axis=1)

    if rate != sample_rate:
        data = resample(data, rate, sample_rate)
    if normalize:
        data = peak_normalize(data)
    return AudioBuffer(data, sample_rate)


def _pcm_to_float(raw: bytes, width: int, path) -> np.ndarray:
    if width == 1:
        return (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    if width == 2:
        return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        return v.astype(np.float64) / float(1 << 23)
    if width == 4:
        return np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
    raise AudioDecodeError(f"{path}: unsupported sample width {width} bytes")


def save_wav(path, audio: AudioBuffer) -> None:
    """Write 16-bit PCM mono; samples outside [-1, 1] are clipped."""
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(audio.sample_rate)
        wf.writeframes(pcm.tobytes())


def resample(x: np.ndarray, sr_in: int, sr_out: int, half_width: int = 32,
             chunk: int = 8192) -> np.ndarray:
    """Band-limited resampling by Hann-windowed sinc interpolation.

    Output length is ``round(len(x) * sr_out / sr_in)``. When downsampling the
    kernel cutoff drops to the output Nyquist.
    """
    x = np.asarray(x, dtype=np.float64)
    if sr_in == sr_out:
        return x.copy()
    ratio = sr_out / sr_in
    n_out = int(round(len(x) * ratio))
    cutoff = min(1.0, ratio)
    width = int(np.ceil(half_width / cutoff))
    offsets = np.arange(-width + 1, width + 1)
    out = np.empty(n_out)
    for lo in range(0, n_out, chunk):
        t = np.arange(lo, min(lo + chunk, n_out)) / ratio
        k = np.floor(t).astype(np.int64)[:, None] + offsets[None, :]
        d = t[:, None] - k
        w = cutoff * np.sinc(cutoff * d)
        w *= np.where(np.abs(d) < width, 0.5 * (1.0 + np.cos(np.pi * d / width)), 0.0)
        valid = (k >= 0) & (k < len(x))
        out[lo:lo + len(t)] = np.sum(w * np.where(valid, x[np.clip(k, 0, len(x) - 1)], 0.0), axis=1)
    return out


# ---------------------------------------------------------------------------
# Synthetic speakers


def random_profiles(n: int, seed: int = 0) -> list[SpeakerProfile]:
    """Draw ``n`` distinct-ish synthetic voices.

    Pitch is log-uniform over a range covering low male to high female voices;
    the vocal tract scale stretches a neutral formant set.
    """
    rng = np.random.default_rng(seed)
    neutral = np.array([500.0, 1500.0, 2500.0, 3500.0])
    bandwidths = np.array([80.0, 100.0, 140.0, 180.0])
    profiles = []
    for i in range(n):
        pitch = float(np.exp(rng.uniform(np.log(85.0), np.log(255.0))))
        scale = rng.uniform(0.85, 1.2)
        # +-6% per formant cannot reorder centers 1 kHz apart
        centers = neutral * scale * rng.uniform(0.94, 1.06, size=4)
        bws = bandwidths * rng.uniform(0.8, 1.25, size=4)
        profiles.append(SpeakerProfile(
            pitch_hz=round(pitch, 3),
            formants=tuple((round(float(c), 2), round(float(b), 2)) for c, b in zip(centers, bws)),
            jitter=round(float(rng.uniform(0.005, 0.03)), 4),
            seed=int(rng.integers(0, 2**31 - 1)),
        ))
    return profiles


def load_profiles(path) -> list[SpeakerProfile]:
    """Read speaker profiles from a YAML file (a list, or a ``speakers`` key)."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if isinstance(doc, dict):
        doc = doc.get("speakers", [])
    return [SpeakerProfile(pitch_hz=float(d["pitch_hz"]),
                           formants=tuple(tuple(f) for f in d["formants"]),
                           jitter=float(d.get("jitter", 0.01)),
                           seed=int(d.get("seed", 0))) for d in doc]


def save_profiles(path, profiles) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump({"speakers": [p.to_dict() for p in profiles]}, fh, sort_keys=False)


def _resonator(center: float, bandwidth: float, sr: int):
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2.0 * np.pi * center / sr
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    return np.array([a.sum()]), a  # unity gain at DC


def _syllable(profile: SpeakerProfile, n: int, sr: int, rng, pitch_scale: float) -> np.ndarray:
    f0 = profile.pitch_hz * pitch_scale
    # glide the pitch a little across the syllable
    glide = rng.uniform(-0.06, 0.06)
    source = np.zeros(n)
    pos = rng.uniform(0, sr / f0)
    while pos < n:
        source[int(pos)] = 1.0
        frac = pos / n
        period = sr / (f0 * (1.0 + glide * (frac - 0.5)))
        pos += period * (1.0 + profile.jitter * rng.standard_normal())
    # glottal spectral tilt
    source = lfilter([1.0], [1.0, -0.9], source)
    source += 0.02 * rng.standard_normal(n)

    shifts = VOWEL_SHIFTS[rng.integers(len(VOWEL_SHIFTS))]
    y = source
    nyq = 0.45 * sr
    for (center, bw), s in zip(profile.formants, shifts):
        fc = min(center * s, nyq)
        b, a = _resonator(fc, bw, sr)
        y = lfilter(b, a, y)
    y = y - y.mean()
    rms = np.sqrt(np.mean(y**2))
    if rms > 0:
        y = y / rms * 10 ** (rng.uniform(-2.0, 2.0) / 20.0)
    ramp = min(int(0.01 * sr), n // 2)
    if ramp:
        env = np.ones(n)
        env[:ramp] = np.linspace(0.2, 1.0, ramp)
        env[-ramp:] = np.linspace(1.0, 0.2, ramp)
        y *= env
    return y


def synth_voiced(profile: SpeakerProfile, n: int, rng, sr: int = SAMPLE_RATE) -> np.ndarray:
    """One continuous voiced burst of ``n`` samples made of random syllables."""
    out = np.empty(n)
    i = 0
    pitch_drift = rng.uniform(0.92, 1.08)
    while i < n:
        m = min(int(rng.uniform(0.12, 0.30) * sr), n - i)
        out[i:i + m] = _syllable(profile, m, sr, rng, pitch_drift * rng.uniform(0.95, 1.05))
        i += m
    return out


def synth_utterance(profile: SpeakerProfile, duration: float, seed: int,
                    sample_rate: int = SAMPLE_RATE,
                    burst_range=(1.0, 2.6), gap_range=(0.25, 0.6)) -> AudioBuffer:
    """Speech-like audio: voiced bursts separated by near-silent gaps.

    Gaps sit about 60 dB below the voiced peak. The result is deterministic in
    ``(profile, seed)`` and peak-normalized.
    """
    return synth_with_mask(profile, duration, seed, sample_rate, burst_range, gap_range)[0]


def synth_with_mask(profile: SpeakerProfile, duration: float, seed: int,
                    sample_rate: int = SAMPLE_RATE, burst_range=(1.0, 2.6), gap_range=(0.25, 0.6)):
    """:func:`synth_utterance` plus the boolean mask of voiced samples."""
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    rng = np.random.default_rng([profile.seed, seed])
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    voiced = np.zeros(n, dtype=bool)
    i = int(rng.uniform(*gap_range) * sample_rate)
    while i < n:
        m = min(int(rng.uniform(*burst_range) * sample_rate), n - i)
        out[i:i + m] = synth_voiced(profile, m, rng, sample_rate)
        voiced[i:i + m] = True
        i += m + int(rng.uniform(*gap_range) * sample_rate)
    peak = np.max(np.abs(out))
    if peak > 0:
        out /= peak
    out[~voiced] = SILENCE_LEVEL * rng.uniform(-1.0, 1.0, size=int((~voiced).sum()))
    return AudioBuffer(peak_normalize(out), sample_rate), voiced


# ---------------------------------------------------------------------------
# Noise

NOISE_KINDS = ("white", "pink", "babble")


def gen_noise(kind: str, duration: float, seed: int, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Zero-mean noise with unit peak amplitude.

    ``kind`` is ``white``, ``pink`` (power falling 3 dB per octave) or
    ``babble`` (also accepted as ``babble-like``): several formant-shaped,
    syllable-rate modulated pink streams summed together.
    """
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    if kind == "babble-like":
        kind = "babble"
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        x = _pink(n, rng)
    else:
        t = np.arange(n) / sample_rate
        x = np.zeros(n)
        for _ in range(6):
            s = _pink(n, rng)
            for fc in sorted(rng.uniform([300, 900, 2000], [900, 2000, 3500])):
                b, a = _resonator(fc, 150.0, sample_rate)
                s = lfilter(b, a, s)
            rate = rng.uniform(3.0, 6.0)
            env = 0.5 * (1.0 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
            x += s / (np.std(s) + 1e-12) * env
    x = x - x.mean()
    return AudioBuffer(peak_normalize(x), sample_rate)


def _pink(n: int, rng) -> np.ndarray:
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    f = np.arange(n // 2 + 1, dtype=np.float64)
    f[0] = 1.0
    spec /= np.sqrt(f)
    spec[0] = 0.0
    return np.fft.irfft(spec, n)


def noise_pool(duration: float = 10.0, seed: int = 0, sample_rate: int = SAMPLE_RATE) -> list[AudioBuffer]:
    """One buffer per noise kind, used as the augmentation source."""
    return [gen_noise(kind, duration, seed + i, sample_rate) for i, kind in enumerate(NOISE_KINDS)]
