"""Log-mel spectrogram front-end for 0.2 s frames.

Every function accepts a single frame or a stack of frames along leading
axes; the time-frequency axes are always the last two, as (bins, steps).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import dct

from .segmentation import Frame


@dataclass(frozen=True)
class FeatureConfig:
    fft_size: int = 191
    window_size: int = 128
    stride: int = 34
    n_mels: int = 100
    sample_rate: int = 16_000
    dct: bool = False  # cepstral step, off by default
    # energies are measured in squared 16-bit PCM units, so the +1 inside
    # log(1 + E) sits near one quantization step
    power_scale: float = 32768.0**2

    def __post_init__(self):
        if self.window_size > self.fft_size:
            raise ValueError("window_size must not exceed fft_size")
        if self.window_size < 1 or self.stride < 1 or self.n_mels < 1:
            raise ValueError("window_size, stride and n_mels must be positive")
        if self.power_scale <= 0:
            raise ValueError("power_scale must be positive")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_steps(self, n_samples: int) -> int:
        return (n_samples - self.window_size) // self.stride + 1

    def output_shape(self, n_samples: int) -> tuple[int, int]:
        return self.n_mels, self.n_steps(n_samples)


def _samples(frame) -> np.ndarray:
    return np.asarray(frame.samples if isinstance(frame, Frame) else frame, dtype=np.float64)


def hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@lru_cache(maxsize=8)
def _dft_basis(fft_size: int, window_size: int) -> np.ndarray:
    """Hann-windowed one-sided DFT basis of shape (window_size, n_bins).

    The window is zero-padded to ``fft_size``, so only its first
    ``window_size`` rows are needed. A matrix product beats an FFT here
    because the default size 191 is prime.
    """
    n = np.arange(window_size)[:, None]
    k = np.arange(fft_size // 2 + 1)[None, :]
    basis = hann(window_size)[:, None] * np.exp(-2j * np.pi * ((n * k) % fft_size) / fft_size)
    basis.flags.writeable = False
    return basis


def _windowed_dft(x: np.ndarray, cfg: FeatureConfig, dtype=np.float64):
    """Real and imaginary DFT parts laid out as (..., n_steps, n_bins)."""
    x = x.astype(dtype, copy=False)
    if x.shape[-1] < cfg.window_size:
        raise ValueError(f"frame of {x.shape[-1]} samples is shorter than window_size {cfg.window_size}")
    windows = np.lib.stride_tricks.sliding_window_view(x, cfg.window_size, axis=-1)[..., ::cfg.stride, :]
    basis = _dft_basis(cfg.fft_size, cfg.window_size)
    flat = np.ascontiguousarray(windows).reshape(-1, cfg.window_size)
    ri = flat @ np.concatenate([basis.real, basis.imag], axis=1).astype(dtype, copy=False)
    nb = basis.shape[1]
    shape = (*windows.shape[:-1], nb)
    return ri[:, :nb].reshape(shape), ri[:, nb:].reshape(shape)


def stft(frame, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Complex spectrogram of shape (..., n_bins, n_steps)."""
    re, im = _windowed_dft(_samples(frame), cfg)
    return np.swapaxes(re + 1j * im, -1, -2)


def power_spectrum(spec: np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """|X|^2 / fft_size, so that one-sided bins weighted by
    :func:`onesided_weights` sum to the windowed signal energy."""
    return np.abs(spec) ** 2 / cfg.fft_size


def onesided_weights(cfg: FeatureConfig) -> np.ndarray:
    w = np.full(cfg.n_bins, 2.0)
    w[0] = 1.0
    if cfg.fft_size % 2 == 0:
        w[-1] = 1.0
    return w


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Triangular filters of shape (n_mels, n_bins), equally spaced in mel
    from 0 Hz to Nyquist.

    Below roughly 2.7 kHz the default mel spacing is finer than the 84 Hz bin
    grid, so each triangle side is widened to at least one bin spacing;
    otherwise those filters would not touch any bin.
    """
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2.0), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.fft_size
    spacing = cfg.sample_rate / cfg.fft_size
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    lw = np.maximum(center - left, spacing)
    rw = np.maximum(right - center, spacing)
    f = freqs[None, :]
    rising = 1.0 - (center - f) / lw
    falling = 1.0 - (f - center) / rw
    return np.clip(np.where(f <= center, rising, falling), 0.0, None)


def mel_project(spec: np.ndarray, cfg: FeatureConfig = FeatureConfig(), fbank=None) -> np.ndarray:
    """Log-mel energies log(1 + E) of shape (..., n_mels, n_steps)."""
    if spec.shape[-2] != cfg.n_bins:
        raise ValueError(f"spectrogram has {spec.shape[-2]} bins, config expects {cfg.n_bins}")
    fbank = mel_filterbank(cfg) if fbank is None else fbank
    out = np.log1p(np.matmul(fbank, power_spectrum(spec, cfg)) * cfg.power_scale)
    if cfg.dct:
        out = dct(out, type=2, norm="ortho", axis=-2)
    return out


def featurize(frame, cfg: FeatureConfig = FeatureConfig(), fbank=None, dtype=np.float64) -> np.ndarray:
    """stft followed by mel_project, computed without the complex intermediate.

    ``dtype=np.float32`` trades about 1e-6 relative precision for speed.
    """
    fbank = (mel_filterbank(cfg) if fbank is None else fbank).astype(dtype, copy=False)
    re, im = _windowed_dft(_samples(frame), cfg, dtype)
    power = (re * re + im * im) / dtype(cfg.fft_size)
    out = np.log1p((power @ fbank.T) * dtype(cfg.power_scale))
    out = np.swapaxes(out, -1, -2)
    if cfg.dct:
        out = dct(out, type=2, norm="ortho", axis=-2)
    return out


class Featurizer:
    """Caches the filterbank for repeated batch featurization."""

    def __init__(self, cfg: FeatureConfig = FeatureConfig(), dtype=np.float64):
        self.cfg = cfg
        self.dtype = dtype
        self.fbank = mel_filterbank(cfg).astype(dtype)

    def __call__(self, frames) -> np.ndarray:
        return featurize(frames, self.cfg, self.fbank, self.dtype)


# ---------------------------------------------------------------------------
# Flat binary cache: b"UVFM" | u8 version | u8 len + dtype str | u32 ndim |
# u64 dims... | row-major little-endian values

_MAGIC = b"UVFM"


def save_feature_cache(path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values)
    dt = values.dtype.newbyteorder("<")
    dstr = dt.str.encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<BB", 1, len(dstr)) + dstr)
        fh.write(struct.pack("<I", values.ndim))
        fh.write(struct.pack(f"<{values.ndim}Q", *values.shape))
        fh.write(values.astype(dt, copy=False).tobytes(order="C"))


def load_feature_cache(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    version, dlen = struct.unpack_from("<BB", data, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported cache version {version}")
    pos = 6
    dtype = np.dtype(data[pos:pos + dlen].decode())
    pos += dlen
    (ndim,) = struct.unpack_from("<I", data, pos)
    pos += 4
    shape = struct.unpack_from(f"<{ndim}Q", data, pos)
    pos += 8 * ndim
    return np.frombuffer(data, dtype=dtype, offset=pos, count=int(np.prod(shape))).reshape(shape).copy()
