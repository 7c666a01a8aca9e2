"""Multichannel audio I/O, STFT analysis/synthesis and the per-bin energy gate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window


class AudioFormatError(ValueError):
    pass


@dataclass
class AudioClip:
    """M channels x T samples, float32 in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float32)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2:
            raise AudioFormatError("samples must be (channels, time)")
        self.samples = x
        self.sample_rate = int(self.sample_rate)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


def read_wav(path, expected_channels: int | None = None) -> AudioClip:
    """Read a PCM16, PCM32 or float32 RIFF WAV file, preserving channel order."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        x = (data.astype(np.float64) / 2147483648.0).astype(np.float32)
    elif data.dtype == np.float32:
        x = data
    elif data.dtype == np.float64:
        x = data.astype(np.float32)
    else:
        raise AudioFormatError(f"{path}: unsupported sample encoding {data.dtype}")
    x = x.T if x.ndim == 2 else x[None, :]
    clip = AudioClip(np.ascontiguousarray(x), rate)
    if expected_channels is not None and clip.n_channels != expected_channels:
        raise AudioFormatError(
            f"{path}: has {clip.n_channels} channels, geometry expects {expected_channels}"
        )
    return clip


def write_wav(path, clip: AudioClip, pcm16: bool = True) -> None:
    x = np.clip(clip.samples, -1.0, 1.0).T
    if pcm16:
        x = np.round(x * 32767.0).astype(np.int16)
    wavfile.write(path, clip.sample_rate, np.ascontiguousarray(x))


def analysis_window(window: int) -> np.ndarray:
    """Periodic Hann window."""
    return get_window("hann", window, fftbins=True)


def n_frames(n_samples: int, window: int, hop: int) -> int:
    if n_samples < window:
        return 0
    return (n_samples - window) // hop + 1


def _check_framing(window: int, hop: int) -> None:
    if hop < 1:
        raise ValueError("hop must be >= 1")
    if window < hop:
        raise ValueError("window must be >= hop")


@dataclass
class SpectrogramFrame:
    index: int
    coefficients: np.ndarray  # (M, K) complex

    @property
    def n_bins(self) -> int:
        return self.coefficients.shape[1]


class StftAnalyzer:
    """Incremental STFT: feed sample blocks, get complete frames back.

    Offline and streaming processing both go through this class so the
    coefficients of a given frame do not depend on how the input was chunked.
    """

    def __init__(self, n_channels: int, window: int = 256, hop: int = 128):
        _check_framing(window, hop)
        self.n_channels = n_channels
        self.window = window
        self.hop = hop
        self._win = analysis_window(window)
        self._buf = np.zeros((n_channels, 0), dtype=np.float32)
        self._next_index = 0

    @property
    def n_bins(self) -> int:
        return self.window // 2 + 1

    def push(self, block: np.ndarray) -> list[SpectrogramFrame]:
        block = np.asarray(block, dtype=np.float32)
        if block.ndim == 1:
            block = block[None, :]
        if block.shape[0] != self.n_channels:
            raise AudioFormatError(
                f"block has {block.shape[0]} channels, expected {self.n_channels}"
            )
        self._buf = np.concatenate([self._buf, block], axis=1)
        frames = []
        start = 0
        while self._buf.shape[1] - start >= self.window:
            seg = self._buf[:, start : start + self.window].astype(np.float64)
            coeffs = np.fft.rfft(seg * self._win, axis=-1)
            frames.append(SpectrogramFrame(self._next_index, coeffs))
            self._next_index += 1
            start += self.hop
        self._buf = self._buf[:, start:]
        return frames


def stft_stream(clip: AudioClip, window: int = 256, hop: int = 128) -> Iterator[SpectrogramFrame]:
    """Yield the frames of `clip` in order; frame rate is sample_rate / hop."""
    _check_framing(window, hop)
    if clip.n_samples < window:
        raise AudioFormatError(
            f"clip has {clip.n_samples} samples, shorter than one window ({window})"
        )
    analyzer = StftAnalyzer(clip.n_channels, window, hop)
    block = hop * 64
    for start in range(0, clip.n_samples, block):
        yield from analyzer.push(clip.samples[:, start : start + block])


def stft(x: np.ndarray, window: int = 256, hop: int = 128) -> np.ndarray:
    """Batch STFT of (..., T) signals, returns (..., P, K)."""
    _check_framing(window, hop)
    x = np.asarray(x, dtype=float)
    P = n_frames(x.shape[-1], window, hop)
    if P == 0:
        raise AudioFormatError("signal shorter than one window")
    idx = np.arange(window)[None, :] + hop * np.arange(P)[:, None]
    return np.fft.rfft(x[..., idx] * analysis_window(window), axis=-1)


def istft(spec: np.ndarray, window: int = 256, hop: int = 128, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add synthesis matching :func:`stft` (least-squares inverse)."""
    spec = np.asarray(spec)
    P = spec.shape[-2]
    win = analysis_window(window)
    frames = np.fft.irfft(spec, n=window, axis=-1) * win
    T = (P - 1) * hop + window
    out = np.zeros(spec.shape[:-2] + (T,))
    norm = np.zeros(T)
    for p in range(P):
        out[..., p * hop : p * hop + window] += frames[..., p, :]
        norm[p * hop : p * hop + window] += win**2
    out = out / np.where(norm > 1e-10, norm, 1.0)
    if length is not None:
        if length > T:
            out = np.concatenate([out, np.zeros(out.shape[:-1] + (length - T,))], axis=-1)
        out = out[..., :length]
    return out


def bin_power(coefficients: np.ndarray) -> np.ndarray:
    """Per-bin power averaged over channels."""
    c = np.asarray(coefficients)
    return np.mean(c.real**2 + c.imag**2, axis=0)


def select_reliable_bins(frame, noise_floor: float, noise_estimate) -> np.ndarray:
    """Boolean mask of bins whose mean power exceeds ``noise_floor * noise_estimate``."""
    if noise_floor < 0:
        raise ValueError("noise floor factor must be >= 0")
    coeffs = frame.coefficients if isinstance(frame, SpectrogramFrame) else frame
    return bin_power(coeffs) > noise_floor * np.asarray(noise_estimate)


class NoiseFloorTracker:
    """Minimum-statistics noise power estimate per bin.

    The recursively smoothed power is tracked through `n_sub` sub-windows of
    `sub_len` frames; the estimate is the minimum over the last `n_sub`
    sub-window minima, scaled by `bias` to offset the downward bias of a
    minimum.  The default window covers 200 frames (1.6 s at 125 Hz).
    """

    def __init__(self, n_bins: int, smoothing: float = 0.7, sub_len: int = 25,
                 n_sub: int = 8, bias: float = 1.5):
        self.smoothing = smoothing
        self.sub_len = sub_len
        self.bias = bias
        self._smoothed = None
        self._cur_min = np.full(n_bins, np.inf)
        self._mins = np.full((n_sub, n_bins), np.inf)
        self._count = 0
        self._slot = 0

    @property
    def estimate(self) -> np.ndarray:
        if self._smoothed is None:
            return np.zeros_like(self._cur_min)
        floor = np.minimum(self._mins.min(axis=0), self._cur_min)
        return self.bias * floor

    def update(self, power: np.ndarray) -> np.ndarray:
        power = np.asarray(power, dtype=float)
        if self._smoothed is None:
            self._smoothed = power.copy()
        else:
            a = self.smoothing
            self._smoothed = a * self._smoothed + (1.0 - a) * power
        np.minimum(self._cur_min, self._smoothed, out=self._cur_min)
        self._count += 1
        if self._count == self.sub_len:
            self._mins[self._slot] = self._cur_min
            self._slot = (self._slot + 1) % len(self._mins)
            self._cur_min = np.full_like(self._cur_min, np.inf)
            self._count = 0
        return self.estimate
