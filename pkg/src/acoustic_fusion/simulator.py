"""Synthetic multichannel scenes with known source azimuths.

Signals follow y^m(t) = h^m(t) * x(t): a far-field direct path (fractional
delay from the array geometry and 1/distance gain), optionally followed by
synthetic reverberation expressed directly as per-bin CTF taps, plus
spatially white sensor noise at a chosen SNR.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from ._config import load_toml
from .geometry import ArrayGeometry, bin_frequencies, tdoa_matrix, wrap_deg
from .stft import AudioClip, istft, read_wav, stft

SINC_TAPS = 32
SIGNAL_KINDS = ("white", "speech", "wav")


class SceneError(ValueError):
    pass


@dataclass
class SourceSpec:
    """One sound source.

    `trajectory` holds keyframes ``(time_s, azimuth_deg, distance_m)``; the
    path is linear between keyframes (shortest arc in azimuth) and constant
    outside them.  `bands` optionally restricts the spectrum to a list of
    ``(low_hz, high_hz)`` intervals.
    """

    trajectory: list
    signal: str = "speech"
    onset: float = 0.0
    offset: float = float("inf")
    gain: float = 1.0
    path: str | None = None
    bands: list | None = None

    def __post_init__(self):
        traj = np.asarray(self.trajectory, dtype=float)
        if traj.ndim == 1:
            traj = traj[None, :]
        if traj.ndim != 2 or traj.shape[1] != 3 or len(traj) == 0:
            raise SceneError("trajectory must be a list of (time, azimuth, distance)")
        if np.any(np.diff(traj[:, 0]) <= 0):
            raise SceneError("trajectory times must be strictly increasing")
        if np.any(traj[:, 2] <= 0):
            raise SceneError("source distances must be positive")
        if not self.onset < self.offset:
            raise SceneError("onset must precede offset")
        if self.signal not in SIGNAL_KINDS:
            raise SceneError(f"unknown signal kind {self.signal!r}")
        if self.signal == "wav" and not self.path:
            raise SceneError("wav sources need a path")
        self.trajectory = traj

    def position(self, t):
        """Azimuth (deg) and distance (m) at times `t`."""
        traj = self.trajectory
        t = np.asarray(t, dtype=float)
        unwrapped = np.degrees(np.unwrap(np.radians(traj[:, 1])))
        az = np.interp(t, traj[:, 0], unwrapped)
        dist = np.interp(t, traj[:, 0], traj[:, 2])
        return wrap_deg(az), dist

    @property
    def is_static(self) -> bool:
        return len(self.trajectory) == 1 or (
            np.ptp(self.trajectory[:, 1]) == 0 and np.ptp(self.trajectory[:, 2]) == 0
        )


@dataclass
class ReverbSpec:
    """Synthetic CTF reverberation: `taps` taps per bin, tap q >= 1 drawn as
    complex Gaussian with standard deviation ``scale * decay**q``."""

    taps: int = 4
    decay: float = 0.5
    scale: float = 0.5

    def __post_init__(self):
        if self.taps < 1:
            raise SceneError("reverb needs at least one tap")


@dataclass
class SceneScript:
    sources: list = field(default_factory=list)
    snr_db: float | None = None
    reverb: ReverbSpec | None = None
    duration: float | None = None
    sample_rate: int = 16000

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "SceneScript":
        sources = []
        for s in doc.get("sources", []):
            s = dict(s)
            if s.get("path") and base_dir is not None:
                s["path"] = str(Path(base_dir) / s["path"])
            try:
                sources.append(SourceSpec(**s))
            except TypeError as exc:
                raise SceneError(f"bad source entry: {exc}") from None
        reverb = doc.get("reverb")
        return cls(
            sources=sources,
            snr_db=doc.get("snr_db"),
            reverb=ReverbSpec(**reverb) if reverb else None,
            duration=doc.get("duration"),
            sample_rate=int(doc.get("sample_rate", 16000)),
        )


def load_scene(path) -> SceneScript:
    return SceneScript.from_dict(load_toml(path), base_dir=Path(path).parent)


@dataclass
class GroundTruth:
    """Per STFT frame: the active sources sampled at the frame centre."""

    frame_times: np.ndarray
    frames: list  # frames[p] = list of (source_id, azimuth_deg, distance_m, voiced)

    def active(self, p: int) -> list:
        return self.frames[p]

    def voiced(self, p: int) -> list:
        return [s for s in self.frames[p] if s[3]]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "source", "azimuth", "distance", "voiced"])
            for p, entries in enumerate(self.frames):
                for sid, az, dist, voiced in entries:
                    w.writerow([p, sid, f"{az:.6f}", f"{dist:.6f}", int(voiced)])


def speech_like(n: int, fs: float, rng: np.random.Generator):
    """AR(2)-coloured noise gated by a syllable-like on/off envelope.

    Returns the signal and its 0..1 envelope.
    """
    f0 = rng.uniform(300.0, 900.0)
    radius = 0.9
    a = [1.0, -2.0 * radius * np.cos(2 * np.pi * f0 / fs), radius**2]
    x = lfilter([1.0], a, rng.standard_normal(n))
    x /= np.std(x) + 1e-12
    env = np.zeros(n)
    ramp = max(1, int(0.01 * fs))
    t = int(rng.uniform(0.0, 0.2) * fs)
    while t < n:
        on = int(rng.uniform(0.15, 0.6) * fs)
        seg = np.ones(on)
        r = min(ramp, on // 2)
        if r:
            w = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
            seg[:r] = w
            seg[-r:] = w[::-1]
        end = min(n, t + on)
        env[t:end] = seg[: end - t]
        t = end + int(rng.uniform(0.05, 0.3) * fs)
    return x * env, env


def _restrict_bands(x: np.ndarray, fs: float, bands) -> np.ndarray:
    X = np.fft.rfft(x)
    f = np.fft.rfftfreq(len(x), 1.0 / fs)
    keep = np.zeros(len(f), dtype=bool)
    for lo, hi in bands:
        keep |= (f >= lo) & (f < hi)
    return np.fft.irfft(X * keep, n=len(x))


def source_signal(spec: SourceSpec, n: int, fs: float, rng: np.random.Generator):
    """Dry source waveform and its voicing envelope (both length n)."""
    if spec.signal == "white":
        x = rng.standard_normal(n)
        env = np.ones(n)
    elif spec.signal == "speech":
        x, env = speech_like(n, fs, rng)
    else:
        clip = read_wav(spec.path)
        if clip.sample_rate != fs:
            raise SceneError(f"{spec.path}: sample rate {clip.sample_rate} != {fs}")
        w = clip.samples[0].astype(float)
        x = np.resize(w, n) if len(w) else np.zeros(n)
        env = (np.abs(x) > 0).astype(float)
    if spec.bands:
        x = _restrict_bands(x, fs, spec.bands)
    t = np.arange(n) / fs
    active = (t >= spec.onset) & (t < spec.offset)
    return spec.gain * x * active, env * active


def fractional_delay(x: np.ndarray, delay: np.ndarray, taps: int = SINC_TAPS,
                     chunk: int = 8192) -> np.ndarray:
    """y[n] = x(n - delay[n]) by Hann-windowed sinc interpolation.

    `delay` is in samples (scalar or per sample) and may be negative.
    """
    n = len(x)
    half = taps // 2
    j = np.arange(-half + 1, half + 1)
    if np.ndim(delay) == 0:
        # constant delay: one FIR kernel, y[n] = sum_j w_j x[n - D - j]
        D = int(np.floor(delay))
        t = j - (float(delay) - D)
        w = np.sinc(t) * (0.5 + 0.5 * np.cos(np.pi * t / half))
        full = np.convolve(x, w)  # full[i] = sum_j w[j'] x[i - j'], j' = j + half - 1
        out = np.zeros(n)
        src = np.arange(n) - D + half - 1
        ok = (src >= 0) & (src < len(full))
        out[ok] = full[src[ok]]
        return out
    delay = np.broadcast_to(np.asarray(delay, dtype=float), (n,))
    xp = np.concatenate([np.zeros(taps + 1), x, np.zeros(taps + 1)])
    y = np.empty(n)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        d = delay[start:stop]
        D = np.floor(d)
        f = d - D
        t = j[None, :] - f[:, None]
        w = np.sinc(t) * (0.5 + 0.5 * np.cos(np.pi * t / half))
        idx = (np.arange(start, stop)[:, None] - D[:, None].astype(int) - j[None, :]) + taps + 1
        valid = (idx >= 0) & (idx < len(xp))
        y[start:stop] = np.sum(np.where(valid, xp[np.clip(idx, 0, len(xp) - 1)], 0.0) * w, axis=1)
    return y


def _channel_delays(geometry: ArrayGeometry, azimuths) -> np.ndarray:
    return tdoa_matrix(geometry, np.atleast_1d(azimuths))  # (M, T)


def ctf_spectrogram(x: np.ndarray, geometry: ArrayGeometry, azimuth_deg, distance,
                    reverb: ReverbSpec, fs: float, window: int, hop: int,
                    rng: np.random.Generator):
    """STFT-domain rendering of one source through per-bin CTFs.

    Returns ``(Y, H)``: microphone spectrograms (M, P, K) and the CTF taps
    (M, Q', K).  The first tap is the far-field direct path; `azimuth_deg` and
    `distance` may be per frame.
    """
    X = stft(x, window, hop)  # (P, K)
    P, K = X.shape
    M = geometry.n_mics
    freqs = bin_frequencies(K, fs)
    az = np.broadcast_to(np.asarray(azimuth_deg, dtype=float), (P,))
    dist = np.broadcast_to(np.asarray(distance, dtype=float), (P,))
    tau = _channel_delays(geometry, az)  # (M, P)
    direct = np.exp(-2j * np.pi * tau[:, :, None] * freqs[None, None, :]) / dist[None, :, None]
    Qr = reverb.taps
    H = np.zeros((M, Qr, K), dtype=complex)
    H[:, 0, :] = direct[:, 0, :]
    for q in range(1, Qr):
        std = reverb.scale * reverb.decay**q / np.sqrt(2.0)
        H[:, q, :] = std * (rng.standard_normal((M, K)) + 1j * rng.standard_normal((M, K)))
        H[:, q, :] /= dist[0]
    Y = direct * X[None, :, :]
    for q in range(1, Qr):
        Y[:, q:, :] += H[:, q, None, :] * X[None, : P - q, :]
    return Y, H


def render_scene(script: SceneScript, geometry: ArrayGeometry, sample_rate: int | None = None,
                 duration: float | None = None, seed: int = 0, window: int = 256,
                 hop: int = 128):
    """Render `script` to an M-channel clip plus per-frame ground truth."""
    fs = int(sample_rate or script.sample_rate)
    duration = duration if duration is not None else script.duration
    if duration is None or duration <= 0:
        raise SceneError("scene needs a positive duration")
    if not script.sources:
        raise SceneError("scene has no sources")
    n = int(round(duration * fs))
    M = geometry.n_mics
    rng = np.random.default_rng(seed)
    t = np.arange(n) / fs
    clean = np.zeros((M, n))
    active_any = np.zeros(n, dtype=bool)
    envelopes = []
    for src in script.sources:
        x, env = source_signal(src, n, fs, rng)
        envelopes.append(env)
        active_any |= env > 0.5
        if script.reverb is None:
            if src.is_static:
                az, dist = src.position(0.0)
                delays = _channel_delays(geometry, az)[:, 0] * fs
                for m in range(M):
                    clean[m] += fractional_delay(x, float(delays[m])) / float(dist)
            else:
                az, dist = src.position(t)
                delays = _channel_delays(geometry, az) * fs
                for m in range(M):
                    clean[m] += fractional_delay(x, delays[m]) / dist
        else:
            P = (n - window) // hop + 1
            centres = (np.arange(P) * hop + window / 2) / fs
            az, dist = src.position(centres)
            Y, _ = ctf_spectrogram(x, geometry, az, dist, script.reverb, fs, window, hop, rng)
            clean += istft(Y, window, hop, length=n)
    y = clean
    if script.snr_db is not None:
        mask = active_any if active_any.any() else np.ones(n, dtype=bool)
        p_sig = np.mean(clean[:, mask] ** 2)
        p_noise = p_sig / 10.0 ** (script.snr_db / 10.0)
        y = clean + np.sqrt(p_noise) * rng.standard_normal((M, n))
    peak = np.max(np.abs(y))
    if peak > 0.99:
        y = y * (0.99 / peak)
    clip = AudioClip(y.astype(np.float32), fs)
    return clip, ground_truth(script, envelopes, n, fs, window, hop)


def ground_truth(script: SceneScript, envelopes, n: int, fs: float, window: int,
                 hop: int) -> GroundTruth:
    P = max(0, (n - window) // hop + 1)
    centres = (np.arange(P) * hop + window // 2)
    times = centres / fs
    frames = [[] for _ in range(P)]
    for sid, (src, env) in enumerate(zip(script.sources, envelopes)):
        az, dist = src.position(times)
        on = (times >= src.onset) & (times < src.offset)
        voiced = env[np.minimum(centres, n - 1)] > 0.5
        for p in np.flatnonzero(on):
            frames[p].append((sid, float(az[p]), float(dist[p]), bool(voiced[p])))
    return GroundTruth(times, frames)


def oracle_tdoa(clip: AudioClip, pair, max_freq: float | None = None, upsample: int = 16) -> float:
    """Delay of channel ``pair[1]`` relative to ``pair[0]`` in seconds (GCC-PHAT).

    The cross-spectrum is PHAT-weighted below `max_freq` (default 0.8 x
    Nyquist), interpolated by zero padding, and the peak refined by fitting a
    parabola through its neighbours.
    """
    a, b = pair
    fs = clip.sample_rate
    if clip.n_samples < 0.1 * fs:
        raise ValueError("need at least 0.1 s of signal")
    x = clip.samples[a].astype(float)
    y = clip.samples[b].astype(float)
    n = 2 * len(x)
    X = np.fft.rfft(x, n)
    Y = np.fft.rfft(y, n)
    cross = Y * np.conj(X)
    mag = np.abs(cross)
    if not np.any(mag > 0):
        raise ValueError("degenerate (silent) input")
    f = np.fft.rfftfreq(n, 1.0 / fs)
    fmax = 0.8 * fs / 2 if max_freq is None else max_freq
    weight = np.where((mag > 1e-12 * mag.max()) & (f <= fmax), 1.0 / np.maximum(mag, 1e-30), 0.0)
    cc = np.fft.irfft(cross * weight, n * upsample)
    max_lag = int(0.05 * fs) * upsample
    lags = np.concatenate([np.arange(-max_lag, 0), np.arange(0, max_lag + 1)])
    vals = cc[lags]
    i = int(np.argmax(vals))
    shift = 0.0
    if 0 < i < len(vals) - 1:
        y0, y1, y2 = vals[i - 1], vals[i], vals[i + 1]
        den = y0 - 2 * y1 + y2
        if den != 0:
            shift = 0.5 * (y0 - y2) / den
    return float((lags[i] + shift) / (fs * upsample))
