"""Microphone-array geometry, candidate azimuth grid and far-field steering table.

Frame convention for the array: x points forward (the camera's viewing
direction), y to the left, z up.  Azimuth 0 deg is forward and angles grow
counterclockwise when viewed from above, so +90 deg is to the left.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._config import load_toml

DEFAULT_SPEED_OF_SOUND = 343.0
PROFILE_DIR = Path(__file__).parent / "profiles"


class GeometryError(ValueError):
    """Raised for an invalid array geometry or geometry file."""


@dataclass(frozen=True)
class ArrayGeometry:
    mic_positions: np.ndarray
    reference: int = 0
    speed_of_sound: float = DEFAULT_SPEED_OF_SOUND

    def __post_init__(self):
        pos = np.array(self.mic_positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise GeometryError("mic positions must be an (M, 3) array")
        if pos.shape[0] < 2:
            raise GeometryError(f"need at least 2 microphones, got {pos.shape[0]}")
        if not np.all(np.isfinite(pos)):
            raise GeometryError("mic positions must be finite")
        if not 0 <= int(self.reference) < pos.shape[0]:
            raise GeometryError(
                f"reference index {self.reference} out of range for {pos.shape[0]} mics"
            )
        if len(np.unique(pos, axis=0)) != len(pos):
            raise GeometryError("two microphones share identical coordinates")
        if not self.speed_of_sound > 0:
            raise GeometryError("speed of sound must be positive")
        pos.setflags(write=False)
        object.__setattr__(self, "mic_positions", pos)
        object.__setattr__(self, "reference", int(self.reference))
        object.__setattr__(self, "speed_of_sound", float(self.speed_of_sound))

    @property
    def n_mics(self) -> int:
        return self.mic_positions.shape[0]

    @property
    def non_reference(self) -> list[int]:
        return [m for m in range(self.n_mics) if m != self.reference]

    @property
    def aperture(self) -> float:
        """Largest distance between any two microphones (m)."""
        diff = self.mic_positions[:, None, :] - self.mic_positions[None, :, :]
        return float(np.max(np.linalg.norm(diff, axis=-1)))

    def with_reference(self, reference: int) -> "ArrayGeometry":
        return ArrayGeometry(self.mic_positions, reference, self.speed_of_sound)

    def subset(self, channels: Sequence[int]) -> "ArrayGeometry":
        """Geometry restricted to `channels`; the reference must be kept."""
        channels = list(channels)
        if self.reference not in channels:
            raise GeometryError("subset must contain the reference microphone")
        return ArrayGeometry(
            self.mic_positions[channels], channels.index(self.reference), self.speed_of_sound
        )


def geometry_from_dict(doc: dict) -> ArrayGeometry:
    try:
        mics = doc["mics"]
    except KeyError:
        raise GeometryError("geometry document has no 'mics' entry") from None
    try:
        pos = np.asarray(mics, dtype=float)
    except (TypeError, ValueError) as exc:
        raise GeometryError(f"malformed 'mics' entry: {exc}") from None
    return ArrayGeometry(
        pos,
        int(doc.get("reference", 0)),
        float(doc.get("speed_of_sound", DEFAULT_SPEED_OF_SOUND)),
    )


def geometry_to_toml(geometry: ArrayGeometry) -> str:
    rows = ",\n".join(f"  [{x!r}, {y!r}, {z!r}]" for x, y, z in geometry.mic_positions.tolist())
    return (f"reference = {geometry.reference}\n"
            f"speed_of_sound = {geometry.speed_of_sound!r}\n"
            f"mics = [\n{rows},\n]\n")


def load_geometry(path) -> ArrayGeometry:
    """Load an array geometry from a TOML document.

    Expected keys: ``mics = [[x, y, z], ...]`` in meters, ``reference`` (index
    of the reference microphone, default 0) and ``speed_of_sound`` in m/s.
    """
    try:
        doc = load_toml(path)
    except Exception as exc:
        raise GeometryError(f"cannot parse geometry file {path}: {exc}") from exc
    return geometry_from_dict(doc)


def default_geometry() -> ArrayGeometry:
    """Approximate 7-microphone planar layout (centre + hexagon, 4 cm radius)."""
    return load_geometry(PROFILE_DIR / "kinect7.toml")


@dataclass(frozen=True)
class CandidateGrid:
    """Uniform circular grid of candidate azimuths covering (-180, 180]."""

    spacing_deg: float = 5.0
    azimuths_deg: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.spacing_deg > 0:
            raise ValueError("grid spacing must be positive")
        n = 360.0 / self.spacing_deg
        D = int(round(n))
        if D < 1 or abs(n - D) > 1e-9:
            raise ValueError(f"spacing {self.spacing_deg} does not divide 360 deg")
        az = 180.0 - self.spacing_deg * np.arange(D - 1, -1, -1, dtype=float)
        az.setflags(write=False)
        object.__setattr__(self, "azimuths_deg", az)

    @property
    def size(self) -> int:
        return len(self.azimuths_deg)

    def __len__(self) -> int:
        return self.size

    def nearest_index(self, azimuth_deg: float) -> int:
        diff = wrap_deg(self.azimuths_deg - azimuth_deg)
        return int(np.argmin(np.abs(diff)))


def wrap_deg(angle):
    """Wrap angles to (-180, 180]."""
    a = np.mod(np.asarray(angle, dtype=float) + 180.0, 360.0) - 180.0
    a = np.where(a == -180.0, 180.0, a)
    return a if a.ndim else float(a)


def azimuth_vector(azimuth_deg) -> np.ndarray:
    phi = np.deg2rad(np.asarray(azimuth_deg, dtype=float))
    return np.stack([np.cos(phi), np.sin(phi), np.zeros_like(phi)], axis=-1)


def far_field_tdoa(geometry: ArrayGeometry, azimuth_deg, channel: int):
    """Arrival time at `channel` minus arrival time at the reference (s).

    A plane wave from direction u reaches position p at time -u.p/c, so the
    delay is u.(p_ref - p_m)/c.  Positive means the channel hears it later.
    """
    if not 0 <= channel < geometry.n_mics:
        raise IndexError(f"channel {channel} out of range")
    u = azimuth_vector(azimuth_deg)
    baseline = geometry.mic_positions[geometry.reference] - geometry.mic_positions[channel]
    tau = u @ baseline / geometry.speed_of_sound
    return tau if np.ndim(tau) else float(tau)


def tdoa_matrix(geometry: ArrayGeometry, azimuths_deg) -> np.ndarray:
    """Delays of every microphone relative to the reference, shape (M, D)."""
    u = azimuth_vector(azimuths_deg)  # (D, 3)
    baseline = geometry.mic_positions[geometry.reference] - geometry.mic_positions  # (M, 3)
    return baseline @ u.T / geometry.speed_of_sound


def bin_frequencies(n_bins: int, sample_rate: float) -> np.ndarray:
    """Centre frequencies of the one-sided STFT bins (K = window/2 + 1)."""
    if n_bins < 1:
        raise ValueError("need at least one frequency bin")
    if n_bins == 1:
        return np.zeros(1)
    return np.arange(n_bins) * sample_rate / (2.0 * (n_bins - 1))


@dataclass(frozen=True)
class SteeringTable:
    """Theoretical direct-path relative transfer functions.

    ``means[k, i, d]`` is the DP-RTF of channel ``channels[i]`` relative to
    the reference at bin ``k`` for candidate direction ``d``.
    """

    means: np.ndarray
    channels: tuple
    frequencies: np.ndarray
    azimuths_deg: np.ndarray

    @property
    def n_bins(self) -> int:
        return self.means.shape[0]

    @property
    def n_directions(self) -> int:
        return self.means.shape[2]


def compute_steering_table(
    geometry: ArrayGeometry, grid: CandidateGrid, n_bins: int, sample_rate: float
) -> SteeringTable:
    if sample_rate <= 0:
        raise ValueError("sample rate must be positive")
    freqs = bin_frequencies(n_bins, sample_rate)
    channels = tuple(geometry.non_reference)
    tau = tdoa_matrix(geometry, grid.azimuths_deg)[list(channels)]  # (M-1, D)
    means = np.exp(-2j * np.pi * freqs[:, None, None] * tau[None, :, :])
    means.setflags(write=False)
    return SteeringTable(means, channels, freqs, np.asarray(grid.azimuths_deg))
