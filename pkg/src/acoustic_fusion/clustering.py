"""Complex-Gaussian-mixture clustering of DP-RTF features over candidate azimuths.

Each mixture component is one candidate direction whose mean is the
theoretical DP-RTF from the steering table; the shared variance is fixed, so
the component weights are the only free parameters.  They are fitted by EM
(batch) or by a recursive EM that exponentially smooths the responsibility
statistics frame to frame.  Sources are the peaks of the weight curve, and
each peak gets an angular region that grows while the weights keep falling
and stay above a fraction of the peak weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .dprtf import DpRtfFeature, FeatureSet
from .geometry import SteeringTable, wrap_deg

DEFAULT_VARIANCE = 0.5
DEFAULT_SMOOTHING = 0.05
DEFAULT_DELTA = 0.3
DEFAULT_MIN_SEPARATION = 15.0
WEIGHT_FLOOR = 1e-14


def _as_arrays(features):
    """(bins, values) of the reliable features in `features`."""
    if isinstance(features, FeatureSet):
        fs = features.reliable_only()
        return fs.bins, fs.values
    if isinstance(features, tuple):
        return np.asarray(features[0]), np.asarray(features[1])
    feats = [f for f in features if f.reliable]
    if not feats:
        return np.zeros(0, int), None
    return np.array([f.bin for f in feats]), np.array([f.values for f in feats])


def log_likelihoods(bins, values, table: SteeringTable, variance: float) -> np.ndarray:
    """log N_c(a; mean_d, variance) summed over channels, shape (F, D)."""
    if variance <= 0:
        raise ValueError("variance must be positive")
    means = table.means[bins]  # (F, C, D)
    diff = values[:, :, None] - means
    dist2 = np.sum(diff.real**2 + diff.imag**2, axis=1)
    n_ch = means.shape[1]
    return -n_ch * np.log(np.pi * variance) - dist2 / variance


def feature_likelihoods(feature: DpRtfFeature, table: SteeringTable, variance: float = DEFAULT_VARIANCE,
                        log: bool = False) -> np.ndarray:
    """Per-direction likelihood of one feature (product over its channels)."""
    ll = log_likelihoods(np.array([feature.bin]), np.asarray(feature.values)[None, :], table, variance)[0]
    return ll if log else np.exp(ll)


def _responsibilities(log_w: np.ndarray, ll: np.ndarray):
    joint = ll + log_w[None, :]
    norm = logsumexp(joint, axis=1)
    return np.exp(joint - norm[:, None]), float(np.sum(norm))


def log_likelihood(weights, bins, values, table: SteeringTable, variance: float) -> float:
    """Mixture log-likelihood summed over the features."""
    ll = log_likelihoods(bins, values, table, variance)
    with np.errstate(divide="ignore"):
        return float(np.sum(logsumexp(ll + np.log(weights)[None, :], axis=1)))


@dataclass
class EmResult:
    weights: np.ndarray
    log_likelihood: list
    silent: bool = False


def em_batch(features, table: SteeringTable, variance: float = DEFAULT_VARIANCE,
             iterations: int = 20, weights=None) -> EmResult:
    """Maximum-likelihood mixture weights of a window of features.

    `features` is a :class:`FeatureSet`, a list of :class:`DpRtfFeature`
    or a ``(bins, values)`` tuple; only reliable features are used.  The
    returned log-likelihood trace holds the value before each iteration and
    after the last one.
    """
    D = table.n_directions
    w = np.full(D, 1.0 / D) if weights is None else np.asarray(weights, dtype=float).copy()
    bins, values = _as_arrays(features)
    if len(bins) == 0:
        return EmResult(np.full(D, 1.0 / D), [], silent=True)
    ll = log_likelihoods(bins, values, table, variance)
    trace = []
    for _ in range(iterations):
        with np.errstate(divide="ignore"):
            resp, total = _responsibilities(np.log(w), ll)
        trace.append(total)
        w = resp.mean(axis=0)
        w /= w.sum()
    with np.errstate(divide="ignore"):
        trace.append(float(np.sum(logsumexp(ll + np.log(w)[None, :], axis=1))))
    return EmResult(w, trace)


@dataclass
class MixtureState:
    """Time-varying mixture weights with smoothed responsibility statistics."""

    n_directions: int
    variance: float = DEFAULT_VARIANCE
    smoothing: float = DEFAULT_SMOOTHING
    weights: np.ndarray = field(default=None, repr=False)
    stats: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 < self.smoothing <= 1.0:
            raise ValueError("smoothing factor must be in (0, 1]")
        if self.variance <= 0:
            raise ValueError("variance must be positive")
        if self.weights is None:
            self.weights = np.full(self.n_directions, 1.0 / self.n_directions)
        if self.stats is None:
            self.stats = self.weights.copy()


def em_recursive_update(state: MixtureState, features, table: SteeringTable) -> MixtureState:
    """One recursive-EM step with the features of a new frame (in place).

    stats <- (1 - rho) stats + rho * mean responsibility of the frame, then the
    weights are the renormalised statistics.  Frames without reliable
    features leave the state untouched.
    """
    bins, values = _as_arrays(features)
    if len(bins) == 0:
        return state
    ll = log_likelihoods(bins, values, table, state.variance)
    resp, _ = _responsibilities(np.log(state.weights), ll)
    rho = state.smoothing
    stats = (1.0 - rho) * state.stats + rho * resp.mean(axis=0)
    np.maximum(stats, WEIGHT_FLOOR, out=stats)
    state.stats = stats
    state.weights = stats / stats.sum()
    return state


def detect_peaks(weights, threshold: float | None = None,
                 min_separation_deg: float = DEFAULT_MIN_SEPARATION,
                 spacing_deg: float | None = None) -> list[int]:
    """Circular local maxima above `threshold`, greedily thinned by separation.

    Candidates are taken in decreasing weight (ties to the lower index) and
    dropped when closer than `min_separation_deg` to one already kept.
    The default threshold is twice the uniform weight.
    """
    w = np.asarray(weights, dtype=float)
    D = len(w)
    if threshold is None:
        threshold = 2.0 / D
    if spacing_deg is None:
        spacing_deg = 360.0 / D
    left = np.roll(w, 1)
    right = np.roll(w, -1)
    cand = np.flatnonzero((w >= left) & (w >= right) & (w >= threshold))
    order = sorted(cand, key=lambda d: (-w[d], d))
    kept: list[int] = []
    for d in order:
        ok = True
        for k in kept:
            steps = abs(int(d) - k) % D
            steps = min(steps, D - steps)
            if steps * spacing_deg < min_separation_deg:
                ok = False
                break
        if ok:
            kept.append(int(d))
    return kept


@dataclass(frozen=True)
class Region:
    """Obstacle region in direction-index units.

    `left` / `right` are the boundary indices on the decreasing / increasing
    index side of `center`; the step counts disambiguate wrap-around.
    """

    center: int
    left: int
    right: int
    left_steps: int
    right_steps: int

    def degrees(self, azimuths_deg, spacing_deg: float):
        """(center, b_left, b_right) in degrees; b_left <= center <= b_right unwrapped."""
        c = float(azimuths_deg[self.center])
        return c, c - self.left_steps * spacing_deg, c + self.right_steps * spacing_deg


def _scan(w, peak: int, delta: float, step: int, limit: int) -> tuple[int, int]:
    D = len(w)
    floor = delta * w[peak]
    d = peak
    n = 0
    while n < limit:
        nxt = (d + step) % D
        if w[nxt] >= w[d] or w[nxt] < floor:
            break
        d = nxt
        n += 1
    return d, n


def region_boundaries(weights, peak: int, delta: float = DEFAULT_DELTA,
                      max_steps: int | None = None) -> Region:
    """Grow a region around `peak` while the weights keep falling.

    Walking right, the scan stops at the first d whose successor does not
    decrease or drops below ``delta * w[peak]``, and that d is the boundary;
    the left side is the mirror image.  Each side covers at most half the
    circle, or `max_steps` grid cells.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must be in [0, 1]")
    w = np.asarray(weights, dtype=float)
    limit = len(w) // 2
    if max_steps is not None:
        limit = min(limit, int(max_steps))
    right, nr = _scan(w, peak, delta, +1, limit)
    left, nl = _scan(w, peak, delta, -1, limit)
    return Region(int(peak), left, right, nl, nr)


@dataclass
class SslFrame:
    frame: int
    timestamp: float
    weights: np.ndarray
    peaks: list  # (index, azimuth_deg)
    regions: list  # Region
    silent: bool = False

    @property
    def n_sources(self) -> int:
        return len(self.peaks)

    def region_degrees(self, azimuths_deg, spacing_deg: float) -> list[tuple[float, float, float]]:
        return [r.degrees(azimuths_deg, spacing_deg) for r in self.regions]

    def to_record(self, azimuths_deg, spacing_deg: float) -> dict:
        regions = []
        for r in self.regions:
            c, lo, hi = r.degrees(azimuths_deg, spacing_deg)
            regions.append([c, float(wrap_deg(lo)), float(wrap_deg(hi))])
        return {
            "frame": self.frame,
            "timestamp": round(self.timestamp, 9),
            "weights": [float(x) for x in self.weights],
            "peaks": [float(a) for _, a in self.peaks],
            "regions": regions,
        }


class SslTracker:
    """Recursive EM, peak picking and region growing, one frame at a time."""

    def __init__(self, table: SteeringTable, spacing_deg: float, variance: float = DEFAULT_VARIANCE,
                 smoothing: float = DEFAULT_SMOOTHING, delta: float = DEFAULT_DELTA,
                 peak_threshold: float | None = None,
                 min_separation_deg: float = DEFAULT_MIN_SEPARATION,
                 max_half_width_deg: float | None = None):
        self.table = table
        self.spacing_deg = spacing_deg
        self.state = MixtureState(table.n_directions, variance, smoothing)
        self.delta = delta
        self.peak_threshold = peak_threshold
        self.min_separation_deg = min_separation_deg
        self.max_steps = None
        if max_half_width_deg is not None:
            self.max_steps = int(np.floor(max_half_width_deg / spacing_deg + 1e-9))

    def step(self, features, frame: int, timestamp: float) -> SslFrame:
        bins, _ = _as_arrays(features)
        em_recursive_update(self.state, features, self.table)
        w = self.state.weights.copy()
        peaks = detect_peaks(w, self.peak_threshold, self.min_separation_deg, self.spacing_deg)
        az = self.table.azimuths_deg
        regions = [region_boundaries(w, d, self.delta, self.max_steps) for d in peaks]
        return SslFrame(frame, timestamp, w, [(d, float(az[d])) for d in peaks], regions,
                        silent=len(bins) == 0)
