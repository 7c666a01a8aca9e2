"""Direct-path relative transfer function (DP-RTF) estimation.

Per frequency bin, the convolutive transfer functions (CTFs) of all channels
are estimated blindly from the cross-relation y^m * h^n = y^n * h^m between
microphone pairs.  Fixing the reference channel's first tap to one turns each
pair and frame into a linear equation ``row . h_tilde = z`` which is solved
with exponentially weighted recursive least squares.  The first taps of the
other channels are the DP-RTF localisation features.

Unknown vector layout: channel blocks of Q taps, ``[h^0_0..h^0_{Q-1}, h^1_0, ...]``,
with the entry of the reference's first tap removed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numba
import numpy as np

log = logging.getLogger(__name__)

DEFAULT_CTF_LENGTH = 8
DEFAULT_FORGETTING = 0.95
DEFAULT_INIT_EPS = 1e-2
DEFAULT_RESIDUAL_THRESHOLD = 0.5
# Forgetting is suspended while some diagonal entry of P exceeds this many
# times the prior 1/eps.  Directions the data never excites (CTFs shorter than
# Q, tonal sources) would otherwise grow as lambda^-p until P overflows.
WINDUP_CEILING = 1e4


class InsufficientHistory(ValueError):
    pass


def pair_order(n_mics: int) -> list[tuple[int, int]]:
    """All distinct pairs (m, n), m < n, in lexicographic order."""
    return list(combinations(range(n_mics), 2))


def n_unknowns(n_mics: int, ctf_length: int) -> int:
    return n_mics * ctf_length - 1


def first_tap_positions(n_mics: int, ctf_length: int, reference: int) -> np.ndarray:
    """Indices of h^m_0 (m != reference) inside the reduced unknown vector."""
    pos = []
    for m in range(n_mics):
        if m == reference:
            continue
        full = m * ctf_length
        pos.append(full if full < reference * ctf_length else full - 1)
    return np.array(pos, dtype=np.int64)


def build_cross_relation_row(history, pair, reference: int = 0, ctf_length: int | None = None):
    """Regressor and target of the normalised cross-relation for one pair.

    Parameters
    ----------
    history : array (M, >=Q) complex
        Recent STFT coefficients of one bin, newest first: ``history[m, q]`` is
        y^m_{p-q}.
    pair : (m, n)
        Distinct microphones.

    Returns
    -------
    regressor : (M*Q - 1,) complex
    target : complex
        Such that ``regressor @ h_tilde == target`` for the true CTFs.
    """
    m, n = pair
    if m == n:
        raise ValueError("cross-relation needs two distinct microphones")
    history = np.asarray(history)
    M = history.shape[0]
    Q = history.shape[1] if ctf_length is None else ctf_length
    if history.shape[1] < Q:
        raise InsufficientHistory(f"need {Q} frames of history, have {history.shape[1]}")
    full = np.zeros(M * Q, dtype=complex)
    full[m * Q : (m + 1) * Q] = history[n, :Q]
    full[n * Q : (n + 1) * Q] = -history[m, :Q]
    ref = reference * Q
    target = -full[ref]
    return np.delete(full, ref), complex(target)


@dataclass
class CtfState:
    """RLS state of one frequency bin."""

    n_mics: int
    ctf_length: int = DEFAULT_CTF_LENGTH
    reference: int = 0
    forgetting: float = DEFAULT_FORGETTING
    init_eps: float = DEFAULT_INIT_EPS
    h: np.ndarray = field(default=None, repr=False)
    P: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 < self.forgetting <= 1.0:
            raise ValueError("forgetting factor must be in (0, 1]")
        if self.ctf_length < 1:
            raise ValueError("CTF length must be >= 1")
        if self.h is None:
            self.reset()

    @property
    def size(self) -> int:
        return n_unknowns(self.n_mics, self.ctf_length)

    def reset(self) -> None:
        self.h = np.zeros(self.size, dtype=np.complex128)
        self.P = np.eye(self.size, dtype=np.complex128) / self.init_eps

    def is_healthy(self, tol: float = 1e-8) -> bool:
        P = self.P
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(self.h))):
            return False
        scale = max(1.0, float(np.max(np.abs(P))))
        if np.max(np.abs(P - P.conj().T)) > tol * scale:
            return False
        return bool(np.all(P.diagonal().real > 0))


def begin_frame(state: CtfState) -> None:
    """Discount all previous frames by the forgetting factor, unless P has
    already reached the wind-up ceiling."""
    if state.forgetting != 1.0:
        ceiling = WINDUP_CEILING / state.init_eps
        if np.max(state.P.diagonal().real) / state.forgetting <= ceiling:
            state.P /= state.forgetting


def rls_update(state: CtfState, regressor, target) -> complex:
    """Fold one equation into the state in place; returns the a-priori error.

    Minimises sum |row . h - z|^2 over all rows seen, with earlier frames
    discounted by :func:`begin_frame`.
    """
    phi = np.asarray(regressor, dtype=np.complex128)
    u = state.P @ phi.conj()
    den = 1.0 + float(np.real(phi @ u))
    err = complex(target - phi @ state.h)
    state.h += u * (err / den)
    state.P -= np.outer(u, u.conj()) / den
    return err


def update_frame(state: CtfState, history) -> float:
    """Feed all microphone pairs of one frame; returns the residual ratio.

    The ratio is sum |e|^2 / sum |z|^2 over the pairs, using a-priori errors,
    or ``inf`` when every target is zero.
    """
    begin_frame(state)
    err2 = z2 = 0.0
    for pair in pair_order(state.n_mics):
        row, z = build_cross_relation_row(history, pair, state.reference, state.ctf_length)
        e = rls_update(state, row, z)
        err2 += abs(e) ** 2
        z2 += abs(z) ** 2
    state.P = 0.5 * (state.P + state.P.conj().T)
    if not state.is_healthy():
        log.warning("RLS state diverged; resetting")
        state.reset()
    return err2 / z2 if z2 > 0 else float("inf")


@dataclass
class DpRtfFeature:
    frame: int
    bin: int
    values: np.ndarray  # (M-1,) complex, channels in increasing order skipping the reference
    reliable: bool


def extract_features(states, frame: int, bin_mask, residuals=None,
                     threshold: float = DEFAULT_RESIDUAL_THRESHOLD) -> list[DpRtfFeature]:
    """DP-RTF features of every unmasked bin.

    `states` is a sequence of :class:`CtfState` indexed by bin and
    `residuals` the matching residual ratios (missing means reliable).
    """
    feats = []
    for k, state in enumerate(states):
        if not bin_mask[k]:
            continue
        pos = first_tap_positions(state.n_mics, state.ctf_length, state.reference)
        vals = state.h[pos].copy()
        ok = bool(np.all(np.isfinite(vals)))
        if residuals is not None:
            ok = ok and residuals[k] <= threshold
        feats.append(DpRtfFeature(frame, k, vals, ok))
    return feats


@dataclass
class FeatureSet:
    """All features of one frame in array form."""

    frame: int
    bins: np.ndarray  # (F,) int
    values: np.ndarray  # (F, M-1) complex
    reliable: np.ndarray  # (F,) bool

    def __len__(self) -> int:
        return len(self.bins)

    def reliable_only(self) -> "FeatureSet":
        r = self.reliable
        return FeatureSet(self.frame, self.bins[r], self.values[r], self.reliable[r])

    def to_list(self) -> list[DpRtfFeature]:
        return [
            DpRtfFeature(self.frame, int(k), v.copy(), bool(r))
            for k, v, r in zip(self.bins, self.values, self.reliable)
        ]

    @classmethod
    def from_list(cls, frame: int, feats, n_values: int) -> "FeatureSet":
        feats = list(feats)
        if not feats:
            return cls(frame, np.zeros(0, int), np.zeros((0, n_values), complex), np.zeros(0, bool))
        return cls(
            frame,
            np.array([f.bin for f in feats]),
            np.array([f.values for f in feats]),
            np.array([f.reliable for f in feats]),
        )


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _rls_frame_kernel(Pr, Pi, hr, hi, Yr, Yi, active, lam, ceiling, ref, resid):
    # Same maths as update_frame, for all bins at once, with real and
    # imaginary parts split so the rank-1 downdate vectorises.
    K, M, Q = Yr.shape
    N = M * Q - 1
    rq = ref * Q
    idx = np.empty(2 * Q, np.int64)
    vr = np.empty(2 * Q)
    vi = np.empty(2 * Q)
    ur = np.empty(N)
    ui = np.empty(N)
    inv_lam = 1.0 / lam
    for k in range(K):
        if not active[k]:
            continue
        Pkr = Pr[k]
        Pki = Pi[k]
        hkr = hr[k]
        hki = hi[k]
        top = 0.0
        for i in range(N):
            top = max(top, Pkr[i, i])
        if lam != 1.0 and top * inv_lam <= ceiling:
            for i in range(N):
                for j in range(N):
                    Pkr[i, j] *= inv_lam
                    Pki[i, j] *= inv_lam
        err2 = 0.0
        z2 = 0.0
        for m in range(M):
            for n in range(m + 1, M):
                nz = 0
                zr = 0.0
                zi = 0.0
                for q in range(Q):
                    full = m * Q + q
                    ar = Yr[k, n, q]
                    ai = Yi[k, n, q]
                    if full == rq:
                        zr -= ar
                        zi -= ai
                    else:
                        idx[nz] = full if full < rq else full - 1
                        vr[nz] = ar
                        vi[nz] = ai
                        nz += 1
                for q in range(Q):
                    full = n * Q + q
                    ar = -Yr[k, m, q]
                    ai = -Yi[k, m, q]
                    if full == rq:
                        zr -= ar
                        zi -= ai
                    else:
                        idx[nz] = full if full < rq else full - 1
                        vr[nz] = ar
                        vi[nz] = ai
                        nz += 1
                # u = P conj(phi); P is Hermitian so u_i = sum_t conj(P[c_t, i] phi_t)
                for i in range(N):
                    ur[i] = 0.0
                    ui[i] = 0.0
                for t in range(nz):
                    c = idx[t]
                    a = vr[t]
                    b = vi[t]
                    for i in range(N):
                        pr = Pkr[c, i]
                        pim = Pki[c, i]
                        ur[i] += pr * a - pim * b
                        ui[i] -= pr * b + pim * a
                den = 1.0
                predr = 0.0
                predi = 0.0
                for t in range(nz):
                    c = idx[t]
                    den += vr[t] * ur[c] - vi[t] * ui[c]
                    predr += vr[t] * hkr[c] - vi[t] * hki[c]
                    predi += vr[t] * hki[c] + vi[t] * hkr[c]
                er = zr - predr
                ei = zi - predi
                err2 += er * er + ei * ei
                z2 += zr * zr + zi * zi
                sr = er / den
                si = ei / den
                for i in range(N):
                    hkr[i] += ur[i] * sr - ui[i] * si
                    hki[i] += ur[i] * si + ui[i] * sr
                inv_den = 1.0 / den
                for i in range(N):
                    air = ur[i] * inv_den
                    aii = ui[i] * inv_den
                    for j in range(N):
                        Pkr[i, j] -= air * ur[j] + aii * ui[j]
                        Pki[i, j] -= aii * ur[j] - air * ui[j]
        # conventional RLS lets the anti-Hermitian part of the rounding
        # error grow by 1/lambda per frame; project it out
        for i in range(N):
            Pki[i, i] = 0.0
            for j in range(i + 1, N):
                a = 0.5 * (Pkr[i, j] + Pkr[j, i])
                b = 0.5 * (Pki[i, j] - Pki[j, i])
                Pkr[i, j] = a
                Pkr[j, i] = a
                Pki[i, j] = b
                Pki[j, i] = -b
        resid[k] = err2 / z2 if z2 > 0.0 else np.inf


class DpRtfEstimator:
    """One RLS state machine per frequency bin, advanced a frame at a time.

    Bins are independent; inactive (gated) bins keep their state and only
    their signal history advances.
    """

    def __init__(self, n_mics: int, n_bins: int, ctf_length: int = DEFAULT_CTF_LENGTH,
                 reference: int = 0, forgetting: float = DEFAULT_FORGETTING,
                 init_eps: float = DEFAULT_INIT_EPS,
                 residual_threshold: float = DEFAULT_RESIDUAL_THRESHOLD,
                 health_check_every: int = 125):
        if not 0.0 < forgetting <= 1.0:
            raise ValueError("forgetting factor must be in (0, 1]")
        if ctf_length < 1:
            raise ValueError("CTF length must be >= 1")
        if n_mics < 2:
            raise ValueError("need at least two microphones")
        self.n_mics = n_mics
        self.n_bins = n_bins
        self.ctf_length = ctf_length
        self.reference = reference
        self.forgetting = float(forgetting)
        self.init_eps = float(init_eps)
        self.residual_threshold = residual_threshold
        self.health_check_every = health_check_every
        N = n_unknowns(n_mics, ctf_length)
        self._Pr = np.zeros((n_bins, N, N))
        self._Pi = np.zeros((n_bins, N, N))
        self._hr = np.zeros((n_bins, N))
        self._hi = np.zeros((n_bins, N))
        self._Yr = np.zeros((n_bins, n_mics, ctf_length))
        self._Yi = np.zeros((n_bins, n_mics, ctf_length))
        self._taps = first_tap_positions(n_mics, ctf_length, reference)
        self.frames_seen = 0
        self.resets = 0
        for k in range(n_bins):
            self._reset_bin(k)

    def _reset_bin(self, k: int) -> None:
        N = self._hr.shape[1]
        self._Pr[k] = np.eye(N) / self.init_eps
        self._Pi[k] = 0.0
        self._hr[k] = 0.0
        self._hi[k] = 0.0

    @property
    def h(self) -> np.ndarray:
        """Current CTF estimates, (K, M*Q - 1) complex."""
        return self._hr + 1j * self._hi

    @property
    def P(self) -> np.ndarray:
        return self._Pr + 1j * self._Pi

    def state(self, k: int) -> CtfState:
        """Copy of bin `k` as a :class:`CtfState`."""
        return CtfState(self.n_mics, self.ctf_length, self.reference, self.forgetting,
                        self.init_eps, h=self.h[k].copy(), P=self.P[k].copy())

    def process(self, coefficients: np.ndarray, active=None) -> tuple[np.ndarray, np.ndarray]:
        """Advance one frame.

        Parameters
        ----------
        coefficients : (M, K) complex STFT frame.
        active : (K,) bool, bins to update; default all.

        Returns
        -------
        dprtf : (K, M-1) complex current first-tap estimates.
        residual : (K,) a-priori residual ratio, NaN for bins not updated.
        """
        c = np.asarray(coefficients)
        self._Yr[:, :, 1:] = self._Yr[:, :, :-1]
        self._Yi[:, :, 1:] = self._Yi[:, :, :-1]
        self._Yr[:, :, 0] = c.real.T
        self._Yi[:, :, 0] = c.imag.T
        self.frames_seen += 1
        if active is None:
            active = np.ones(self.n_bins, dtype=bool)
        active = np.asarray(active, dtype=bool)
        if self.frames_seen < self.ctf_length:
            active = np.zeros(self.n_bins, dtype=bool)
        resid = np.full(self.n_bins, np.nan)
        _rls_frame_kernel(self._Pr, self._Pi, self._hr, self._hi, self._Yr, self._Yi,
                          active, self.forgetting, WINDUP_CEILING / self.init_eps, self.reference, resid)
        self._check_health(active)
        dprtf = self._hr[:, self._taps] + 1j * self._hi[:, self._taps]
        return dprtf, resid

    def _check_health(self, active) -> None:
        bad = ~(np.isfinite(self._hr).all(axis=1) & np.isfinite(self._hi).all(axis=1))
        diag = np.einsum("kii->ki", self._Pr)
        bad |= ~(diag > 0).all(axis=1)
        if self.health_check_every and self.frames_seen % self.health_check_every == 0:
            asym = np.abs(self._Pr - self._Pr.transpose(0, 2, 1)).max(axis=(1, 2))
            asym = np.maximum(asym, np.abs(self._Pi + self._Pi.transpose(0, 2, 1)).max(axis=(1, 2)))
            scale = np.maximum(1.0, np.abs(self._Pr).max(axis=(1, 2)))
            bad |= asym > 1e-8 * scale
        for k in np.flatnonzero(bad & active):
            log.warning("RLS state of bin %d diverged at frame %d; resetting", k, self.frames_seen - 1)
            self._reset_bin(k)
            self.resets += 1

    def features(self, frame: int, coefficients: np.ndarray, active=None) -> FeatureSet:
        """Process a frame and return the features of its active bins."""
        if active is None:
            active = np.ones(self.n_bins, dtype=bool)
        active = np.asarray(active, dtype=bool)
        dprtf, resid = self.process(coefficients, active)
        bins = np.flatnonzero(active & np.isfinite(resid))
        vals = dprtf[bins]
        reliable = (resid[bins] <= self.residual_threshold) & np.isfinite(vals).all(axis=1)
        return FeatureSet(frame, bins, vals, reliable)


def write_feature_csv(fh, featuresets, channels) -> None:
    """Debug dump: one line per (frame, bin, non-reference channel)."""
    fh.write("p,k,m,re,im,reliable\n")
    for fs in featuresets:
        for k, vals, ok in zip(fs.bins, fs.values, fs.reliable):
            for m, a in zip(channels, vals):
                fh.write(f"{fs.frame},{k},{m},{a.real:.9g},{a.imag:.9g},{int(ok)}\n")
