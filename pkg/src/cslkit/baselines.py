"""Grid-search DOA baselines that know the array transfer functions.

Both estimators pool over a window of STFT frames in the sensor frame and
report one direction per window, attached to the window's centre frame.
Steering vectors are far-field and anechoic: a plane wave arriving from unit
direction ``r`` reaches microphone ``p`` with delay ``tau = -<p, r> / c``, so
``H = exp(-2j pi f tau)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import StftTensor
from .errors import InvalidInputError
from .geometry import SphericalGrid

SPEED_OF_SOUND = 343.0
SRP_BAND = (340.0, 6000.0)
LSDD_BAND = (1800.0, 3600.0)
LSDD_ALPHA = 3.0
MASK_FLOOR = 1e-6  # rad, keeps w**-alpha finite at exact matches
CPSD_FLOOR = 1e-12


@dataclass
class SteeringTable:
    H: np.ndarray  # (K, J, M) complex, unit modulus
    k: np.ndarray  # STFT bin indices covered
    freqs: np.ndarray  # Hz
    mic_positions: np.ndarray

    @property
    def relative(self) -> np.ndarray:
        """``A = H / H_1`` (relative to microphone 1)."""
        return self.H * np.conj(self.H[:, :, :1])


@dataclass
class WindowEstimate:
    """One grid-search result for the window ``[start, stop)`` of frames."""

    start: int
    stop: int
    index: int
    direction: np.ndarray  # sensor frame

    @property
    def center(self) -> int:
        return (self.start + self.stop - 1) // 2


def band_bins(Y: StftTensor, band) -> np.ndarray:
    f = Y.freqs()
    k = np.flatnonzero((f >= band[0]) & (f <= band[1]))
    if len(k) == 0:
        raise InvalidInputError(f"no STFT bins inside band {band}")
    return k


def build_steering(mic_positions, grid_dirs, freqs, c: float = SPEED_OF_SOUND,
                   k=None, dtype=np.complex64) -> SteeringTable:
    """Far-field steering table ``H[k, j, m] = exp(2j pi f_k <p_m, r_j> / c)``."""
    P = np.asarray(mic_positions, dtype=float)
    D = np.asarray(grid_dirs.directions if isinstance(grid_dirs, SphericalGrid) else grid_dirs, dtype=float)
    f = np.atleast_1d(np.asarray(freqs, dtype=float))
    lead = D @ P.T / c  # (J, M) seconds of advance
    H = np.exp(2j * np.pi * f[:, None, None] * lead[None, :, :]).astype(dtype)
    kk = np.arange(len(f)) if k is None else np.asarray(k)
    return SteeringTable(H, kk, f, P)


def steering_for(Y: StftTensor, mic_positions, grid, band) -> SteeringTable:
    k = band_bins(Y, band)
    return build_steering(mic_positions, grid, Y.freqs()[k], k=k)


def tile_windows(n_frames: int, win_frames: int | None, overlap: float = 0.5):
    """``(start, stop)`` pairs; ``win_frames=None`` (or longer than the session)
    gives the single full-session window."""
    if win_frames is None or win_frames >= n_frames:
        return [(0, n_frames)]
    step = max(1, int(round(win_frames * (1.0 - overlap))))
    return [(s, s + win_frames) for s in range(0, n_frames - win_frames + 1, step)]


def _pair_matrix(steering: SteeringTable) -> np.ndarray:
    """Real matrix ``(J, 2*K*P)`` of cross-steering terms over mic pairs m < m'."""
    G = getattr(steering, "_pairs", None)
    if G is None:
        a, b = np.triu_indices(steering.H.shape[2], k=1)
        H = steering.H.transpose(1, 0, 2)  # (J, K, M)
        cross = (H[:, :, a] * np.conj(H[:, :, b])).reshape(H.shape[0], -1)
        G = np.concatenate([cross.real, -cross.imag], axis=1).astype(np.float32)
        steering._pairs = G
    return G


def srp_phat_scores(Y: StftTensor, steering: SteeringTable, windows) -> np.ndarray:
    """Steered response power ``(n_windows, J)`` from PHAT-normalised CPSDs.

    ``sum_k |sum_m conj(A_m) phat_m|^2`` expands into a direction-independent
    diagonal plus twice the real part of the pairwise terms, evaluated for all
    windows with a single matrix product.
    """
    C = Y.coefficients[:, steering.k, :]  # (M, K, N)
    csum = np.concatenate([np.zeros(C.shape[:2] + (1,), C.dtype),
                           np.cumsum(C * np.conj(C[:1]), axis=2)], axis=2)
    starts = np.array([w[0] for w in windows])
    stops = np.array([w[1] for w in windows])
    if np.any(stops - starts < 1):
        raise InvalidInputError("every window needs at least one frame")
    phi = (csum[:, :, stops] - csum[:, :, starts]) / (stops - starts)  # (M, K, W)
    mag = np.abs(phi)
    phat = np.where(mag >= CPSD_FLOOR, phi / np.where(mag >= CPSD_FLOOR, mag, 1.0), 0.0)
    a, b = np.triu_indices(phat.shape[0], k=1)
    X = (np.conj(phat[a]) * phat[b]).transpose(1, 0, 2).reshape(-1, phat.shape[2])  # (K*P, W)
    Xr = np.concatenate([X.real, X.imag], axis=0).astype(np.float32)
    diag = np.sum(np.abs(phat) ** 2, axis=(0, 1))  # (W,)
    return diag[:, None] + 2.0 * (_pair_matrix(steering) @ Xr).T.astype(float)


def srp_phat(Y: StftTensor, steering: SteeringTable, grid: SphericalGrid, windows) -> list[WindowEstimate]:
    """Argmax of the steered response power for each window."""
    scores = srp_phat_scores(Y, steering, windows)
    best = np.argmax(scores, axis=1)
    return [WindowEstimate(s, e, int(j), grid.directions[j]) for (s, e), j in zip(windows, best)]


def lsdd_bin_spectrum(y, H) -> np.ndarray:
    """Exact spatial spectrum ``phi_j = arccos(|H_j^H y| / (||H_j|| ||y||))`` of one bin."""
    y = np.asarray(y, dtype=complex)
    H = np.asarray(H, dtype=complex)
    ny = np.linalg.norm(y)
    if ny == 0:
        raise InvalidInputError("spatial spectrum is undefined for an all-zero bin")
    cos = np.abs(np.conj(H) @ y) / (np.linalg.norm(H, axis=1) * ny)
    return np.arccos(np.clip(cos, 0.0, 1.0))


def lsdd_frame_costs(Y: StftTensor, steering: SteeringTable, alpha: float = LSDD_ALPHA) -> np.ndarray:
    """Per-frame mask-weighted spatial spectra ``(N, J)``.

    Per bin ``phi = arccos(|H^H Y| / (||H|| ||Y||))``, mask ``w = min_j phi``
    (floored) and frame cost ``sum_k w**-alpha * phi``. All-zero bins add
    nothing. ``|H^H Y|^2`` is expanded over microphone pairs so each frequency
    is one real float32 matrix product over the live frames; see
    :func:`lsdd_bin_spectrum` for the exact per-bin form.
    """
    C = Y.coefficients[:, steering.k, :]  # (M, K, N)
    M, K, N = C.shape
    a, b = np.triu_indices(M, k=1)
    out = np.zeros((N, steering.H.shape[1]), dtype=np.float32)
    for kk in range(K):
        y = C[:, kk, :].astype(np.complex128)
        ysq = np.sum(np.abs(y) ** 2, axis=0)
        live = np.flatnonzero(ysq > 0)
        if len(live) == 0:
            continue
        y = y[:, live] / np.sqrt(ysq[live])  # unit norm, also keeps float32 away from denormals
        H = steering.H[kk]  # (J, M)
        G = np.conj(H[:, a]) * H[:, b]  # (J, P)
        X = y[a] * np.conj(y[b])  # (P, L)
        Gt = np.concatenate([G.real, G.imag], axis=1).T.astype(np.float32)  # (2P, J)
        Xt = np.concatenate([X.real.T, -X.imag.T], axis=1).astype(np.float32)  # (L, 2P)
        cos = Xt @ Gt
        cos *= 2.0
        cos += 1.0
        np.maximum(cos, 0.0, out=cos)
        np.sqrt(cos, out=cos)
        cos *= np.float32(1.0 / np.sqrt(M))
        np.clip(cos, 0.0, 1.0, out=cos)
        phi = np.arccos(cos, out=cos)  # (L, J)
        w = np.maximum(phi.min(axis=1).astype(float), MASK_FLOOR) ** -alpha
        phi *= w[:, None].astype(np.float32)
        if len(live) == N:
            out += phi
        else:
            out[live] += phi
    return out.astype(float)


def lsdd(Y: StftTensor, steering: SteeringTable, grid: SphericalGrid, windows,
         alpha: float = LSDD_ALPHA, frame_costs=None) -> list[WindowEstimate]:
    """Argmin over the grid of the mask-weighted spectrum summed over each window."""
    costs = lsdd_frame_costs(Y, steering, alpha) if frame_costs is None else frame_costs
    live = np.abs(Y.coefficients[:, steering.k, :]).sum(axis=(0, 1)) > 0  # frames with any energy
    csum = np.vstack([np.zeros((1, costs.shape[1])), np.cumsum(costs, axis=0)])
    lcum = np.concatenate([[0], np.cumsum(live)])
    out = []
    for s, e in windows:
        if lcum[e] - lcum[s] == 0:
            out.append(WindowEstimate(s, e, -1, np.full(3, np.nan)))
            continue
        j = int(np.argmin(csum[e] - csum[s]))
        out.append(WindowEstimate(s, e, j, grid.directions[j]))
    return out
