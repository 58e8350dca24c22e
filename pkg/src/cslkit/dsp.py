"""STFT analysis, per-bin features, energy-based bin selection and interval splits."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window

from .errors import InvalidInputError

FS = 16000
FRAME_LEN = 400  # 25 ms
HOP = 160  # 10 ms


def n_frames(n_samples: int, frame_len: int = FRAME_LEN, hop: int = HOP) -> int:
    """Number of full (non-padded) frames in a signal."""
    if n_samples < frame_len:
        return 0
    return (n_samples - frame_len) // hop + 1


@dataclass
class StftTensor:
    coefficients: np.ndarray  # (M, K, N) complex, K = frame_len // 2 + 1
    sample_rate: int = FS
    frame_len: int = FRAME_LEN
    hop: int = HOP

    @property
    def k_max(self) -> int:
        return self.frame_len // 2

    @property
    def n_channels(self) -> int:
        return self.coefficients.shape[0]

    @property
    def n_frames(self) -> int:
        return self.coefficients.shape[2]

    def freqs(self) -> np.ndarray:
        return np.arange(self.coefficients.shape[1]) * self.sample_rate / self.frame_len


@dataclass
class BinSelection:
    k: np.ndarray
    n: np.ndarray
    threshold_db: float
    band: tuple

    @property
    def empty(self) -> bool:
        return len(self.k) == 0

    def __len__(self):
        return len(self.k)


@dataclass
class FeatureTensor:
    features: np.ndarray  # (B, 2M + 1)
    k: np.ndarray
    n: np.ndarray
    k_tilde: np.ndarray

    def __len__(self):
        return len(self.k)

    def subset(self, idx) -> "FeatureTensor":
        return FeatureTensor(self.features[idx], self.k[idx], self.n[idx], self.k_tilde[idx])


@dataclass
class IntervalSplit:
    frames: np.ndarray  # sorted frame indices of the interval
    break_index: int  # frames[:break_index] -> sub-interval 1
    fallback: bool = False
    c1: float = 0.2
    c2: float = 0.8

    @property
    def first(self) -> np.ndarray:
        return self.frames[: self.break_index]

    @property
    def second(self) -> np.ndarray:
        return self.frames[self.break_index:]

    @property
    def break_frame(self) -> int:
        """First frame index belonging to sub-interval 2."""
        return int(self.frames[self.break_index])

    def labels(self, n) -> np.ndarray:
        """Sub-interval id (0 or 1) for each frame index in ``n``."""
        return (np.asarray(n) >= self.break_frame).astype(np.int64)


def analysis_window(frame_len: int = FRAME_LEN) -> np.ndarray:
    return get_window("hann", frame_len)


def stft(audio, sample_rate: int = FS, frame_len: int = FRAME_LEN, hop: int = HOP) -> StftTensor:
    """Hann-windowed STFT on full frames only (no centring/padding).

    Frame ``n`` starts at sample ``n * hop``. ``audio`` is ``(M, N)`` or ``(N,)``.
    """
    x = np.atleast_2d(np.asarray(audio))
    nf = n_frames(x.shape[1], frame_len, hop)
    if nf == 0:
        raise InvalidInputError("audio is shorter than one analysis frame")
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len, axis=1)[:, ::hop][:, :nf]
    spec = np.fft.rfft(frames * analysis_window(frame_len), axis=-1)  # (M, N, K)
    return StftTensor(np.ascontiguousarray(spec.transpose(0, 2, 1)), sample_rate, frame_len, hop)


def istft(Y: StftTensor, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    win = analysis_window(Y.frame_len)
    frames = np.fft.irfft(Y.coefficients.transpose(0, 2, 1), n=Y.frame_len, axis=-1) * win
    M, N = frames.shape[:2]
    total = (N - 1) * Y.hop + Y.frame_len
    out = np.zeros((M, total))
    norm = np.zeros(total)
    for n in range(N):
        s = n * Y.hop
        out[:, s:s + Y.frame_len] += frames[:, n]
        norm[s:s + Y.frame_len] += win ** 2
    out /= np.where(norm > 1e-10, norm, 1.0)
    if length is not None:
        out = out[:, :length] if length <= total else np.pad(out, ((0, 0), (0, length - total)))
    return out


def select_bins(Y: StftTensor, threshold_db: float = -40.0, band=(340.0, 8000.0)) -> BinSelection:
    """Keep in-band bins whose peak channel magnitude is within ``threshold_db``
    of the largest magnitude seen at the same frequency."""
    f_lo, f_hi = band
    if f_hi > Y.sample_rate / 2 or f_lo < 0 or f_lo > f_hi:
        raise InvalidInputError("band must lie within [0, Nyquist]")
    freqs = Y.freqs()
    in_band = np.flatnonzero((freqs >= f_lo) & (freqs <= f_hi))
    stat = np.abs(Y.coefficients[:, in_band, :]).max(axis=0)  # (K_band, N)
    peak = stat.max(axis=1, keepdims=True)
    ratio = 10.0 ** (threshold_db / 20.0) if np.isfinite(threshold_db) else 0.0
    mask = (stat >= ratio * peak) & (stat > 0)
    kk, nn = np.nonzero(mask)
    order = np.lexsort((kk, nn))  # frame-major ordering
    return BinSelection(in_band[kk[order]], nn[order], threshold_db, (f_lo, f_hi))


def extract_features(Y: StftTensor, sel: BinSelection, phase_ref: str = "none",
                     dtype=np.float64) -> FeatureTensor:
    """Per-bin ``[Re Y_1..Re Y_M, Im Y_1..Im Y_M]`` scaled to unit norm, plus k/k_max.

    ``phase_ref="mic1"`` rotates each bin so channel 1 is real-positive, which
    removes the source phase; the default keeps raw phases.
    """
    v = Y.coefficients[:, sel.k, sel.n].T  # (B, M)
    if phase_ref == "mic1":
        ref = v[:, :1]
        mag = np.abs(ref)
        v = v * np.where(mag > 0, np.conj(ref) / np.where(mag > 0, mag, 1.0), 1.0)
    elif phase_ref != "none":
        raise InvalidInputError(f"unknown phase reference {phase_ref!r}")
    x = np.concatenate([v.real, v.imag], axis=1)
    norm = np.linalg.norm(x, axis=1)
    keep = norm > 0
    x = x[keep] / norm[keep, None]
    k = np.asarray(sel.k)[keep]
    n = np.asarray(sel.n)[keep]
    k_tilde = k / Y.k_max
    feats = np.concatenate([x, k_tilde[:, None]], axis=1).astype(dtype)
    return FeatureTensor(feats, k, n, k_tilde)


def save_features(path, ft: FeatureTensor, session_id: str = "") -> Path:
    """Write ``<path>.bin`` (little-endian float32 features, then int32 k and n)
    and a ``<path>.json`` sidecar with shape, dtype and session id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    B, d = ft.features.shape
    with open(path.with_suffix(".bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(ft.features, dtype="<f4").tobytes())
        fh.write(np.asarray(ft.k, dtype="<i4").tobytes())
        fh.write(np.asarray(ft.n, dtype="<i4").tobytes())
    side = {"shape": [B, d], "dtype": "float32", "index_dtype": "int32", "session_id": session_id}
    path.with_suffix(".json").write_text(json.dumps(side, sort_keys=True))
    return path.with_suffix(".bin")


def load_features(path, k_max: int = FRAME_LEN // 2) -> tuple[FeatureTensor, str]:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    B, d = side["shape"]
    raw = path.with_suffix(".bin").read_bytes()
    if len(raw) != 4 * B * (d + 2):
        raise InvalidInputError(f"feature cache {path} does not match its sidecar")
    feats = np.frombuffer(raw, dtype="<f4", count=B * d).reshape(B, d).astype(np.float32)
    k = np.frombuffer(raw, dtype="<i4", count=B, offset=4 * B * d).astype(np.int64)
    n = np.frombuffer(raw, dtype="<i4", count=B, offset=4 * B * (d + 1)).astype(np.int64)
    return FeatureTensor(feats, k, n, k / k_max), side.get("session_id", "")


def ratio_bounds(n: int, c1: float = 0.2, c2: float = 0.8) -> tuple[int, int]:
    """Range of sizes ``b`` of the first sub-interval with ``c1 <= b/(n-b) <= c2``."""
    lo = int(np.ceil(c1 * n / (1.0 + c1) - 1e-12))
    hi = int(np.floor(c2 * n / (1.0 + c2) + 1e-12))
    return max(lo, 1), min(hi, n - 1)


def split_interval(frames, rng: np.random.Generator, c1: float = 0.2, c2: float = 0.8) -> IntervalSplit:
    """Random time-contiguous two-way split of an interval's frames.

    The earlier frames form sub-interval 1. When no break point satisfies the
    ratio bounds the admissible one closest to them is used and flagged.
    """
    frames = np.unique(np.asarray(frames))
    n = len(frames)
    if n < 2:
        raise InvalidInputError("an interval needs at least two frames to be split")
    lo, hi = ratio_bounds(n, c1, c2)
    if lo <= hi:
        return IntervalSplit(frames, int(rng.integers(lo, hi + 1)), False, c1, c2)
    b = np.arange(1, n)
    r = b / (n - b)
    gap = np.maximum(c1 - r, 0) + np.maximum(r - c2, 0)
    return IntervalSplit(frames, int(b[np.argmin(gap)]), True, c1, c2)


def gcc_phat_tdoa(Y: StftTensor, ch_a: int, ch_b: int, frames=None, max_tau: float | None = None,
                  resolution: int = 64) -> float:
    """Delay (s) of channel ``ch_b`` relative to ``ch_a`` from the PHAT-weighted
    cross-spectrum averaged over ``frames``.

    The correlation is evaluated on a fine lag grid directly from the spectrum,
    which gives sub-sample resolution without upsampling.
    """
    C = Y.coefficients
    sl = slice(None) if frames is None else frames
    cross = (C[ch_a][:, sl] * np.conj(C[ch_b][:, sl])).sum(axis=1)
    mag = np.abs(cross)
    g = np.where(mag > 1e-12, cross / np.where(mag > 1e-12, mag, 1.0), 0.0)
    freqs = Y.freqs()
    if max_tau is None:
        max_tau = Y.frame_len / (2.0 * Y.sample_rate)
    lags = np.linspace(-max_tau, max_tau, 2 * resolution + 1)
    # channel b delayed by tau -> cross-spectrum phase +2 pi f tau
    corr = np.real(np.exp(-2j * np.pi * np.outer(lags, freqs)) @ g)
    return float(lags[np.argmax(corr)])
